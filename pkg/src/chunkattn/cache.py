"""Tiered per-(layer, head) store of sealed KV slabs and chunk summaries.

Sealed chunks live in a hot tier (numpy arrays) or an offload tier (an
in-process byte store standing in for host memory). Fetches from the
offload tier are counted in token rows, so the decode-phase load bound is
observable rather than asserted. Chunk representations are always hot.

The recent region keeps Q rows alongside K/V because sealing needs the
chunk's own queries to build its summary; Q rows are dropped at seal.

One decode loop writes per sequence; sealed slabs are immutable, so
gathers for distinct (layer, head) pairs could proceed concurrently.
"""

from __future__ import annotations

import numpy as np

from .representation import (
    ChunkRepr,
    build_chunk_repr,
    chunk_query,
    chunk_representation,
    weights_record,
)

RESIDENCY_MODES = ("hot", "offload", "budget")


class _Slab:
    """One sealed chunk's K/V rows, resident either as arrays or as bytes."""

    __slots__ = ("rows", "dim", "k", "v", "k_bytes", "v_bytes", "hot", "stamp")

    def __init__(self, k: np.ndarray, v: np.ndarray, stamp: int):
        self.rows, self.dim = k.shape
        k = np.ascontiguousarray(k)
        v = np.ascontiguousarray(v)
        k.flags.writeable = False
        v.flags.writeable = False
        self.k = k
        self.v = v
        self.k_bytes = None
        self.v_bytes = None
        self.hot = True
        self.stamp = stamp

    def offload(self) -> None:
        if not self.hot:
            return
        self.k_bytes = self.k.tobytes()
        self.v_bytes = self.v.tobytes()
        self.k = None
        self.v = None
        self.hot = False

    def fetch(self):
        """Materialize arrays from the byte tier without changing residency."""
        shape = (self.rows, self.dim)
        k = np.frombuffer(self.k_bytes, dtype=np.float64).reshape(shape).copy()
        v = np.frombuffer(self.v_bytes, dtype=np.float64).reshape(shape).copy()
        k.flags.writeable = False
        v.flags.writeable = False
        return k, v

    def promote(self, k: np.ndarray, v: np.ndarray) -> None:
        self.k = k
        self.v = v
        self.k_bytes = None
        self.v_bytes = None
        self.hot = True


class ChunkStore:
    """Segmented KV cache with residency tiers and exact load accounting."""

    def __init__(
        self,
        n_layers: int,
        n_heads: int,
        d_head: int,
        chunk_size: int,
        *,
        residency: str = "hot",
        budget: int | None = None,
        working_set_tokens: int | None = None,
        collect_weights: bool = False,
    ):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_head
        self.chunk_size = chunk_size
        self.working_set_tokens = working_set_tokens
        self._slabs = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._reprs = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._recent_q = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._recent_k = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._recent_v = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self._clock = 0
        self.tokens_loaded_this_step = 0
        self.tokens_loaded_total = 0
        self.tokens_gathered_this_step = 0
        self.tokens_gathered_total = 0
        self.peak_hot_tokens = 0
        self.weight_records = [] if collect_weights else None
        self.mode = "hot"
        self.budget = None
        self.set_residency(residency, budget)

    # -- residency ---------------------------------------------------------

    def set_residency(self, mode: str, budget: int | None = None) -> None:
        """Switch tiers administratively (no load counting).

        budget mode keeps at most `budget` hot tokens per (layer, head),
        evicting the least-recently-gathered slab first.
        """
        if mode not in RESIDENCY_MODES:
            raise ValueError(f"unknown residency mode {mode!r}; expected one of {RESIDENCY_MODES}")
        if mode == "budget":
            if budget is None:
                raise ValueError("budget residency requires a token budget")
            floor = self.working_set_tokens
            if floor is not None and budget < floor:
                raise ValueError(
                    f"budget={budget} cannot hold one working set of {floor} tokens"
                )
        else:
            budget = None
        self.mode = mode
        self.budget = budget
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                slabs = self._slabs[layer][head]
                if mode == "offload":
                    for slab in slabs:
                        slab.offload()
                elif mode == "hot":
                    for slab in slabs:
                        if not slab.hot:
                            slab.promote(*slab.fetch())
                else:
                    self._evict_over_budget(slabs)
        self._note_hot_level()

    def _evict_over_budget(self, slabs) -> None:
        hot = [s for s in slabs if s.hot]
        hot_tokens = sum(s.rows for s in hot)
        hot.sort(key=lambda s: s.stamp)
        while hot and hot_tokens > self.budget:
            victim = hot.pop(0)
            victim.offload()
            hot_tokens -= victim.rows

    def _note_hot_level(self) -> None:
        level = 0
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                level += sum(s.rows for s in self._slabs[layer][head] if s.hot)
                level += len(self._recent_k[layer][head])
        if level > self.peak_hot_tokens:
            self.peak_hot_tokens = level

    # -- writes ------------------------------------------------------------

    def _seal(self, layer: int, head: int) -> int:
        q_rows = self._recent_q[layer][head]
        k_rows = self._recent_k[layer][head]
        v_rows = self._recent_v[layer][head]
        Q = np.stack(q_rows)
        K = np.stack(k_rows)
        V = np.stack(v_rows)
        chunk_id = len(self._slabs[layer][head])
        self._install_sealed(layer, head, Q, K, V, chunk_id)
        q_rows.clear()
        k_rows.clear()
        v_rows.clear()
        return chunk_id

    def _install_sealed(self, layer, head, Q, K, V, chunk_id) -> None:
        if self.weight_records is not None:
            q_c = chunk_query(Q, K, V)
            c, weights = chunk_representation(q_c, K, return_weights=True)
            c.flags.writeable = False
            q_c.flags.writeable = False
            rep = ChunkRepr(layer=layer, head=head, chunk=chunk_id, c=c, q_c=q_c)
            self.weight_records.append(weights_record(layer, head, chunk_id, weights))
        else:
            rep = build_chunk_repr(layer, head, chunk_id, Q, K, V)
        self._clock += 1
        slab = _Slab(K, V, stamp=self._clock)
        slabs = self._slabs[layer][head]
        slabs.append(slab)
        self._reprs[layer][head].append(rep)
        if self.mode == "offload":
            slab.offload()
        elif self.mode == "budget":
            self._evict_over_budget(slabs)
        self._note_hot_level()

    def append_token(self, layer: int, head: int, q, k, v):
        """Add one token's unrotated states; returns the sealed chunk id
        when this token completes a chunk, else None."""
        q = np.asarray(q, dtype=np.float64).reshape(self.d_head)
        k = np.asarray(k, dtype=np.float64).reshape(self.d_head)
        v = np.asarray(v, dtype=np.float64).reshape(self.d_head)
        self._recent_q[layer][head].append(q)
        self._recent_k[layer][head].append(k)
        self._recent_v[layer][head].append(v)
        if len(self._recent_k[layer][head]) == self.chunk_size:
            return self._seal(layer, head)
        self._note_hot_level()
        return None

    def bulk_append(self, layer: int, head: int, Q, K, V) -> list:
        """Ingest a block of tokens at once, sealing every complete chunk.

        Equivalent to repeated append_token; used by the encoding phase,
        where all complete chunks are summarized up front.
        """
        Q = np.asarray(Q, dtype=np.float64)
        K = np.asarray(K, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        if Q.shape != K.shape or K.shape != V.shape or Q.ndim != 2:
            raise ValueError("Q/K/V must be matching (tokens, d_head) blocks")
        if len(self._recent_k[layer][head]):
            raise ValueError("bulk_append requires an empty recent buffer")
        n = Q.shape[0]
        l = self.chunk_size
        sealed = []
        for start in range(0, (n // l) * l, l):
            chunk_id = len(self._slabs[layer][head])
            self._install_sealed(
                layer, head, Q[start : start + l], K[start : start + l], V[start : start + l], chunk_id
            )
            sealed.append(chunk_id)
        for row in range((n // l) * l, n):
            self._recent_q[layer][head].append(Q[row].copy())
            self._recent_k[layer][head].append(K[row].copy())
            self._recent_v[layer][head].append(V[row].copy())
        self._note_hot_level()
        return sealed

    # -- reads -------------------------------------------------------------

    def sealed_count(self, layer: int, head: int) -> int:
        return len(self._slabs[layer][head])

    def recent_len(self, layer: int, head: int) -> int:
        return len(self._recent_k[layer][head])

    def recent_states(self, layer: int, head: int):
        """Stacked (rows, d_head) Q, K, V of the unsealed tail."""
        q = self._recent_q[layer][head]
        k = self._recent_k[layer][head]
        v = self._recent_v[layer][head]
        empty = np.zeros((0, self.d_head))
        return (
            np.stack(q) if q else empty,
            np.stack(k) if k else empty,
            np.stack(v) if v else empty,
        )

    def representations(self, layer: int, head: int) -> list:
        return self._reprs[layer][head]

    def repr_matrix(self, layer: int, head: int) -> np.ndarray:
        reps = self._reprs[layer][head]
        if not reps:
            return np.zeros((0, self.d_head))
        return np.stack([r.c for r in reps])

    def gather(self, layer: int, head: int, chunk_ids, include_recent: bool = False):
        """Materialize K/V rows for the given sealed chunks, ascending order.

        Offloaded slabs are fetched and counted; under budget residency the
        fetch also promotes the slab (evicting the least recently gathered),
        otherwise the hot set is left unchanged. Returns (K, V, row_chunk_ids).
        """
        slabs = self._slabs[layer][head]
        ks, vs, ids = [], [], []
        prev = -1
        for cid in chunk_ids:
            cid = int(cid)
            if not 0 <= cid < len(slabs):
                raise KeyError(f"unknown chunk id {cid} (sealed: {len(slabs)})")
            if cid <= prev:
                raise ValueError(f"chunk ids must be strictly ascending, got {tuple(chunk_ids)}")
            prev = cid
            slab = slabs[cid]
            self._clock += 1
            slab.stamp = self._clock
            if slab.hot:
                k, v = slab.k, slab.v
            else:
                k, v = slab.fetch()
                self.tokens_loaded_this_step += slab.rows
                self.tokens_loaded_total += slab.rows
                if self.mode == "budget":
                    slab.promote(k, v)
            ks.append(k)
            vs.append(v)
            ids.append(np.full(slab.rows, cid, dtype=np.int64))
        if self.mode == "budget":
            # evict once per gather so the working set cannot thrash itself
            self._evict_over_budget(slabs)
        if include_recent:
            _, rk, rv = self.recent_states(layer, head)
            if rk.shape[0]:
                ks.append(rk)
                vs.append(rv)
                ids.append(np.full(rk.shape[0], len(slabs), dtype=np.int64))
        if ks:
            K = np.concatenate(ks, axis=0)
            V = np.concatenate(vs, axis=0)
            row_ids = np.concatenate(ids)
        else:
            K = np.zeros((0, self.d_head))
            V = np.zeros((0, self.d_head))
            row_ids = np.zeros(0, dtype=np.int64)
        rows = K.shape[0]
        self.tokens_gathered_this_step += rows
        self.tokens_gathered_total += rows
        self._note_hot_level()
        return K, V, row_ids

    # -- accounting --------------------------------------------------------

    def begin_step(self) -> None:
        self.tokens_loaded_this_step = 0
        self.tokens_gathered_this_step = 0

    def hot_tokens(self) -> int:
        level = 0
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                level += sum(s.rows for s in self._slabs[layer][head] if s.hot)
                level += len(self._recent_k[layer][head])
        return level

    def residency_flags(self, layer: int, head: int) -> list:
        return ["hot" if s.hot else "offloaded" for s in self._slabs[layer][head]]

    def counters(self) -> dict:
        return {
            "tokens_loaded_this_step": self.tokens_loaded_this_step,
            "tokens_loaded_total": self.tokens_loaded_total,
            "tokens_gathered_this_step": self.tokens_gathered_this_step,
            "tokens_gathered_total": self.tokens_gathered_total,
            "peak_hot_tokens": self.peak_hot_tokens,
        }
