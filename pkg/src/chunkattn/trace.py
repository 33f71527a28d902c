"""Record of which chunks each (layer, head) selected at each step."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(slots=True)
class TraceRecord:
    step: int
    layer: int
    head: int
    chunks: tuple
    candidates: tuple | None = None
    scores: tuple | None = None


class SelectionTrace:
    """Append-only selection log; one record per (step, layer, head)."""

    def __init__(self, meta: dict | None = None):
        self.records: list[TraceRecord] = []
        self.meta = dict(meta or {})

    def append(self, step, layer, head, chunks, candidates=None, scores=None) -> None:
        self.records.append(TraceRecord(step, layer, head, tuple(chunks), candidates, scores))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def chunk_union(self) -> set:
        seen = set()
        for rec in self.records:
            seen.update(rec.chunks)
        return seen

    def selection_counts(self, m: int) -> np.ndarray:
        """Times each chunk id in [0, m) appears in a selection."""
        counts = np.zeros(m, dtype=np.int64)
        for rec in self.records:
            for cid in rec.chunks:
                if 0 <= cid < m:
                    counts[cid] += 1
        return counts

    def to_jsonable(self) -> dict:
        records = []
        for rec in self.records:
            row = [rec.step, rec.layer, rec.head, list(rec.chunks)]
            if rec.candidates is not None:
                row.append(list(rec.candidates))
                row.append([float(s) for s in (rec.scores or ())])
            records.append(row)
        return {"meta": self.meta, "records": records}

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_jsonable(), f, sort_keys=True, separators=(",", ":"))
            f.write("\n")
