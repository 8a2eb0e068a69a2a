"""Per-exam prediction scores with fold provenance; the interchange unit
between training and metrics. Serialized as CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass

EXTERNAL_FOLD = "external"


@dataclass(frozen=True)
class PredictionRow:
    exam_id: str
    fold: str  # "0".."k-1" or the sentinel "external"
    split_role: str  # train | val | test | external
    label: int  # 0 = likely_benign, 1 = suspicious
    score: float


@dataclass(frozen=True)
class PredictionSet:
    rows: tuple
    config_hash: str = ""

    def validate(self):
        seen = set()
        for r in self.rows:
            if not 0.0 <= r.score <= 1.0:
                raise ValueError(f"score {r.score} for {r.exam_id!r} outside [0, 1]")
            if r.label not in (0, 1):
                raise ValueError(f"label {r.label!r} for {r.exam_id!r} not 0/1")
            key = (r.exam_id, r.fold)
            if key in seen:
                raise ValueError(f"duplicate (exam_id, fold) {key}")
            seen.add(key)
        return self

    def scores(self):
        return [r.score for r in self.rows]

    def labels(self):
        return [r.label for r in self.rows]

    def exam_ids(self):
        return [r.exam_id for r in self.rows]


def write_predictions(pset: PredictionSet, path):
    with open(str(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["exam_id", "fold", "split_role", "label", "score"])
        for r in pset.rows:
            writer.writerow([r.exam_id, r.fold, r.split_role, r.label, repr(r.score)])
        if pset.config_hash:
            f.write(f"# config_hash={pset.config_hash}\n")


def read_predictions(path) -> PredictionSet:
    rows = []
    config_hash = ""
    with open(str(path), newline="") as f:
        for i, line in enumerate(f):
            if line.startswith("# config_hash="):
                config_hash = line.strip().split("=", 1)[1]
    with open(str(path), newline="") as f:
        reader = csv.DictReader(r for r in f if not r.startswith("#"))
        for row in reader:
            rows.append(
                PredictionRow(
                    exam_id=row["exam_id"],
                    fold=row["fold"],
                    split_role=row["split_role"],
                    label=int(row["label"]),
                    score=float(row["score"]),
                )
            )
    return PredictionSet(rows=tuple(rows), config_hash=config_hash).validate()
