"""Examination manifest: loading/validation, BI-RADS extraction and
binarization, exclusion filtering, and patient-level cross-validation folds."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field

import numpy as np

SEQUENCE_IDS = ("T1_pre", "T1_post1", "T1_sub", "DWI_1500", "T2w")
LATERALITIES = ("left", "right")
LABELS = ("likely_benign", "suspicious")
PARENCHYMA_GRADES = ("minimal", "mild", "moderate", "marked")
LESION_TYPES = ("mass", "nme", "foci", "other")
COHORTS = ("internal", "external")

REQUIRED_COLUMNS = ("exam_id", "patient_id", "laterality", "cohort")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ExamRecord:
    exam_id: str
    patient_id: str
    laterality: str
    sequence_paths: dict = field(default_factory=dict)
    birads: int | None = None
    label: str | None = None
    bpe_grade: str | None = None
    bpd_grade: str | None = None
    lesion_size_mm: float | None = None
    lesion_type: str | None = None
    # ground-truth lesion extent in resampled slice coordinates (phantoms)
    lesion_slice_start: int | None = None
    lesion_slice_stop: int | None = None
    cohort: str = "internal"

    def validate(self, where=""):
        ctx = f"{where}: " if where else ""
        if not self.exam_id:
            raise ManifestError(f"{ctx}empty exam_id")
        if self.laterality not in LATERALITIES:
            raise ManifestError(f"{ctx}bad laterality {self.laterality!r}")
        if self.cohort not in COHORTS:
            raise ManifestError(f"{ctx}bad cohort {self.cohort!r}")
        for seq in self.sequence_paths:
            if seq not in SEQUENCE_IDS:
                raise ManifestError(f"{ctx}unknown sequence-id {seq!r}")
        if self.birads is not None and not 1 <= self.birads <= 6:
            raise ManifestError(f"{ctx}birads {self.birads} outside 1-6")
        if self.label is not None:
            if self.label not in LABELS:
                raise ManifestError(f"{ctx}bad label {self.label!r}")
            if self.birads is not None and self.label != binarize_label(self.birads):
                raise ManifestError(
                    f"{ctx}label {self.label!r} inconsistent with birads {self.birads}"
                )
        for name, val, allowed in (
            ("bpe_grade", self.bpe_grade, PARENCHYMA_GRADES),
            ("bpd_grade", self.bpd_grade, PARENCHYMA_GRADES),
            ("lesion_type", self.lesion_type, LESION_TYPES),
        ):
            if val is not None and val not in allowed:
                raise ManifestError(f"{ctx}bad {name} {val!r}")
        if self.lesion_size_mm is not None and self.lesion_size_mm < 0:
            raise ManifestError(f"{ctx}negative lesion_size_mm")


@dataclass(frozen=True)
class CohortManifest:
    records: tuple
    schema_version: str = "1"

    def validate(self):
        seen_ids, seen_pl = set(), set()
        for i, rec in enumerate(self.records):
            rec.validate(where=f"record {i}")
            if rec.exam_id in seen_ids:
                raise ManifestError(f"record {i}: duplicate exam_id {rec.exam_id!r}")
            seen_ids.add(rec.exam_id)
            pl = (rec.patient_id, rec.laterality)
            if pl in seen_pl:
                raise ManifestError(f"record {i}: duplicate (patient_id, laterality) {pl}")
            seen_pl.add(pl)
        return self

    def by_exam_id(self):
        return {r.exam_id: r for r in self.records}


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignments: dict  # exam_id -> (role for fold 0, ..., role for fold n-1)
    seed: int

    def role(self, exam_id, fold):
        return self.assignments[exam_id][fold]

    def exams_with_role(self, fold, role):
        return [e for e, roles in self.assignments.items() if roles[fold] == role]

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "n_folds": self.n_folds,
                "assignments": {e: list(r) for e, r in sorted(self.assignments.items())},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(
            n_folds=d["n_folds"],
            assignments={e: tuple(r) for e, r in d["assignments"].items()},
            seed=d["seed"],
        )


_OPTIONAL_FIELDS = (
    "birads", "label", "bpe_grade", "bpd_grade", "lesion_size_mm",
    "lesion_type", "lesion_slice_start", "lesion_slice_stop",
)
_COLUMNS = REQUIRED_COLUMNS + ("sequence_paths",) + _OPTIONAL_FIELDS


def _record_from_dict(d: dict, where: str) -> ExamRecord:
    for col in REQUIRED_COLUMNS:
        if col not in d or d[col] in ("", None):
            raise ManifestError(f"{where}: missing required column {col!r}")
    seq_paths = d.get("sequence_paths") or {}
    if isinstance(seq_paths, str):
        seq_paths = json.loads(seq_paths)

    def opt(name, conv):
        v = d.get(name)
        if v in ("", None):
            return None
        return conv(v)

    try:
        rec = ExamRecord(
            exam_id=str(d["exam_id"]),
            patient_id=str(d["patient_id"]),
            laterality=str(d["laterality"]),
            sequence_paths=dict(seq_paths),
            birads=opt("birads", lambda v: int(float(v))),
            label=opt("label", str),
            bpe_grade=opt("bpe_grade", str),
            bpd_grade=opt("bpd_grade", str),
            lesion_size_mm=opt("lesion_size_mm", float),
            lesion_type=opt("lesion_type", str),
            lesion_slice_start=opt("lesion_slice_start", lambda v: int(float(v))),
            lesion_slice_stop=opt("lesion_slice_stop", lambda v: int(float(v))),
            cohort=str(d.get("cohort") or "internal"),
        )
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{where}: {e}") from e
    rec.validate(where=where)
    return rec


def load_manifest(path) -> CohortManifest:
    """Load a CSV or JSONL manifest and validate every record.

    Error messages name the offending row.
    """
    path = str(path)
    records = []
    if path.endswith(".jsonl"):
        with open(path) as f:
            for i, line in enumerate(f):
                if line.strip():
                    records.append(_record_from_dict(json.loads(line), f"row {i + 1}"))
    else:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None:
                raise ManifestError("empty manifest file")
            for col in REQUIRED_COLUMNS:
                if col not in reader.fieldnames:
                    raise ManifestError(f"missing required column {col!r}")
            for i, row in enumerate(reader):
                records.append(_record_from_dict(row, f"row {i + 2}"))
    return CohortManifest(records=tuple(records)).validate()


def save_manifest(manifest: CohortManifest, path):
    with open(str(path), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_COLUMNS)
        writer.writeheader()
        for rec in manifest.records:
            writer.writerow(
                {
                    "exam_id": rec.exam_id,
                    "patient_id": rec.patient_id,
                    "laterality": rec.laterality,
                    "cohort": rec.cohort,
                    "sequence_paths": json.dumps(rec.sequence_paths, sort_keys=True),
                    "birads": "" if rec.birads is None else rec.birads,
                    "label": rec.label or "",
                    "bpe_grade": rec.bpe_grade or "",
                    "bpd_grade": rec.bpd_grade or "",
                    "lesion_size_mm": "" if rec.lesion_size_mm is None else rec.lesion_size_mm,
                    "lesion_type": rec.lesion_type or "",
                    "lesion_slice_start": ""
                    if rec.lesion_slice_start is None
                    else rec.lesion_slice_start,
                    "lesion_slice_stop": ""
                    if rec.lesion_slice_stop is None
                    else rec.lesion_slice_stop,
                }
            )


_BIRADS_RE = re.compile(r"BI[\s-]?RADS?\s*[:=]?\s*([0-6])\s*([abc])?", re.IGNORECASE)


def parse_birads(report_text: str):
    """Maximum BI-RADS category (1-6) mentioned in the text, or None.

    Subcategory letters (4a/4b/4c) map to 4. Category 0 mentions are
    ignored (not a valid assessment here).
    """
    best = None
    for m in _BIRADS_RE.finditer(report_text):
        cat = int(m.group(1))
        if 1 <= cat <= 6 and (best is None or cat > best):
            best = cat
    return best


def binarize_label(birads: int) -> str:
    """BI-RADS 1-3 -> likely_benign; 4-6 -> suspicious."""
    if not isinstance(birads, int) or not 1 <= birads <= 6:
        raise ValueError(f"birads {birads!r} outside 1-6")
    return "likely_benign" if birads <= 3 else "suspicious"


# named exclusion predicates; each takes an ExamRecord and returns True when
# the record must be excluded
EXCLUSION_RULES = {
    "missing_T1_sub": lambda r: "T1_sub" not in r.sequence_paths,
    "missing_DWI_1500": lambda r: "DWI_1500" not in r.sequence_paths,
    "missing_T2w": lambda r: "T2w" not in r.sequence_paths,
    "missing_birads": lambda r: r.birads is None and r.label is None,
    "missing_label": lambda r: r.label is None,
}


def apply_exclusions(manifest: CohortManifest, rule_names) -> tuple:
    """Drop records failing any named rule; the log attributes each dropped
    exam to the first failing rule in the given order."""
    rules = []
    for name in rule_names:
        if name not in EXCLUSION_RULES:
            raise ManifestError(f"unknown exclusion rule {name!r}")
        rules.append((name, EXCLUSION_RULES[name]))
    kept, log = [], []
    for rec in manifest.records:
        for name, pred in rules:
            if pred(rec):
                log.append({"exam_id": rec.exam_id, "rule": name})
                break
        else:
            kept.append(rec)
    return CohortManifest(records=tuple(kept), schema_version=manifest.schema_version), log


def make_folds(manifest: CohortManifest, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Patient-level stratified fold plan.

    Patients are partitioned into 2*n_folds shards stratified by binarized
    label; fold i uses shard i as test, shard (i+1 mod 2n) as val, and the
    rest as train. Test shards are therefore pairwise disjoint and cover
    half the patients across all folds.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    patients = {}
    for rec in manifest.records:
        if rec.label is None:
            raise ManifestError(f"exam {rec.exam_id!r} has no label; cannot stratify")
        patients.setdefault(rec.patient_id, []).append(rec)
    if len(patients) < 2 * n_folds:
        raise ValueError(
            f"need at least {2 * n_folds} patients for {n_folds} folds, have {len(patients)}"
        )
    # a patient is positive if any of their exams is suspicious
    pos = sorted(p for p, recs in patients.items() if any(r.label == "suspicious" for r in recs))
    neg = sorted(p for p in patients if p not in set(pos))
    if not pos or not neg:
        raise ValueError("manifest must contain both classes")

    rng = np.random.default_rng(seed)
    n_shards = 2 * n_folds
    shards = [[] for _ in range(n_shards)]
    for group in (pos, neg):
        order = rng.permutation(len(group))
        for k, idx in enumerate(order):
            shards[k % n_shards].append(group[idx])

    assignments = {}
    for pid, recs in patients.items():
        shard = next(s for s in range(n_shards) if pid in shards[s])
        roles = []
        for fold in range(n_folds):
            if shard == fold:
                roles.append("test")
            elif shard == (fold + 1) % n_shards:
                roles.append("val")
            else:
                roles.append("train")
        for rec in recs:
            assignments[rec.exam_id] = tuple(roles)
    return FoldPlan(n_folds=n_folds, assignments=assignments, seed=seed)
