"""ROC/AUC machinery, operating points at fixed sensitivity, DeLong paired
AUC comparison, BH-FDR correction, and the performance/false-negative report
tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

SENSITIVITY_TARGETS = (0.90, 0.95, 0.975)

# slack for "sensitivity >= target" comparisons on k/n_pos fractions
_EPS = 1e-12


@dataclass(frozen=True)
class RocCurve:
    """One point per distinct score threshold plus +-inf sentinels.

    Prediction rule: score >= threshold => suspicious. Thresholds ascending,
    so sensitivity is nonincreasing and specificity nondecreasing along the
    arrays.
    """

    thresholds: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    n_pos: int
    n_neg: int
    scores: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)
    exam_ids: tuple = field(repr=False, default=None)


@dataclass(frozen=True)
class OperatingPoint:
    target_sensitivity: float
    threshold: float
    achieved_sensitivity: float
    specificity: float
    fn_exam_ids: tuple = ()
    fn_count: int = 0
    fp_count: int = 0


@dataclass(frozen=True)
class ComparisonResult:
    sequence_a: str
    sequence_b: str
    auc_a: float
    auc_b: float
    z_statistic: float
    p_raw: float
    p_adjusted: float = float("nan")
    diagnostic: str = ""


def _validate_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain NaN/Inf")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    labels = labels.astype(int)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise ValueError("both classes must be present")
    return scores, labels


def roc_curve(scores, labels, exam_ids=None) -> RocCurve:
    """Build the full ROC curve over every distinct threshold."""
    scores, labels = _validate_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)

    distinct = np.unique(scores)
    thresholds = np.concatenate(([-np.inf], distinct, [np.inf]))
    # counts of positives/negatives with score >= t, via cumulative sums over
    # the sorted distinct values
    sens = np.empty_like(thresholds)
    spec = np.empty_like(thresholds)
    for i, t in enumerate(thresholds):
        pred_pos = scores >= t
        sens[i] = np.count_nonzero(pred_pos & (labels == 1)) / n_pos
        spec[i] = np.count_nonzero(~pred_pos & (labels == 0)) / n_neg
    return RocCurve(
        thresholds=thresholds,
        sensitivity=sens,
        specificity=spec,
        n_pos=n_pos,
        n_neg=n_neg,
        scores=scores,
        labels=labels,
        exam_ids=tuple(exam_ids) if exam_ids is not None else None,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve (equals the Mann-Whitney statistic)."""
    fpr = 1.0 - curve.specificity
    tpr = curve.sensitivity
    # thresholds ascend, so fpr descends; integrate in ascending-fpr order
    return float(np.trapezoid(tpr[::-1], fpr[::-1]))


def auc_mann_whitney(scores, labels) -> float:
    """AUC as the Mann-Whitney U statistic with half credit for ties.

    Independent of the trapezoid path; used as its oracle.
    """
    scores, labels = _validate_scores_labels(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def operating_point(curve: RocCurve, target_sensitivity: float) -> OperatingPoint:
    """Highest threshold still achieving the target sensitivity.

    Among thresholds with sensitivity >= target this maximizes specificity
    (specificity is nondecreasing in the threshold).
    """
    if not (0.0 < target_sensitivity <= 1.0):
        raise ValueError(f"target sensitivity {target_sensitivity} not in (0, 1]")
    ok = np.flatnonzero(curve.sensitivity >= target_sensitivity - _EPS)
    i = int(ok[-1])  # thresholds ascend; last qualifying index
    t = float(curve.thresholds[i])
    fn_ids = ()
    if curve.exam_ids is not None:
        fn_ids = tuple(
            e
            for e, s, y in zip(curve.exam_ids, curve.scores, curve.labels)
            if y == 1 and s < t
        )
    fn_count = int(round(curve.n_pos * (1.0 - curve.sensitivity[i])))
    fp_count = int(round(curve.n_neg * (1.0 - curve.specificity[i])))
    return OperatingPoint(
        target_sensitivity=target_sensitivity,
        threshold=t,
        achieved_sensitivity=float(curve.sensitivity[i]),
        specificity=float(curve.specificity[i]),
        fn_exam_ids=fn_ids,
        fn_count=fn_count,
        fp_count=fp_count,
    )


def _delong_components(scores, labels):
    """Midrank structural components (theta, V10 per positive, V01 per negative)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = len(pos), len(neg)
    tz = rankdata(np.concatenate([pos, neg]))
    tx = rankdata(pos)
    ty = rankdata(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    theta = tz[:m].sum() / (m * n) - (m + 1) / (2 * n)
    return float(theta), v10, v01


def auc_delong_variance(scores, labels) -> tuple[float, float]:
    """Single-classifier AUC and its DeLong variance estimate."""
    scores, labels = _validate_scores_labels(scores, labels)
    theta, v10, v01 = _delong_components(scores, labels)
    var = np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01)
    return theta, float(var)


def delong_test(scores_a, scores_b, labels, sequence_a="a", sequence_b="b") -> ComparisonResult:
    """Paired DeLong test for the AUC difference of two score sets on the
    same exams."""
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    if scores_a.shape != scores_b.shape:
        raise ValueError("paired score sets must have equal length")
    scores_a, labels_arr = _validate_scores_labels(scores_a, labels)
    scores_b, _ = _validate_scores_labels(scores_b, labels)

    theta_a, v10_a, v01_a = _delong_components(scores_a, labels_arr)
    theta_b, v10_b, v01_b = _delong_components(scores_b, labels_arr)
    m, n = len(v10_a), len(v01_a)
    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    s = s10 / m + s01 / n
    var = s[0, 0] + s[1, 1] - 2.0 * s[0, 1]

    diff = theta_a - theta_b
    diagnostic = ""
    if var <= 0:
        if diff == 0.0:
            z, p = 0.0, 1.0
        else:
            z, p = float("nan"), float("nan")
            diagnostic = "zero variance with unequal AUCs"
    else:
        z = diff / math.sqrt(var)
        p = float(2.0 * norm.sf(abs(z)))
    return ComparisonResult(
        sequence_a=sequence_a,
        sequence_b=sequence_b,
        auc_a=theta_a,
        auc_b=theta_b,
        z_statistic=float(z),
        p_raw=p,
        diagnostic=diagnostic,
    )


def benjamini_hochberg(p_raw) -> list[float]:
    """Step-up FDR adjusted p-values, returned in input order."""
    p = np.asarray(p_raw, dtype=float)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("p_raw must be a non-empty 1-D sequence")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted_sorted = np.clip(adjusted_sorted, 0.0, 1.0)
    out = np.empty(m)
    out[order] = adjusted_sorted
    return out.tolist()


# ---------------------------------------------------------------------------
# report tables


def format_mean_sd(mean: float, sd: float, decimals: int = 2, sep: str = " ± ") -> str:
    return f"{mean:.{decimals}f}{sep}{sd:.{decimals}f}"


def format_p(p: float) -> str:
    if math.isnan(p):
        return "p=NA"
    return "p=" + f"{p:.2f}".lstrip("0")


@dataclass
class Table2Row:
    sequence: str
    auc_mean: float
    auc_sd: float
    p_adjusted_vs_reference: float  # NaN for the reference row itself
    spec_mean: dict  # target -> mean of fold specificities (fraction)
    spec_sd: dict
    pooled_fp: dict  # target -> false positives pooled across folds
    pooled_neg: int

    def formatted(self) -> dict:
        row = {
            "sequence": self.sequence,
            "auc": format_mean_sd(self.auc_mean, self.auc_sd, 2),
            "p_vs_reference": "-"
            if math.isnan(self.p_adjusted_vs_reference)
            else format_p(self.p_adjusted_vs_reference),
        }
        for t in sorted(self.spec_mean):
            key = f"specificity_at_{t:g}"
            row[key] = format_mean_sd(
                100 * self.spec_mean[t], 100 * self.spec_sd[t], 1
            )
            row[key + "_pooled"] = f"{self.pooled_fp[t]}/{self.pooled_neg}"
        return row


@dataclass
class Table2Report:
    reference_sequence: str
    rows: list  # Table2Row
    comparisons: list  # ComparisonResult, all pairs, BH-adjusted

    def to_json(self) -> str:
        return json.dumps(
            {
                "reference_sequence": self.reference_sequence,
                "rows": [
                    {
                        "sequence": r.sequence,
                        "auc_mean": r.auc_mean,
                        "auc_sd": r.auc_sd,
                        "p_adjusted_vs_reference": _none_if_nan(
                            r.p_adjusted_vs_reference
                        ),
                        "specificity_mean": {str(k): v for k, v in r.spec_mean.items()},
                        "specificity_sd": {str(k): v for k, v in r.spec_sd.items()},
                        "pooled_false_positives": {
                            str(k): v for k, v in r.pooled_fp.items()
                        },
                        "pooled_negatives": r.pooled_neg,
                    }
                    for r in self.rows
                ],
                "comparisons": [
                    {
                        "a": c.sequence_a,
                        "b": c.sequence_b,
                        "auc_a": c.auc_a,
                        "auc_b": c.auc_b,
                        "z": _none_if_nan(c.z_statistic),
                        "p_raw": _none_if_nan(c.p_raw),
                        "p_adjusted": _none_if_nan(c.p_adjusted),
                    }
                    for c in self.comparisons
                ],
            },
            indent=2,
            sort_keys=True,
        )

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            f = r.formatted()
            cells = [f["sequence"], f["auc"], f["p_vs_reference"]]
            cells += [f[k] for k in sorted(f) if k.startswith("specificity_at_") and not k.endswith("_pooled")]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _none_if_nan(x):
    return None if (isinstance(x, float) and math.isnan(x)) else x


def _fold_groups(prediction_set):
    groups = {}
    for row in prediction_set.rows:
        groups.setdefault(row.fold, []).append(row)
    return groups


def aggregate_fold_metrics(
    prediction_sets: dict,
    reference_sequence: str,
    targets=SENSITIVITY_TARGETS,
) -> Table2Report:
    """Per-sequence fold-level AUC and specificity summary plus pairwise
    DeLong tests on pooled test predictions, BH-corrected.

    prediction_sets maps sequence id -> PredictionSet; every set must cover
    the same (exam_id, fold) pairs.
    """
    if reference_sequence not in prediction_sets:
        raise ValueError(f"reference sequence {reference_sequence!r} missing")
    seqs = list(prediction_sets)
    keysets = {
        s: {(r.exam_id, r.fold) for r in prediction_sets[s].rows} for s in seqs
    }
    base = keysets[seqs[0]]
    for s in seqs[1:]:
        if keysets[s] != base:
            raise ValueError(f"exam/fold sets differ between {seqs[0]!r} and {s!r}")

    rows = []
    pooled = {}
    for seq in seqs:
        pset = prediction_sets[seq]
        fold_aucs, fold_spec = [], {t: [] for t in targets}
        pooled_fp = {t: 0 for t in targets}
        pooled_neg = 0
        for fold, frows in sorted(_fold_groups(pset).items(), key=lambda kv: str(kv[0])):
            curve = roc_curve(
                [r.score for r in frows],
                [r.label for r in frows],
                exam_ids=[r.exam_id for r in frows],
            )
            fold_aucs.append(auc(curve))
            pooled_neg += curve.n_neg
            for t in targets:
                op = operating_point(curve, t)
                fold_spec[t].append(op.specificity)
                pooled_fp[t] += op.fp_count
        ordered = sorted(pset.rows, key=lambda r: (str(r.fold), r.exam_id))
        pooled[seq] = (
            np.array([r.score for r in ordered]),
            np.array([r.label for r in ordered]),
        )
        rows.append(
            Table2Row(
                sequence=seq,
                auc_mean=float(np.mean(fold_aucs)),
                auc_sd=float(np.std(fold_aucs, ddof=1)) if len(fold_aucs) > 1 else 0.0,
                p_adjusted_vs_reference=float("nan"),
                spec_mean={t: float(np.mean(fold_spec[t])) for t in targets},
                spec_sd={
                    t: float(np.std(fold_spec[t], ddof=1)) if len(fold_spec[t]) > 1 else 0.0
                    for t in targets
                },
                pooled_fp=pooled_fp,
                pooled_neg=pooled_neg,
            )
        )

    comparisons = []
    for i, a in enumerate(seqs):
        for b in seqs[i + 1 :]:
            sa, la = pooled[a]
            sb, _ = pooled[b]
            comparisons.append(delong_test(sa, sb, la, sequence_a=a, sequence_b=b))
    if comparisons:
        adj = benjamini_hochberg([c.p_raw for c in comparisons])
        comparisons = [
            ComparisonResult(
                c.sequence_a, c.sequence_b, c.auc_a, c.auc_b, c.z_statistic,
                c.p_raw, p_adjusted=q, diagnostic=c.diagnostic,
            )
            for c, q in zip(comparisons, adj)
        ]
    by_pair = {
        frozenset((c.sequence_a, c.sequence_b)): c.p_adjusted for c in comparisons
    }
    for r in rows:
        if r.sequence != reference_sequence:
            r.p_adjusted_vs_reference = by_pair.get(
                frozenset((r.sequence, reference_sequence)), float("nan")
            )
    return Table2Report(reference_sequence=reference_sequence, rows=rows, comparisons=comparisons)


@dataclass
class Table3Row:
    sequence: str
    target_sensitivity: float
    count: int
    size_mean: float  # NaN when count is 0 or sizes unavailable
    size_sd: float
    pct_by_type: dict  # {mass, nme, foci, other} -> integer percent

    def formatted(self) -> dict:
        size = ""
        if self.count > 0 and not math.isnan(self.size_mean):
            size = f"{round(self.size_mean)}±{round(self.size_sd)}"
        return {
            "sequence": self.sequence,
            "threshold": f"{100 * self.target_sensitivity:g}%",
            "count": str(self.count),
            "size": size,
            **{k: str(v) if self.count else "" for k, v in self.pct_by_type.items()},
        }


@dataclass
class Table3Report:
    rows: list
    warnings: list

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": [
                    {
                        "sequence": r.sequence,
                        "target_sensitivity": r.target_sensitivity,
                        "count": r.count,
                        "size_mean": _none_if_nan(r.size_mean),
                        "size_sd": _none_if_nan(r.size_sd),
                        "pct_by_type": r.pct_by_type,
                    }
                    for r in self.rows
                ],
                "warnings": self.warnings,
            },
            indent=2,
            sort_keys=True,
        )

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            f = r.formatted()
            lines.append(
                "\t".join(
                    [f["sequence"], f["threshold"], f["count"], f["size"],
                     f["mass"], f["nme"], f["foci"], f["other"]]
                )
            )
        return "\n".join(lines) + "\n"


LESION_TYPES = ("mass", "nme", "foci", "other")


def summarize_false_negatives(sequence, target, fn_records, warnings=None):
    """One Table3 row from the FN exams' lesion metadata.

    fn_records: list of (lesion_size_mm or None, lesion_type or None).
    Missing metadata is counted under "other".
    """
    warnings = warnings if warnings is not None else []
    sizes, types = [], []
    for size, ltype in fn_records:
        if ltype not in LESION_TYPES:
            if ltype is not None:
                raise ValueError(f"unknown lesion type {ltype!r}")
            warnings.append(
                f"{sequence}@{target:g}: false negative lacking lesion metadata counted as 'other'"
            )
            ltype = "other"
        types.append(ltype)
        if size is not None:
            sizes.append(float(size))
    count = len(fn_records)
    if sizes:
        mean = float(np.mean(sizes))
        sd = float(np.std(sizes, ddof=1)) if len(sizes) > 1 else 0.0
    else:
        mean = sd = float("nan")
    pct = {
        t: (round(100 * types.count(t) / count) if count else 0) for t in LESION_TYPES
    }
    return Table3Row(
        sequence=sequence,
        target_sensitivity=target,
        count=count,
        size_mean=mean,
        size_sd=sd,
        pct_by_type=pct,
    )


def false_negative_report(
    prediction_sets: dict,
    manifest,
    targets=SENSITIVITY_TARGETS,
) -> Table3Report:
    """FN characteristics per (sequence, sensitivity target), pooled across
    folds with per-fold operating thresholds."""
    by_exam = {rec.exam_id: rec for rec in manifest.records}
    rows, warnings = [], []
    for seq, pset in prediction_sets.items():
        for t in targets:
            fn_ids = []
            for fold, frows in sorted(
                _fold_groups(pset).items(), key=lambda kv: str(kv[0])
            ):
                curve = roc_curve(
                    [r.score for r in frows],
                    [r.label for r in frows],
                    exam_ids=[r.exam_id for r in frows],
                )
                fn_ids.extend(operating_point(curve, t).fn_exam_ids)
            fn_records = []
            for eid in fn_ids:
                rec = by_exam.get(eid)
                if rec is None:
                    raise ValueError(f"false negative {eid!r} missing from manifest")
                fn_records.append((rec.lesion_size_mm, rec.lesion_type))
            rows.append(summarize_false_negatives(seq, t, fn_records, warnings))
    return Table3Report(rows=rows, warnings=warnings)
