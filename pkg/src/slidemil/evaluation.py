"""Patient-level evaluation: ROC-AUC with DeLong inference.

AUC is the Mann-Whitney statistic with midrank tie handling.  Variance,
confidence intervals and the paired two-model test use the nonparametric
placement-value estimator of DeLong, DeLong and Clarke-Pearson (1988),
computed in O(n log n) via midranks; the O(n^2) pairwise form is kept in
the test suite as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .bagstore import Dataset
from .errors import ValidationError

Z_95 = 1.96


@dataclass
class PatientPrediction:
    patient_id: str
    probability: float
    label: Optional[int] = None


@dataclass
class EvalReport:
    auc: float
    variance: float
    ci95: tuple[float, float]
    n_pos: int
    n_neg: int
    predictions: list[PatientPrediction]


@dataclass
class PairedDeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p_value: float
    degenerate: bool = False


def aggregate_patients(
    slide_probabilities: Mapping[str, float], dataset: Dataset
) -> list[PatientPrediction]:
    """Mean slide probability per patient, labels taken from the dataset.

    Only slides present in the input map contribute; patient order follows
    first appearance in the dataset.
    """
    by_slide = {bag.slide_id: bag for bag in dataset.bags}
    unknown = [s for s in slide_probabilities if s not in by_slide]
    if unknown:
        raise ValidationError(f"unknown slide ids: {sorted(unknown)[:5]}")
    sums: dict[str, list[float]] = {}
    labels: dict[str, Optional[int]] = {}
    order: list[str] = []
    for bag in dataset.bags:
        if bag.slide_id not in slide_probabilities:
            continue
        pid = bag.patient_id
        if pid not in sums:
            sums[pid] = []
            labels[pid] = dataset.patient_label(pid)
            order.append(pid)
        sums[pid].append(float(slide_probabilities[bag.slide_id]))
    return [
        PatientPrediction(patient_id=pid,
                          probability=float(np.mean(sums[pid])),
                          label=labels[pid])
        for pid in order
    ]


def ensemble_median(
    prediction_maps: Sequence[Mapping[str, float]]
) -> dict[str, float]:
    """Per-patient median across models; even counts average the two
    central values.  All maps must cover exactly the same patients."""
    if not prediction_maps:
        raise ValidationError("need at least one prediction map")
    keys = set(prediction_maps[0])
    for m in prediction_maps[1:]:
        if set(m) != keys:
            raise ValidationError("prediction maps cover different patients")
    return {
        pid: float(np.median([m[pid] for m in prediction_maps]))
        for pid in prediction_maps[0]
    }


def _scores_labels(predictions: Sequence[PatientPrediction]):
    labels = []
    scores = []
    for p in predictions:
        if p.label not in (0, 1):
            raise ValidationError(
                f"patient {p.patient_id!r} lacks a binary label"
            )
        if not np.isfinite(p.probability):
            raise ValidationError(f"patient {p.patient_id!r}: non-finite probability")
        labels.append(p.label)
        scores.append(p.probability)
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based midranks with stable tie grouping, O(n log n)."""
    order = np.argsort(x, kind="mergesort")
    z = x[order]
    n = len(x)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


def _placements(scores: np.ndarray, labels: np.ndarray):
    """Per-class placement values and the midrank AUC.

    v10[i]: fraction of negatives the i-th positive outranks (ties half);
    v01[j]: fraction of positives the j-th negative is outranked by.
    """
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = len(pos), len(neg)
    if m < 1 or n < 1:
        raise ValidationError("AUC needs at least one positive and one negative")
    tz = _midranks(np.concatenate([pos, neg]))
    tx = _midranks(pos)
    ty = _midranks(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    auc_value = (tz[:m].sum() / m - (m + 1) / 2.0) / n
    return v10, v01, float(auc_value)


def auc(predictions: Sequence[PatientPrediction]) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(pos = neg)."""
    scores, labels = _scores_labels(predictions)
    _, _, value = _placements(scores, labels)
    return value


def delong_variance(predictions: Sequence[PatientPrediction]) -> tuple[float, float]:
    """(auc, variance) from the placement-value estimator.

    Requires at least two patients per class so the sample variances exist.
    """
    scores, labels = _scores_labels(predictions)
    v10, v01, auc_value = _placements(scores, labels)
    if len(v10) < 2 or len(v01) < 2:
        raise ValidationError("DeLong variance needs >= 2 patients per class")
    variance = v10.var(ddof=1) / len(v10) + v01.var(ddof=1) / len(v01)
    return auc_value, float(variance)


def evaluate(predictions: Sequence[PatientPrediction]) -> EvalReport:
    """Full report: AUC, DeLong variance and the 1.96-sigma CI clipped to
    the [0, 1] probability scale."""
    auc_value, variance = delong_variance(predictions)
    half = Z_95 * float(np.sqrt(variance))
    lo = min(max(auc_value - half, 0.0), 1.0)
    hi = min(max(auc_value + half, 0.0), 1.0)
    labels = [p.label for p in predictions]
    return EvalReport(
        auc=auc_value,
        variance=variance,
        ci95=(lo, hi),
        n_pos=sum(1 for y in labels if y == 1),
        n_neg=sum(1 for y in labels if y == 0),
        predictions=list(predictions),
    )


def delong_paired_test(
    predictions_a: Sequence[PatientPrediction],
    predictions_b: Sequence[PatientPrediction],
) -> PairedDeLongResult:
    """Two-sided DeLong test for correlated AUCs on identical patients.

    A zero-variance difference (for example, two identical ensembles) is
    reported as degenerate with p = 1 when the AUCs agree instead of
    erroring out.
    """
    ids_a = [p.patient_id for p in predictions_a]
    ids_b = [p.patient_id for p in predictions_b]
    if ids_a != ids_b:
        if sorted(ids_a) != sorted(ids_b):
            raise ValidationError("prediction sets cover different patients")
        by_id = {p.patient_id: p for p in predictions_b}
        predictions_b = [by_id[i] for i in ids_a]
    scores_a, labels_a = _scores_labels(predictions_a)
    scores_b, labels_b = _scores_labels(predictions_b)
    if not np.array_equal(labels_a, labels_b):
        raise ValidationError("prediction sets disagree on patient labels")

    v10_a, v01_a, auc_a = _placements(scores_a, labels_a)
    v10_b, v01_b, auc_b = _placements(scores_b, labels_b)
    m, n = len(v10_a), len(v01_a)
    if m < 2 or n < 2:
        raise ValidationError("paired DeLong test needs >= 2 patients per class")
    s10 = np.cov(np.vstack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.vstack([v01_a, v01_b]), ddof=1)
    cov = s10 / m + s01 / n
    var_diff = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    diff = auc_a - auc_b
    if var_diff <= 0.0:
        if diff == 0.0:
            return PairedDeLongResult(auc_a, auc_b, z=0.0, p_value=1.0, degenerate=True)
        z = float(np.copysign(np.inf, diff))
        return PairedDeLongResult(auc_a, auc_b, z=z, p_value=0.0, degenerate=True)
    z = diff / float(np.sqrt(var_diff))
    p = float(2.0 * norm.sf(abs(z)))
    return PairedDeLongResult(auc_a, auc_b, z=float(z), p_value=p)


def paired_placement_covariance(
    predictions_a: Sequence[PatientPrediction],
    predictions_b: Sequence[PatientPrediction],
) -> np.ndarray:
    """2x2 AUC covariance matrix of the two prediction sets."""
    scores_a, labels = _scores_labels(predictions_a)
    scores_b, _ = _scores_labels(predictions_b)
    v10_a, v01_a, _ = _placements(scores_a, labels)
    v10_b, v01_b, _ = _placements(scores_b, labels)
    s10 = np.cov(np.vstack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.vstack([v01_a, v01_b]), ddof=1)
    return s10 / len(v10_a) + s01 / len(v01_a)


def report_text(report: EvalReport) -> str:
    lines = [
        f"auc={report.auc!r}",
        f"variance={report.variance!r}",
        f"ci95_lo={report.ci95[0]!r}",
        f"ci95_hi={report.ci95[1]!r}",
        f"n_pos={report.n_pos}",
        f"n_neg={report.n_neg}",
        f"n_patients={len(report.predictions)}",
    ]
    return "\n".join(lines) + "\n"


def predictions_csv(predictions: Sequence[PatientPrediction]) -> str:
    lines = ["patient_id,label,probability"]
    for p in predictions:
        label = "NA" if p.label is None else str(p.label)
        lines.append(f"{p.patient_id},{label},{p.probability!r}")
    return "\n".join(lines) + "\n"
