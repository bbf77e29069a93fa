import numpy as np
import pytest

from slidemil import evaluation
from slidemil.bagstore import Bag, Dataset
from slidemil.errors import ValidationError
from slidemil.evaluation import (
    PatientPrediction,
    aggregate_patients,
    auc,
    delong_paired_test,
    delong_variance,
    ensemble_median,
    evaluate,
    paired_placement_covariance,
)


def _preds(scores, labels):
    return [
        PatientPrediction(f"p{i}", float(s), int(y))
        for i, (s, y) in enumerate(zip(scores, labels))
    ]


def _brute_force_auc(scores, labels):
    """O(n^2) pairwise oracle: wins + half ties over all pos/neg pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# aggregation


def _dataset_for_slides(slide_to_patient, labels):
    bags = [
        Bag(slide, pid, "c", labels[pid], np.zeros((1, 2), dtype=np.float32))
        for slide, pid in slide_to_patient.items()
    ]
    return Dataset(bags)


def test_aggregate_single_slide():
    ds = _dataset_for_slides({"s1": "p1"}, {"p1": 1})
    out = aggregate_patients({"s1": 0.7}, ds)
    assert len(out) == 1
    assert out[0].probability == 0.7
    assert out[0].label == 1


def test_aggregate_two_slides_mean():
    ds = _dataset_for_slides({"s1": "p1", "s2": "p1"}, {"p1": 0})
    out = aggregate_patients({"s1": 0.2, "s2": 0.8}, ds)
    assert out[0].probability == pytest.approx(0.5, abs=1e-15)


def test_aggregate_mixed_counts_hand_means():
    ds = _dataset_for_slides(
        {"a1": "pa", "a2": "pa", "a3": "pa", "b1": "pb", "c1": "pc", "c2": "pc"},
        {"pa": 1, "pb": 0, "pc": 1},
    )
    probs = {"a1": 0.1, "a2": 0.5, "a3": 0.6, "b1": 0.9, "c1": 0.25, "c2": 0.35}
    out = {p.patient_id: p.probability for p in aggregate_patients(probs, ds)}
    assert out["pa"] == pytest.approx((0.1 + 0.5 + 0.6) / 3, abs=1e-15)
    assert out["pb"] == pytest.approx(0.9, abs=1e-15)
    assert out["pc"] == pytest.approx(0.3, abs=1e-15)


def test_aggregate_unknown_slide_rejected():
    ds = _dataset_for_slides({"s1": "p1"}, {"p1": 1})
    with pytest.raises(ValidationError, match="unknown"):
        aggregate_patients({"sX": 0.5}, ds)


# ---------------------------------------------------------------------------
# ensemble median


def test_ensemble_median_single_model_identity():
    m = {"p1": 0.3, "p2": 0.9}
    assert ensemble_median([m]) == m


def test_ensemble_median_odd():
    maps = [{"p": 0.1}, {"p": 0.9}, {"p": 0.5}]
    assert ensemble_median(maps)["p"] == 0.5


def test_ensemble_median_even_averages_central():
    maps = [{"p": 0.1}, {"p": 0.2}, {"p": 0.6}, {"p": 0.9}]
    assert ensemble_median(maps)["p"] == pytest.approx(0.4, abs=1e-15)


def test_ensemble_median_matches_sort_oracle(rng):
    patients = [f"p{i}" for i in range(20)]
    maps = [{p: float(rng.uniform()) for p in patients} for _ in range(15)]
    got = ensemble_median(maps)
    for p in patients:
        values = sorted(m[p] for m in maps)
        assert got[p] == pytest.approx(values[7], abs=1e-15)  # 15 values: index 7


def test_ensemble_median_permutation_invariant(rng):
    patients = [f"p{i}" for i in range(7)]
    maps = [{p: float(rng.uniform()) for p in patients} for _ in range(6)]
    a = ensemble_median(maps)
    b = ensemble_median(maps[::-1])
    assert a == b


def test_ensemble_median_coverage_mismatch():
    with pytest.raises(ValidationError):
        ensemble_median([{"p1": 0.5}, {"p2": 0.5}])


# ---------------------------------------------------------------------------
# auc


def test_auc_perfect_separation():
    assert auc(_preds([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0


def test_auc_all_ties():
    assert auc(_preds([0.5] * 10, [1] * 5 + [0] * 5)) == 0.5


def test_auc_matches_brute_force(rng):
    for trial in range(20):
        n = int(rng.integers(4, 200))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        scores = rng.uniform(size=n)
        if trial % 2:
            scores = np.round(scores, 1)  # force ties
        got = auc(_preds(scores, labels))
        want = _brute_force_auc(scores, labels)
        assert got == pytest.approx(want, abs=1e-12)


def test_auc_matches_sklearn(rng):
    # secondary cross-check against a widely used implementation
    from sklearn.metrics import roc_auc_score

    labels = rng.integers(0, 2, size=150)
    labels[0] = 1
    labels[1] = 0
    scores = np.round(rng.uniform(size=150), 2)
    assert auc(_preds(scores, labels)) == pytest.approx(
        roc_auc_score(labels, scores), abs=1e-12
    )


def test_auc_single_class_rejected():
    with pytest.raises(ValidationError):
        auc(_preds([0.1, 0.9], [1, 1]))


def test_auc_invariant_under_monotone_transform(rng):
    labels = rng.integers(0, 2, size=80)
    labels[:2] = [0, 1]
    scores = rng.uniform(size=80)
    a = auc(_preds(scores, labels))
    b = auc(_preds(np.exp(3 * scores), labels))
    assert a == pytest.approx(b, abs=1e-12)


def test_auc_negation_antisymmetry(rng):
    labels = rng.integers(0, 2, size=81)
    labels[:2] = [0, 1]
    scores = np.round(rng.uniform(size=81), 1)
    assert auc(_preds(1 - scores, labels)) == pytest.approx(
        1 - auc(_preds(scores, labels)), abs=1e-12
    )


# ---------------------------------------------------------------------------
# delong variance and ci


def test_delong_perfect_separation_zero_variance():
    preds = _preds([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    value, variance = delong_variance(preds)
    assert value == 1.0
    assert variance == 0.0
    report = evaluate(preds)
    assert report.ci95 == (1.0, 1.0)


def test_delong_auc_equals_auc_exactly(rng):
    for _ in range(20):
        n = int(rng.integers(6, 120))
        labels = rng.integers(0, 2, size=n)
        labels[:4] = [0, 0, 1, 1]
        scores = np.round(rng.uniform(size=n), 2)
        preds = _preds(scores, labels)
        value, _ = delong_variance(preds)
        assert value == auc(preds)  # bitwise: same midrank path


def test_delong_report_shape():
    # interval format mirrors published usage: point estimate with a
    # clipped 95% band around it
    rng = np.random.default_rng(5)
    labels = np.array([1] * 30 + [0] * 30)
    scores = np.where(labels == 1, 1.2, 0.0) + rng.standard_normal(60)
    report = evaluate(_preds(scores, labels))
    assert 0.0 <= report.ci95[0] <= report.auc <= report.ci95[1] <= 1.0
    assert report.n_pos == 30 and report.n_neg == 30
    assert report.variance > 0


def test_delong_needs_two_per_class():
    with pytest.raises(ValidationError):
        delong_variance(_preds([0.9, 0.1, 0.5], [1, 0, 0]))


def test_delong_ci_coverage_smoke(rng):
    # small preview of the acceptance monte-carlo: 200 trials
    true_auc = 0.75
    delta = np.sqrt(2.0) * 0.6744897501960817  # sqrt(2) * Phi^-1(0.75)
    hits = 0
    trials = 200
    for _ in range(trials):
        pos = rng.standard_normal(100) + delta
        neg = rng.standard_normal(100)
        preds = _preds(np.concatenate([pos, neg]), [1] * 100 + [0] * 100)
        report = evaluate(preds)
        hits += report.ci95[0] <= true_auc <= report.ci95[1]
    assert 0.90 <= hits / trials <= 0.99


def test_placement_covariance_psd(rng):
    for _ in range(25):
        n = int(rng.integers(6, 60))
        labels = rng.integers(0, 2, size=n)
        labels[:4] = [0, 0, 1, 1]
        a = _preds(np.round(rng.uniform(size=n), 1), labels)
        b = _preds(np.round(rng.uniform(size=n), 1), labels)
        cov = paired_placement_covariance(a, b)
        assert cov[0, 1] == pytest.approx(cov[1, 0], abs=1e-15)
        assert np.linalg.eigvalsh(cov).min() >= -1e-12


# ---------------------------------------------------------------------------
# paired test


def test_paired_identical_is_degenerate():
    preds = _preds([0.9, 0.4, 0.6, 0.1], [1, 0, 1, 0])
    res = delong_paired_test(preds, preds)
    assert res.degenerate
    assert res.p_value == 1.0
    assert res.z == 0.0


def test_paired_negated_scores_antisymmetric(rng):
    labels = np.array([1] * 20 + [0] * 20)
    scores = rng.uniform(size=40)
    res = delong_paired_test(_preds(scores, labels), _preds(1 - scores, labels))
    assert res.auc_b == pytest.approx(1 - res.auc_a, abs=1e-12)


def test_paired_label_mismatch_rejected():
    a = _preds([0.9, 0.1, 0.5, 0.6], [1, 0, 1, 0])
    b = _preds([0.9, 0.1, 0.5, 0.6], [1, 0, 0, 1])
    with pytest.raises(ValidationError):
        delong_paired_test(a, b)


def test_paired_aligns_by_patient_id():
    a = _preds([0.9, 0.1, 0.7, 0.2], [1, 0, 1, 0])
    b = list(reversed(_preds([0.9, 0.1, 0.7, 0.2], [1, 0, 1, 0])))
    res = delong_paired_test(a, b)
    assert res.degenerate and res.p_value == 1.0


def _perm_oracle_p(a, b, labels, obs_diff, rng, n_perm=2000):
    def auc_np(scores):
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        gt = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        return gt / (len(pos) * len(neg))

    count = 0
    for _ in range(n_perm):
        flip = rng.integers(2, size=len(labels)).astype(bool)
        aa = np.where(flip, b, a)
        bb = np.where(flip, a, b)
        if abs(auc_np(aa) - auc_np(bb)) >= abs(obs_diff):
            count += 1
    return (1 + count) / (n_perm + 1)


def test_paired_against_permutation_oracle_strong_effect():
    rng = np.random.default_rng(314)
    n = 100
    labels = np.array([1] * n + [0] * n)
    t = labels + rng.standard_normal(2 * n)
    a = t + 0.6 * rng.standard_normal(2 * n)
    b = 0.55 * t + 1.05 * rng.standard_normal(2 * n)
    res = delong_paired_test(_preds(a, labels), _preds(b, labels))
    p_perm = _perm_oracle_p(a, b, labels, res.auc_a - res.auc_b,
                            np.random.default_rng(999))
    assert res.z > 0 and res.auc_a > res.auc_b
    assert res.p_value < 0.01
    assert p_perm < 0.01


def test_paired_against_permutation_oracle_moderate_effect():
    rng = np.random.default_rng(2718)
    n = 100
    labels = np.array([1] * n + [0] * n)
    t = labels + rng.standard_normal(2 * n)
    a = t + 0.6 * rng.standard_normal(2 * n)
    b = 0.85 * t + 0.75 * rng.standard_normal(2 * n)
    res = delong_paired_test(_preds(a, labels), _preds(b, labels))
    p_perm = _perm_oracle_p(a, b, labels, res.auc_a - res.auc_b,
                            np.random.default_rng(999))
    assert np.sign(res.z) == np.sign(res.auc_a - res.auc_b)
    assert abs(res.p_value - p_perm) <= 0.05


# ---------------------------------------------------------------------------
# serialization


def test_report_text_and_csv_round_trip_values():
    preds = _preds([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    report = evaluate(preds)
    text = evaluation.report_text(report)
    assert "auc=1.0" in text
    csv_text = evaluation.predictions_csv(preds)
    lines = csv_text.strip().split("\n")
    assert lines[0] == "patient_id,label,probability"
    assert lines[1] == "p0,1,0.9"


def test_predictions_csv_na_labels():
    preds = [PatientPrediction("p0", 0.5, None)]
    assert "p0,NA,0.5" in evaluation.predictions_csv(preds)
