"""Split generation, hyperparameter grid search, and cross-validation.

Splits operate on patients, never slides, so one patient's slides can
never leak across a fold boundary.  Two split modes are provided:
label-stratified k-fold (repeated with fresh seeded shuffles) and
center-grouped k-fold where whole centers are greedily balanced across
folds.  All randomness is derived from the caller's seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import evaluation, models, trainer
from .bagstore import Dataset
from .errors import ValidationError
from .models import ModelConfig, ModelParams
from .trainer import TrainConfig


@dataclass(frozen=True)
class SplitPlan:
    repeat_index: int
    fold_index: int
    train_patients: tuple[str, ...]
    test_patients: tuple[str, ...]
    degenerate: bool = False   # training side lacks one of the classes


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter grid for one model kind.

    Only the list matching the kind is consulted: r for chowder, n_hidden
    for deepmil, l2_c for meanpool.  Epoch counts are part of the grid.
    """

    kind: str
    r_values: tuple[int, ...] = (10, 25, 100)
    n_hidden_values: tuple[int, ...] = (64, 128, 256)
    l2_values: tuple[float, ...] = (0.0, 0.5, 1.0)
    epoch_values: tuple[int, ...] = (5, 30, 120)

    def capacity_values(self) -> tuple:
        if self.kind == "chowder":
            return self.r_values
        if self.kind == "deepmil":
            return self.n_hidden_values
        if self.kind == "meanpool":
            return self.l2_values
        raise ValidationError(f"unknown model kind {self.kind!r}")

    def validate(self) -> None:
        if not self.capacity_values():
            raise ValidationError(f"empty hyperparameter list for {self.kind!r}")
        if not self.epoch_values:
            raise ValidationError("empty epoch list")
        for e in self.epoch_values:
            if not 5 <= e <= 120:
                raise ValidationError(f"grid epochs must lie in [5, 120], got {e}")

    def points(self) -> list[tuple[ModelConfig, int]]:
        """All (model config, epochs) pairs, in deterministic grid order."""
        self.validate()
        out = []
        for value in self.capacity_values():
            if self.kind == "chowder":
                cfg = ModelConfig(kind="chowder", r=int(value))
            elif self.kind == "deepmil":
                cfg = ModelConfig(kind="deepmil", n_hidden=int(value))
            else:
                cfg = ModelConfig(kind="meanpool", l2_c=float(value))
            for epochs in self.epoch_values:
                out.append((cfg, int(epochs)))
        return out


@dataclass
class GridPointResult:
    config: ModelConfig
    epochs: int
    val_auc: Optional[float]


@dataclass
class GridSearchResult:
    best_config: ModelConfig
    best_epochs: int
    log: list[GridPointResult] = field(default_factory=list)


@dataclass
class FoldResult:
    repeat_index: int
    fold_index: int
    auc: float                 # nan when degenerate
    degenerate: bool
    params: Optional[ModelParams] = None


@dataclass
class CVSummary:
    folds: list[FoldResult]
    mean_auc: float
    sd_auc: float

    def valid_aucs(self) -> list[float]:
        return [f.auc for f in self.folds if not f.degenerate]


# ---------------------------------------------------------------------------
# split generation


def _class_patients(dataset: Dataset) -> tuple[list[str], list[str]]:
    labeled = dataset.labeled_patients()
    pos = [p for p, y in labeled.items() if y == 1]
    neg = [p for p, y in labeled.items() if y == 0]
    return pos, neg


def make_stratified_folds(
    dataset: Dataset, k: int, repeats: int, seed: int
) -> list[SplitPlan]:
    """k*repeats plans; test sets partition the labeled patients within
    each repeat, with per-fold positive counts within one of an even deal."""
    if k < 2:
        raise ValidationError("k must be >= 2")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    pos, neg = _class_patients(dataset)
    if len(pos) < k or len(neg) < k:
        raise ValidationError(
            f"need at least k={k} labeled patients per class, "
            f"got {len(pos)} positive / {len(neg)} negative"
        )
    all_patients = set(pos) | set(neg)
    plans = []
    for rep in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence((seed, rep, 101)))
        folds: list[list[str]] = [[] for _ in range(k)]
        for group in (pos, neg):
            order = rng.permutation(len(group))
            for slot, idx in enumerate(order):
                folds[slot % k].append(group[idx])
        for fold_index, test in enumerate(folds):
            test_set = set(test)
            train = tuple(sorted(all_patients - test_set))
            plans.append(
                SplitPlan(
                    repeat_index=rep,
                    fold_index=fold_index,
                    train_patients=train,
                    test_patients=tuple(sorted(test_set)),
                )
            )
    return plans


def make_center_folds(
    dataset: Dataset, k: int, repeats: int, seed: int
) -> list[SplitPlan]:
    """Whole centers per fold, greedily balanced on patient counts:
    largest center first into the currently smallest fold, ties by a
    seeded draw.  Plans whose training side is single-class are flagged
    degenerate rather than dropped."""
    if k < 2:
        raise ValidationError("k must be >= 2")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    labeled = dataset.labeled_patients()
    if not labeled:
        raise ValidationError("no labeled patients")
    center_patients: dict[str, list[str]] = {}
    for pid in labeled:
        center_patients.setdefault(dataset.patient_center(pid), []).append(pid)
    if len(center_patients) < k:
        raise ValidationError(
            f"fewer centers ({len(center_patients)}) than folds ({k})"
        )
    centers = sorted(center_patients)
    plans = []
    for rep in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence((seed, rep, 202)))
        # seeded shuffle then stable sort by size: ties land in random order
        shuffled = [centers[i] for i in rng.permutation(len(centers))]
        by_size = sorted(shuffled, key=lambda c: -len(center_patients[c]))
        fold_patients: list[list[str]] = [[] for _ in range(k)]
        for center in by_size:
            loads = np.array([len(f) for f in fold_patients])
            smallest = np.flatnonzero(loads == loads.min())
            target = int(smallest[rng.integers(len(smallest))])
            fold_patients[target].extend(center_patients[center])
        for fold_index, test in enumerate(fold_patients):
            test_set = set(test)
            train = sorted(set(labeled) - test_set)
            train_labels = {labeled[p] for p in train}
            plans.append(
                SplitPlan(
                    repeat_index=rep,
                    fold_index=fold_index,
                    train_patients=tuple(train),
                    test_patients=tuple(sorted(test_set)),
                    degenerate=train_labels != {0, 1},
                )
            )
    return plans


def check_no_leakage(plans: Sequence[SplitPlan], dataset: Dataset,
                     grouped_by_center: bool = False) -> None:
    """Raise if any patient (or center, in grouped mode) sits on both
    sides of any plan; cheap enough to run on every generated plan."""
    for plan in plans:
        overlap = set(plan.train_patients) & set(plan.test_patients)
        if overlap:
            raise ValidationError(f"patients on both sides: {sorted(overlap)[:5]}")
        if grouped_by_center:
            train_centers = {dataset.patient_center(p) for p in plan.train_patients}
            test_centers = {dataset.patient_center(p) for p in plan.test_patients}
            both = train_centers & test_centers
            if both:
                raise ValidationError(f"centers on both sides: {sorted(both)[:5]}")


def plans_to_json(plans: Sequence[SplitPlan]) -> str:
    payload = [
        {
            "repeat": p.repeat_index,
            "fold": p.fold_index,
            "train_patients": list(p.train_patients),
            "test_patients": list(p.test_patients),
            "degenerate": p.degenerate,
        }
        for p in plans
    ]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# grid search


def stratified_holdout(
    dataset: Dataset, fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """(train_patients, val_patients), stratified on the patient label."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError("holdout fraction must lie in (0, 1)")
    pos, neg = _class_patients(dataset)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 303)))
    train: list[str] = []
    val: list[str] = []
    for group in (pos, neg):
        if len(group) < 2:
            raise ValidationError(
                "inner holdout impossible: a class has fewer than 2 patients"
            )
        n_val = max(1, round(fraction * len(group)))
        if n_val >= len(group):
            n_val = len(group) - 1
        order = rng.permutation(len(group))
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return sorted(train), sorted(val)


def grid_search(
    dataset: Dataset,
    grid: GridSpec,
    train_config: TrainConfig,
    val_fraction: float = 0.2,
) -> GridSearchResult:
    """Pick the grid point with the best holdout AUC on a stratified
    80/20 split of the given (training) patients.

    Ties prefer fewer epochs, then the smaller capacity value.  A
    singleton grid short-circuits without training anything.
    """
    points = grid.points()
    if len(points) == 1:
        cfg, epochs = points[0]
        return GridSearchResult(best_config=cfg, best_epochs=epochs,
                                log=[GridPointResult(cfg, epochs, None)])
    train_pats, val_pats = stratified_holdout(dataset, val_fraction, train_config.seed)
    inner_train = dataset.subset(train_pats, name=f"{dataset.name}-gridtrain")
    inner_val = dataset.subset(val_pats, name=f"{dataset.name}-gridval")

    log: list[GridPointResult] = []
    best = None
    for cfg, epochs in points:
        result = trainer.train(cfg, inner_train,
                               replace(train_config, epochs=epochs))
        slide_probs = models.predict_slides(result.params, inner_val.bags)
        patients = evaluation.aggregate_patients(slide_probs, inner_val)
        val_auc = evaluation.auc(patients)
        log.append(GridPointResult(cfg, epochs, val_auc))
        key = (-val_auc, epochs, cfg.capacity())
        if best is None or key < best[0]:
            best = (key, cfg, epochs)
    return GridSearchResult(best_config=best[1], best_epochs=best[2], log=log)


def grid_log_csv(result: GridSearchResult) -> str:
    lines = ["point,val_auc"]
    for entry in result.log:
        cfg = entry.config
        if cfg.kind == "chowder":
            point = f"r={cfg.r} epochs={entry.epochs}"
        elif cfg.kind == "deepmil":
            point = f"n_hidden={cfg.n_hidden} epochs={entry.epochs}"
        else:
            point = f"l2_c={cfg.l2_c} epochs={entry.epochs}"
        val = "NA" if entry.val_auc is None else repr(entry.val_auc)
        lines.append(f"{point},{val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cross-validation


def run_fold(
    model_config: ModelConfig,
    dataset: Dataset,
    plan: SplitPlan,
    train_config: TrainConfig,
) -> FoldResult:
    """Train on the plan's training patients, score its test patients.

    Returns a degenerate result (nan AUC, no params) when the plan is
    flagged degenerate or the test side ends up single-class.
    """
    if plan.degenerate:
        return FoldResult(plan.repeat_index, plan.fold_index, float("nan"),
                          degenerate=True)
    fold_seed = trainer.derive_seed(train_config.seed, plan.repeat_index,
                                    plan.fold_index)
    fold_config = replace(train_config, seed=fold_seed)
    train_ds = dataset.subset(plan.train_patients)
    test_ds = dataset.subset(plan.test_patients)
    result = trainer.train(model_config, train_ds, fold_config)
    slide_probs = models.predict_slides(result.params, test_ds.bags)
    patients = evaluation.aggregate_patients(slide_probs, test_ds)
    labels = {p.label for p in patients}
    if labels != {0, 1}:
        return FoldResult(plan.repeat_index, plan.fold_index, float("nan"),
                          degenerate=True, params=result.params)
    fold_auc = evaluation.auc(patients)
    return FoldResult(plan.repeat_index, plan.fold_index, fold_auc,
                      degenerate=False, params=result.params)


def summarize_folds(folds: Sequence[FoldResult]) -> CVSummary:
    """Mean and population SD over non-degenerate fold AUCs."""
    folds = sorted(folds, key=lambda f: (f.repeat_index, f.fold_index))
    valid = [f.auc for f in folds if not f.degenerate]
    if not valid:
        raise ValidationError("all folds degenerate; nothing to summarize")
    arr = np.asarray(valid, dtype=np.float64)
    return CVSummary(folds=list(folds), mean_auc=float(arr.mean()),
                     sd_auc=float(arr.std(ddof=0)))


def cross_validate(
    model_config: ModelConfig,
    dataset: Dataset,
    plans: Sequence[SplitPlan],
    train_config: TrainConfig,
) -> CVSummary:
    """One trained model per plan; per-fold patient-level AUC plus the
    mean/SD summary.  Degenerate folds are excluded from the summary with
    a warning, never silently dropped."""
    if not plans:
        raise ValidationError("no split plans given")
    results = [run_fold(model_config, dataset, plan, train_config) for plan in plans]
    n_degenerate = sum(1 for r in results if r.degenerate)
    if n_degenerate:
        warnings.warn(
            f"{n_degenerate} of {len(results)} folds degenerate "
            "(single-class side); excluded from mean/SD",
            stacklevel=2,
        )
    return summarize_folds(results)


def folds_csv(summary: CVSummary) -> str:
    lines = ["repeat,fold,auc"]
    for f in summary.folds:
        value = "NA" if f.degenerate else repr(f.auc)
        lines.append(f"{f.repeat_index},{f.fold_index},{value}")
    return "\n".join(lines) + "\n"


def summary_text(summary: CVSummary) -> str:
    valid = summary.valid_aucs()
    lines = [
        f"folds={len(summary.folds)}",
        f"folds_used={len(valid)}",
        f"mean_auc={summary.mean_auc!r}",
        f"sd_auc={summary.sd_auc!r}",
    ]
    return "\n".join(lines) + "\n"
