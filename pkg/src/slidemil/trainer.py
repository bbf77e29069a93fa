"""Adam training loop over bags with tile subsampling and seeded shuffling.

Determinism contract: given the same (config, dataset order) and a single
worker, the parameter trajectory is bitwise reproducible.  Tile subsets
are drawn once per run at load time, epoch order comes from a dedicated
seeded stream, and batch gradients are averaged in ascending bag index
order regardless of the visit order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import models
from .bagstore import Bag, Dataset
from .errors import NumericError, ValidationError
from .models import ModelConfig, ModelParams, PreparedBag

DEFAULT_SUBSAMPLE = 8000


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_bags: int = 16
    subsample_tiles: Optional[int] = DEFAULT_SUBSAMPLE
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_bags < 1:
            raise ValidationError("batch_bags must be >= 1")
        if self.subsample_tiles is not None and self.subsample_tiles < 1:
            raise ValidationError("subsample_tiles must be >= 1 or None")
        for beta in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < beta < 1.0:
                raise ValidationError("adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValidationError("adam_eps must be > 0")
        if self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m=models.zeros_like_tensors(params),
                   v=models.zeros_like_tensors(params))


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list[float] = field(default_factory=list)


def subsample(bag: Bag, k: int, rng: np.random.Generator) -> Bag:
    """At most k tiles, drawn uniformly without replacement, original
    relative order preserved.  Bags already small enough pass through."""
    if k < 1:
        raise ValidationError("subsample size must be >= 1")
    if bag.n_tiles <= k:
        return bag
    idx = np.sort(rng.choice(bag.n_tiles, size=k, replace=False))
    return Bag(
        slide_id=bag.slide_id,
        patient_id=bag.patient_id,
        center_id=bag.center_id,
        label=bag.label,
        features=bag.features[idx],
        coords=None if bag.coords is None else bag.coords[idx],
    )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    tensors = params.tensors()
    if set(grads) != set(tensors):
        raise ValidationError("gradient keys do not match parameter tensors")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


def _prepare_training_bags(
    model_config: ModelConfig, dataset: Dataset, config: TrainConfig
) -> list[PreparedBag]:
    rng_sub = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    prepared = []
    for bag in dataset.bags:
        if bag.label is None:
            raise ValidationError(f"unlabeled bag {bag.slide_id!r} in training set")
        if config.subsample_tiles is not None:
            bag = subsample(bag, config.subsample_tiles, rng_sub)
        if model_config.kind == "chowder" and bag.n_tiles < 2 * model_config.r:
            raise ValidationError(
                f"bag {bag.slide_id!r}: N={bag.n_tiles} < 2r={2 * model_config.r} "
                "after subsampling"
            )
        prepared.append(models.prepare(bag))
    return prepared


def train(
    model_config: ModelConfig,
    dataset: Dataset,
    config: TrainConfig,
    init: Optional[ModelParams] = None,
) -> TrainResult:
    """Train one model on all labeled bags of the dataset.

    The returned loss trace holds one mean per-bag training loss per epoch
    (informational; no monotonicity is implied).
    """
    config.validate()
    model_config.validate()
    if not dataset.bags:
        raise ValidationError("empty training dataset")
    prepared = _prepare_training_bags(model_config, dataset, config)
    d = prepared[0].dim

    rng_init = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    params = init.copy() if init is not None else models.init_params(model_config, d, rng_init)
    state = AdamState.for_params(params)
    rng_order = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))

    n = len(prepared)
    trace: list[float] = []
    for epoch in range(config.epochs):
        visit = rng_order.permutation(n)
        epoch_sum = 0.0
        for start in range(0, n, config.batch_bags):
            batch = np.sort(visit[start:start + config.batch_bags])
            grad_sum = models.zeros_like_tensors(params)
            batch_loss = 0.0
            for idx in batch:
                pb = prepared[idx]
                value, grads = models.loss_and_gradient(params, pb, pb.label)
                batch_loss += value
                for name in grad_sum:
                    grad_sum[name] += grads[name]
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch starting at {start}"
                )
            scale = 1.0 / len(batch)
            for name in grad_sum:
                grad_sum[name] *= scale
            adam_step(params, grad_sum, state, config)
            epoch_sum += batch_loss
        trace.append(epoch_sum / n)
    return TrainResult(params=params, loss_trace=trace)


def mean_dataset_loss(params: ModelParams, dataset: Dataset) -> float:
    """Mean per-bag loss at fixed parameters over all labeled bags."""
    values = []
    for bag in dataset.bags:
        if bag.label is None:
            raise ValidationError(f"unlabeled bag {bag.slide_id!r}")
        values.append(models.bag_loss(params, models.prepare(bag), bag.label))
    if not values:
        raise ValidationError("no labeled bags")
    return float(np.mean(values))


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts, for per-fold derivation."""
    ss = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def loss_trace_csv(trace: list[float]) -> str:
    lines = ["epoch,mean_train_loss"]
    lines += [f"{i + 1},{value!r}" for i, value in enumerate(trace)]
    return "\n".join(lines) + "\n"


def replace_epochs(config: TrainConfig, epochs: int) -> TrainConfig:
    return replace(config, epochs=epochs)
