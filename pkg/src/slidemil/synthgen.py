"""Planted-signal synthetic datasets: the desk-scale stand-in for real
slide cohorts.

Tiles are Gaussian feature vectors.  Positive bags carry a known fraction
of witness tiles shifted by a fixed amount on the leading signal
dimensions; every other tile is pure noise.  Optional per-center offsets
live in the non-signal subspace so they perturb nuisance dimensions only.
Generation is deterministic per seed and per bag, so output does not
depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .bagstore import Bag, Dataset
from .errors import ValidationError

IntOrRange = Union[int, tuple[int, int]]


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 100
    slides_per_patient: IntOrRange = 1
    tiles_per_slide: IntOrRange = 150
    d: int = 32
    witness_rate: float = 0.2
    signal_shift: float = 2.0
    signal_dims: int = 4
    positive_fraction: float = 0.5
    n_centers: int = 1
    center_shift: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        lo_slides, hi_slides = _as_range(self.slides_per_patient, "slides_per_patient")
        lo_tiles, _ = _as_range(self.tiles_per_slide, "tiles_per_slide")
        if self.n_patients < 1 or lo_slides < 1 or lo_tiles < 1:
            raise ValidationError("all counts must be >= 1")
        if self.d < 1 or self.n_centers < 1:
            raise ValidationError("d and n_centers must be >= 1")
        if not 0.0 < self.witness_rate <= 1.0:
            raise ValidationError("witness_rate must lie in (0, 1]")
        if not 0 < self.signal_dims <= self.d:
            raise ValidationError("signal_dims must lie in [1, d]")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValidationError("positive_fraction must lie in (0, 1)")
        if self.center_shift < 0:
            raise ValidationError("center_shift must be >= 0")
        if self.witness_rate * lo_tiles < 1.0:
            raise ValidationError(
                "infeasible: witness_rate * min(tiles_per_slide) < 1"
            )
        if self.center_shift > 0 and self.signal_dims == self.d:
            raise ValidationError(
                "infeasible: center offsets need at least one non-signal dimension"
            )
        n_pos = round(self.positive_fraction * self.n_patients)
        if not 1 <= n_pos <= self.n_patients - 1:
            raise ValidationError("positive_fraction leaves a class empty")


def _as_range(value: IntOrRange, name: str) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    lo, hi = int(value[0]), int(value[1])
    if lo > hi:
        raise ValidationError(f"{name}: empty range ({lo}, {hi})")
    return lo, hi


def _draw(rng: np.random.Generator, value: IntOrRange) -> int:
    lo, hi = value if isinstance(value, tuple) else (value, value)
    if lo == hi:
        return int(lo)
    return int(rng.integers(lo, hi + 1))


def generate(config: SynthConfig) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Dataset plus the ground-truth witness mask per slide.

    Positive bags contain exactly ceil(witness_rate * N) witness tiles,
    shifted by signal_shift on the first signal_dims dimensions; negative
    bags contain none.
    """
    config.validate()
    master = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))

    n = config.n_patients
    n_pos = round(config.positive_fraction * n)
    label_order = master.permutation(n)
    labels = np.zeros(n, dtype=np.int64)
    labels[label_order[:n_pos]] = 1

    # balanced center assignment: shuffled patients dealt round-robin
    center_of = np.empty(n, dtype=np.int64)
    for slot, pidx in enumerate(master.permutation(n)):
        center_of[pidx] = slot % config.n_centers

    offsets = np.zeros((config.n_centers, config.d))
    if config.center_shift > 0:
        free = config.d - config.signal_dims
        for c in range(config.n_centers):
            direction = master.standard_normal(free)
            norm = float(np.linalg.norm(direction))
            if norm == 0.0:
                direction[0] = 1.0
                norm = 1.0
            offsets[c, config.signal_dims:] = config.center_shift * direction / norm

    slides_per = [
        _draw(master, config.slides_per_patient) for _ in range(n)
    ]

    bags: list[Bag] = []
    witness: dict[str, np.ndarray] = {}
    bag_index = 0
    for pidx in range(n):
        pid = f"P{pidx + 1:04d}"
        center = int(center_of[pidx])
        label = int(labels[pidx])
        for s in range(slides_per[pidx]):
            slide_id = f"{pid}-S{s + 1}"
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, 1, bag_index))
            )
            n_tiles = _draw(rng, config.tiles_per_slide)
            x = rng.standard_normal((n_tiles, config.d))
            mask = np.zeros(n_tiles, dtype=bool)
            if label == 1:
                n_wit = math.ceil(config.witness_rate * n_tiles)
                chosen = np.sort(rng.choice(n_tiles, size=n_wit, replace=False))
                mask[chosen] = True
                x[chosen, : config.signal_dims] += config.signal_shift
            x += offsets[center]
            bags.append(
                Bag(
                    slide_id=slide_id,
                    patient_id=pid,
                    center_id=f"C{center + 1:02d}",
                    label=label,
                    features=x.astype(np.float32),
                )
            )
            witness[slide_id] = mask
            bag_index += 1
    dataset = Dataset(bags=bags, name=f"synth-{config.seed}")
    dataset.validate()
    return dataset, witness


def witness_csv(witness: dict[str, np.ndarray], slide_order) -> str:
    """Sidecar CSV `slide_id,tile_index,is_witness`, one row per tile."""
    lines = ["slide_id,tile_index,is_witness"]
    for slide_id in slide_order:
        mask = witness[slide_id]
        for i, flag in enumerate(mask):
            lines.append(f"{slide_id},{i},{int(flag)}")
    return "\n".join(lines) + "\n"


def shuffled_label_dataset(dataset: Dataset, seed: int) -> Dataset:
    """Same bags with patient labels permuted at the patient level; the
    null-control construction for calibration checks."""
    patients = sorted(dataset.labeled_patients())
    labels = [dataset.labeled_patients()[p] for p in patients]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9)))
    permuted = [labels[i] for i in rng.permutation(len(labels))]
    new_label = dict(zip(patients, permuted))
    bags = [
        Bag(
            slide_id=b.slide_id,
            patient_id=b.patient_id,
            center_id=b.center_id,
            label=new_label.get(b.patient_id, b.label),
            features=b.features,
            coords=b.coords,
        )
        for b in dataset.bags
    ]
    return Dataset(bags=bags, name=f"{dataset.name}-shuffled")
