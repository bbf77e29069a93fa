"""Tile-feature bags, their on-disk format, and dataset manifests.

A bag is one slide's tile-feature matrix plus identifying metadata.  Bags
are stored in a little-endian binary container:

    magic   4 bytes  b"MILF"
    version u32      1
    N       u64      number of tiles
    D       u32      feature dimension
    flags   u32      bit0: tile coordinates present
    coords  N x 2 f32, row-major   (only when bit0 set)
    feats   N x D f32, row-major

No padding anywhere.  Feature scalars are 32-bit on disk; numeric code
upcasts to float64 before accumulating.

A dataset is described by a UTF-8 CSV manifest with header
``slide_id,patient_id,center_id,label,features_path`` where label is
``0``, ``1`` or ``NA``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

MAGIC = b"MILF"
FORMAT_VERSION = 1

MANIFEST_COLUMNS = ("slide_id", "patient_id", "center_id", "label", "features_path")

_HEADER = struct.Struct("<4sIQII")


@dataclass
class Bag:
    """One slide: N tile-feature rows with optional tile-center coordinates.

    Immutable by convention once loaded; nothing in this package mutates a
    bag in place, so bags may be shared freely across threads.
    """

    slide_id: str
    patient_id: str
    center_id: str
    label: Optional[int]
    features: np.ndarray
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.coords is not None:
            self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise ValidationError(f"bag {self.slide_id!r}: features must be 2-D")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValidationError(f"bag {self.slide_id!r}: need N >= 1 and D >= 1, got {n}x{d}")
        if not np.isfinite(self.features).all():
            raise ValidationError(f"bag {self.slide_id!r}: features contain NaN or Inf")
        if self.coords is not None:
            if self.coords.shape != (n, 2):
                raise ValidationError(
                    f"bag {self.slide_id!r}: coords shape {self.coords.shape} != ({n}, 2)"
                )
            if not np.isfinite(self.coords).all():
                raise ValidationError(f"bag {self.slide_id!r}: coords contain NaN or Inf")
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError(f"bag {self.slide_id!r}: label must be 0, 1 or None")


@dataclass
class Dataset:
    """An ordered collection of bags; the unit of splitting is the patient."""

    bags: list[Bag]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.bags)

    def validate(self) -> None:
        seen: set[str] = set()
        patient_labels: dict[str, int] = {}
        for bag in self.bags:
            bag.validate()
            if bag.slide_id in seen:
                raise ValidationError(f"duplicate slide_id {bag.slide_id!r}")
            seen.add(bag.slide_id)
            if bag.label is not None:
                prev = patient_labels.get(bag.patient_id)
                if prev is not None and prev != bag.label:
                    raise ValidationError(
                        f"patient {bag.patient_id!r} carries conflicting labels "
                        f"{prev} and {bag.label}"
                    )
                patient_labels[bag.patient_id] = bag.label

    def patients(self) -> dict[str, list[int]]:
        """Patient id -> indices of that patient's bags, in dataset order."""
        out: dict[str, list[int]] = {}
        for i, bag in enumerate(self.bags):
            out.setdefault(bag.patient_id, []).append(i)
        return out

    def patient_label(self, patient_id: str) -> Optional[int]:
        for i in self.patients()[patient_id]:
            if self.bags[i].label is not None:
                return self.bags[i].label
        return None

    def labeled_patients(self) -> dict[str, int]:
        """Patient id -> label, for patients with at least one labeled slide."""
        out: dict[str, int] = {}
        for bag in self.bags:
            if bag.label is not None and bag.patient_id not in out:
                out[bag.patient_id] = bag.label
        return out

    def patient_center(self, patient_id: str) -> str:
        return self.bags[self.patients()[patient_id][0]].center_id

    def subset(self, patient_ids, name: Optional[str] = None) -> "Dataset":
        """New dataset restricted to the given patients, order preserved."""
        keep = set(patient_ids)
        return Dataset(
            bags=[b for b in self.bags if b.patient_id in keep],
            name=name or self.name,
        )


def write_bag(bag: Bag, path) -> None:
    """Serialize a bag; fails on any invariant violation before writing."""
    bag.validate()
    n, d = bag.features.shape
    flags = 1 if bag.coords is not None else 0
    payload = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, n, d, flags))
    if bag.coords is not None:
        payload += bag.coords.astype("<f4", copy=False).tobytes(order="C")
    payload += bag.features.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(payload))


def read_bag(
    path,
    slide_id: str = "",
    patient_id: str = "",
    center_id: str = "",
    label: Optional[int] = None,
) -> Bag:
    """Read a bag file, checking magic, version, declared sizes and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptionError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, version, n, d, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if flags & ~1:
        raise FormatError(f"{path}: unknown flag bits 0x{flags:x}")
    if n < 1 or d < 1:
        raise ValidationError(f"{path}: declares empty bag N={n} D={d}")
    offset = _HEADER.size
    expected = offset + (8 * n if flags & 1 else 0) + 4 * n * d
    if len(raw) < expected:
        raise CorruptionError(
            f"{path}: truncated, declares {n} tiles x {d} dims "
            f"({expected} bytes) but holds {len(raw)}"
        )
    if len(raw) > expected:
        raise CorruptionError(f"{path}: {len(raw) - expected} trailing bytes")
    coords = None
    if flags & 1:
        coords = np.frombuffer(raw, dtype="<f4", count=2 * n, offset=offset).reshape(n, 2)
        offset += 8 * n
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    bag = Bag(
        slide_id=slide_id or Path(path).stem,
        patient_id=patient_id,
        center_id=center_id,
        label=label,
        features=features.copy(),
        coords=None if coords is None else coords.copy(),
    )
    bag.validate()
    return bag


def _parse_label(text: str, context: str) -> Optional[int]:
    text = text.strip()
    if text == "NA":
        return None
    if text in ("0", "1"):
        return int(text)
    raise ValidationError(f"{context}: label must be 0, 1 or NA, got {text!r}")


def load_dataset(manifest_path, name: Optional[str] = None) -> Dataset:
    """Build a dataset from a manifest CSV, one bag per row, row order kept.

    Labels may be NA; training rejects unlabeled bags later, prediction
    accepts them.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{manifest_path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ValidationError(
                f"{manifest_path}: bad header {header!r}, "
                f"expected {','.join(MANIFEST_COLUMNS)}"
            )
        bags: list[Bag] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValidationError(f"{manifest_path}:{lineno}: expected 5 fields")
            slide_id, patient_id, center_id, label_text, feat_path = (f.strip() for f in row)
            label = _parse_label(label_text, f"{manifest_path}:{lineno}")
            path = Path(feat_path)
            if not path.is_absolute():
                path = manifest_path.parent / path
            if not path.exists():
                raise FileNotFoundError(f"{manifest_path}:{lineno}: missing feature file {path}")
            bags.append(
                read_bag(path, slide_id=slide_id, patient_id=patient_id,
                         center_id=center_id, label=label)
            )
    dataset = Dataset(bags=bags, name=name or manifest_path.stem)
    dataset.validate()
    return dataset


def write_dataset(dataset: Dataset, out_dir, bag_subdir: str = "bags") -> Path:
    """Write every bag plus a manifest under out_dir; returns manifest path."""
    out_dir = Path(out_dir)
    bag_dir = out_dir / bag_subdir
    bag_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for bag in dataset.bags:
        rel = f"{bag_subdir}/{bag.slide_id}.milf"
        write_bag(bag, out_dir / rel)
        label = "NA" if bag.label is None else str(bag.label)
        rows.append((bag.slide_id, bag.patient_id, bag.center_id, label, rel))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest
