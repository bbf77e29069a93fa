"""Forward pass, loss, and exact analytic gradients for the MIL models.

Three architectures over one bag of tile features X (N x D):

* meanpool: logistic regression on the tile-average feature vector,
  optionally L2-penalized.
* chowder: a shared per-tile scorer (D -> 128 sigmoid -> 1 linear), the
  r top and r bottom scores concatenated into an MLP head
  (2r -> 128 -> 64 -> 1, sigmoid hidden activations, linear logit).
* deepmil: linear embedding (D -> Nh) followed by gated attention
  (tanh/logistic gates of width Nh), attention-weighted pooling and a
  linear head.

All cross-tile reductions run over a canonical tile order (a total order
on row bit patterns), which makes the logit exactly invariant under any
permutation of the input rows; per-tile outputs are mapped back to the
caller's order.  Compute is float64 regardless of storage dtype.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from .bagstore import Bag
from .errors import CorruptionError, FormatError, ValidationError

MODEL_KINDS = ("meanpool", "chowder", "deepmil")

SCORER_HIDDEN = 128        # chowder per-tile scorer hidden width
AGG_HIDDEN = (128, 64)     # chowder aggregator hidden widths

CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Model kind plus the hyperparameter relevant to that kind."""

    kind: str
    r: int = 10            # chowder: extreme tiles kept per side
    n_hidden: int = 128    # deepmil: embedding/attention width
    l2_c: float = 0.0      # meanpool: penalty coefficient on ||w||^2

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")
        if self.r < 1:
            raise ValidationError("r must be >= 1")
        if self.n_hidden < 1:
            raise ValidationError("n_hidden must be >= 1")
        if not (np.isfinite(self.l2_c) and self.l2_c >= 0):
            raise ValidationError("l2_c must be finite and >= 0")

    def capacity(self) -> float:
        """The kind's tuned capacity value; used for grid tie-breaking."""
        if self.kind == "chowder":
            return self.r
        if self.kind == "deepmil":
            return self.n_hidden
        return self.l2_c


@dataclass
class Prediction:
    probability: float
    logit: float
    tile_scores: Optional[np.ndarray] = None


@dataclass
class PreparedBag:
    """Float64 features in canonical tile order plus the order mapping.

    ``order[j]`` is the original index of canonical row j.  Preparing once
    and reusing amortizes the canonicalization sort across a training run.
    """

    x: np.ndarray          # (N, D) float64, canonical order
    order: np.ndarray      # (N,) int64
    label: Optional[int] = None

    @property
    def n_tiles(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def to_original(self, canonical_values: np.ndarray) -> np.ndarray:
        out = np.empty_like(canonical_values)
        out[self.order] = canonical_values
        return out


def _canonical_order(x: np.ndarray) -> np.ndarray:
    # Total order on float64 bit patterns (distinguishes -0.0 from 0.0),
    # so equal keys imply bit-identical rows and any permutation of the
    # same rows canonicalizes to the same matrix.
    bits = np.ascontiguousarray(x).view(np.uint64)
    keys = np.where(bits >> np.uint64(63), ~bits, bits | np.uint64(1 << 63))
    return np.lexsort(keys.T[::-1])


def prepare(bag: Union[Bag, np.ndarray], label: Optional[int] = None) -> PreparedBag:
    if isinstance(bag, Bag):
        features, label = bag.features, bag.label if label is None else label
    else:
        features = bag
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("features must be a 2-D matrix")
    order = _canonical_order(x)
    return PreparedBag(x=x[order], order=order, label=label)


def _check_dim(params, pb: PreparedBag) -> None:
    if pb.dim != params.d:
        raise ValidationError(
            f"feature dimension mismatch: model D={params.d}, data D={pb.dim}"
        )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MeanPoolParams:
    kind = "meanpool"
    w: np.ndarray
    b: np.ndarray    # (1,)
    l2_c: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def bias(self) -> float:
        return float(self.b[0])

    def config(self) -> ModelConfig:
        return ModelConfig(kind="meanpool", l2_c=self.l2_c)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def copy(self) -> "MeanPoolParams":
        return MeanPoolParams(w=self.w.copy(), b=self.b.copy(), l2_c=self.l2_c)


@dataclass
class ChowderParams:
    kind = "chowder"
    w1: np.ndarray   # (128, D)
    b1: np.ndarray   # (128,)
    w2: np.ndarray   # (128,)
    b2: np.ndarray   # (1,)
    a1: np.ndarray   # (128, 2r)
    c1: np.ndarray   # (128,)
    a2: np.ndarray   # (64, 128)
    c2: np.ndarray   # (64,)
    w3: np.ndarray   # (64,)
    b3: np.ndarray   # (1,)
    r: int = 10

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    def config(self) -> ModelConfig:
        return ModelConfig(kind="chowder", r=self.r)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "a1": self.a1, "c1": self.c1, "a2": self.a2, "c2": self.c2,
            "w3": self.w3, "b3": self.b3,
        }

    def copy(self) -> "ChowderParams":
        return ChowderParams(
            **{k: v.copy() for k, v in self.tensors().items()}, r=self.r
        )


@dataclass
class DeepMILParams:
    kind = "deepmil"
    we: np.ndarray   # (Nh, D)
    be: np.ndarray   # (Nh,)
    v: np.ndarray    # (Nh, Nh) tanh gate
    u: np.ndarray    # (Nh, Nh) logistic gate
    wa: np.ndarray   # (Nh,)   gate combination
    wh: np.ndarray   # (Nh,)   head
    bh: np.ndarray   # (1,)
    n_hidden: int = 128

    @property
    def d(self) -> int:
        return self.we.shape[1]

    def config(self) -> ModelConfig:
        return ModelConfig(kind="deepmil", n_hidden=self.n_hidden)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "we": self.we, "be": self.be, "v": self.v, "u": self.u,
            "wa": self.wa, "wh": self.wh, "bh": self.bh,
        }

    def copy(self) -> "DeepMILParams":
        return DeepMILParams(
            **{k: v.copy() for k, v in self.tensors().items()},
            n_hidden=self.n_hidden,
        )


ModelParams = Union[MeanPoolParams, ChowderParams, DeepMILParams]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, d: int, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters: uniform +-sqrt(1/fan_in) weights, zero biases.

    Draw order follows the tensors() ordering of each class, so identical
    (config, d, generator state) gives identical parameters.
    """
    config.validate()
    if d < 1:
        raise ValidationError("feature dimension must be >= 1")
    if config.kind == "meanpool":
        return MeanPoolParams(w=_uniform(rng, d, d), b=np.zeros(1), l2_c=config.l2_c)
    if config.kind == "chowder":
        h = SCORER_HIDDEN
        g1, g2 = AGG_HIDDEN
        return ChowderParams(
            w1=_uniform(rng, (h, d), d),
            b1=np.zeros(h),
            w2=_uniform(rng, h, h),
            b2=np.zeros(1),
            a1=_uniform(rng, (g1, 2 * config.r), 2 * config.r),
            c1=np.zeros(g1),
            a2=_uniform(rng, (g2, g1), g1),
            c2=np.zeros(g2),
            w3=_uniform(rng, g2, g2),
            b3=np.zeros(1),
            r=config.r,
        )
    nh = config.n_hidden
    return DeepMILParams(
        we=_uniform(rng, (nh, d), d),
        be=np.zeros(nh),
        v=_uniform(rng, (nh, nh), nh),
        u=_uniform(rng, (nh, nh), nh),
        wa=_uniform(rng, nh, nh),
        wh=_uniform(rng, nh, nh),
        bh=np.zeros(1),
        n_hidden=nh,
    )


def zeros_like_tensors(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors().items()}


# ---------------------------------------------------------------------------
# forward passes


def extreme_concat(scores: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the r top (score-descending) then r bottom (ascending)
    tiles; ties always resolved toward the lower tile index.

    Returns (selected_indices, selected_scores), each of length 2r.
    """
    n = scores.shape[0]
    if n < 2 * r:
        raise ValidationError(f"bag too small: N={n} < 2r={2 * r}")
    desc = np.lexsort((np.arange(n), -scores))
    sel = np.concatenate([desc[:r], desc[n - r:][::-1]])
    return sel, scores[sel]


def _tile_scores_chowder(params: ChowderParams, pb: PreparedBag):
    pre = pb.x @ params.w1.T + params.b1
    hidden = expit(pre)
    s_canon = hidden @ params.w2 + params.b2[0]
    return hidden, s_canon, pb.to_original(s_canon)


def _aggregate_chowder(params: ChowderParams, v: np.ndarray):
    h1 = expit(params.a1 @ v + params.c1)
    h2 = expit(params.a2 @ h1 + params.c2)
    logit = float(params.w3 @ h2 + params.b3[0])
    return h1, h2, logit


def meanpool_forward(params: MeanPoolParams, bag: Union[Bag, PreparedBag]) -> Prediction:
    pb = bag if isinstance(bag, PreparedBag) else prepare(bag)
    _check_dim(params, pb)
    mean = pb.x.sum(axis=0) / pb.n_tiles
    logit = float(params.w @ mean + params.bias)
    scores = pb.to_original(pb.x @ params.w + params.bias)
    return Prediction(probability=float(expit(logit)), logit=logit, tile_scores=scores)


def chowder_forward(params: ChowderParams, bag: Union[Bag, PreparedBag]) -> Prediction:
    pb = bag if isinstance(bag, PreparedBag) else prepare(bag)
    _check_dim(params, pb)
    _, _, s = _tile_scores_chowder(params, pb)
    _, extreme = extreme_concat(s, params.r)
    _, _, logit = _aggregate_chowder(params, extreme)
    return Prediction(probability=float(expit(logit)), logit=logit, tile_scores=s)


def deepmil_forward(params: DeepMILParams, bag: Union[Bag, PreparedBag]) -> Prediction:
    pb = bag if isinstance(bag, PreparedBag) else prepare(bag)
    _check_dim(params, pb)
    h = pb.x @ params.we.T + params.be
    gate = np.tanh(h @ params.v.T) * expit(h @ params.u.T)
    g = gate @ params.wa
    e = np.exp(g - g.max())
    attn = e / e.sum()
    z = attn @ h
    logit = float(params.wh @ z + params.bh[0])
    return Prediction(
        probability=float(expit(logit)), logit=logit, tile_scores=pb.to_original(attn)
    )


_FORWARDS = {
    "meanpool": meanpool_forward,
    "chowder": chowder_forward,
    "deepmil": deepmil_forward,
}


def forward(params: ModelParams, bag: Union[Bag, PreparedBag]) -> Prediction:
    return _FORWARDS[params.kind](params, bag)


# ---------------------------------------------------------------------------
# loss and gradients


def _softplus(x: float) -> float:
    return float(np.log1p(np.exp(-abs(x))) + max(x, 0.0))


def bce_from_logit(logit: float, label: int) -> float:
    """Binary cross-entropy against the logit; never materializes log(0)."""
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    return _softplus(logit) - label * logit


def l2_penalty(params: ModelParams) -> float:
    if params.kind == "meanpool":
        return float(params.l2_c * params.w @ params.w)
    return 0.0


def loss(prediction: Prediction, label: int, params: ModelParams) -> float:
    return bce_from_logit(prediction.logit, label) + l2_penalty(params)


def bag_loss(params: ModelParams, pb: PreparedBag, label: int) -> float:
    """Loss only, on an already prepared bag; the cheap path for checks."""
    _check_dim(params, pb)
    if params.kind == "meanpool":
        mean = pb.x.sum(axis=0) / pb.n_tiles
        logit = float(params.w @ mean + params.bias)
    elif params.kind == "chowder":
        _, _, s = _tile_scores_chowder(params, pb)
        _, extreme = extreme_concat(s, params.r)
        _, _, logit = _aggregate_chowder(params, extreme)
    else:
        logit = deepmil_forward(params, pb).logit
    return bce_from_logit(logit, label) + l2_penalty(params)


def loss_and_gradient(
    params: ModelParams, bag: Union[Bag, PreparedBag], label: Optional[int] = None
) -> tuple[float, dict[str, np.ndarray]]:
    """Per-bag loss and its exact gradient for every parameter tensor."""
    pb = bag if isinstance(bag, PreparedBag) else prepare(bag)
    if label is None:
        label = pb.label
    if label not in (0, 1):
        raise ValidationError("labeled bag required for loss/gradient")
    _check_dim(params, pb)
    if params.kind == "meanpool":
        return _meanpool_grad(params, pb, label)
    if params.kind == "chowder":
        return _chowder_grad(params, pb, label)
    return _deepmil_grad(params, pb, label)


def gradient(params: ModelParams, bag: Union[Bag, PreparedBag], label=None):
    return loss_and_gradient(params, bag, label)[1]


def _meanpool_grad(params: MeanPoolParams, pb: PreparedBag, label: int):
    mean = pb.x.sum(axis=0) / pb.n_tiles
    logit = float(params.w @ mean + params.bias)
    dlogit = float(expit(logit)) - label
    grads = {
        "w": dlogit * mean + 2.0 * params.l2_c * params.w,
        "b": np.array([dlogit]),
    }
    value = bce_from_logit(logit, label) + l2_penalty(params)
    return value, grads


def _chowder_grad(params: ChowderParams, pb: PreparedBag, label: int):
    hidden, s_canon, s = _tile_scores_chowder(params, pb)
    sel, extreme = extreme_concat(s, params.r)
    h1, h2, logit = _aggregate_chowder(params, extreme)
    dlogit = float(expit(logit)) - label

    dh2 = dlogit * params.w3
    dz2 = dh2 * h2 * (1.0 - h2)
    dh1 = params.a2.T @ dz2
    dz1 = dh1 * h1 * (1.0 - h1)
    dv = params.a1.T @ dz1

    # gradient reaches the scorer only through the 2r selected tiles
    inv = np.empty(pb.n_tiles, dtype=np.int64)
    inv[pb.order] = np.arange(pb.n_tiles)
    pos = inv[sel]
    h_sel = hidden[pos]
    x_sel = pb.x[pos]
    dh_sel = np.outer(dv, params.w2)
    dpre = dh_sel * h_sel * (1.0 - h_sel)

    grads = {
        "w1": dpre.T @ x_sel,
        "b1": dpre.sum(axis=0),
        "w2": h_sel.T @ dv,
        "b2": np.array([dv.sum()]),
        "a1": np.outer(dz1, extreme),
        "c1": dz1,
        "a2": np.outer(dz2, h1),
        "c2": dz2,
        "w3": dlogit * h2,
        "b3": np.array([dlogit]),
    }
    return bce_from_logit(logit, label), grads


def _deepmil_grad(params: DeepMILParams, pb: PreparedBag, label: int):
    x = pb.x
    h = x @ params.we.T + params.be
    tv = np.tanh(h @ params.v.T)
    sv = expit(h @ params.u.T)
    gate = tv * sv
    g = gate @ params.wa
    e = np.exp(g - g.max())
    attn = e / e.sum()
    z = attn @ h
    logit = float(params.wh @ z + params.bh[0])
    dlogit = float(expit(logit)) - label

    dz = dlogit * params.wh
    da = h @ dz
    dh = np.outer(attn, dz)
    dg = attn * (da - attn @ da)
    dgate = np.outer(dg, params.wa)
    dtv = dgate * sv
    dsv = dgate * tv
    dvpre = dtv * (1.0 - tv * tv)
    dupre = dsv * sv * (1.0 - sv)
    dh += dvpre @ params.v + dupre @ params.u

    grads = {
        "we": dh.T @ x,
        "be": dh.sum(axis=0),
        "v": dvpre.T @ h,
        "u": dupre.T @ h,
        "wa": gate.T @ dg,
        "wh": dlogit * z,
        "bh": np.array([dlogit]),
    }
    return bce_from_logit(logit, label), grads


# ---------------------------------------------------------------------------
# checkpoints


def _meta(params: ModelParams) -> dict:
    cfg = params.config()
    return {
        "kind": cfg.kind,
        "d": params.d,
        "r": cfg.r,
        "n_hidden": cfg.n_hidden,
        "l2_c": cfg.l2_c,
    }


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary container: JSON header + named f64 tensors."""
    tensors = params.tensors()
    header = {
        "model": _meta(params),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(blob))
    out += blob
    for v in tensors.values():
        out += np.ascontiguousarray(v, dtype="<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CorruptionError(f"{path}: shorter than checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        meta = header["model"]
        tensor_meta = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise CorruptionError(f"{path}: bad checkpoint header: {exc}") from None
    offset = 12 + hlen
    tensors: dict[str, np.ndarray] = {}
    for tm in tensor_meta:
        shape = tuple(tm["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if len(raw) < end:
            raise CorruptionError(f"{path}: truncated tensor {tm['name']!r}")
        tensors[tm["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset = end
    if offset != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - offset} trailing bytes")
    return _params_from_tensors(meta, tensors, context=str(path))


def _params_from_tensors(meta: dict, tensors: dict, context: str) -> ModelParams:
    kind = meta.get("kind")
    try:
        if kind == "meanpool":
            return MeanPoolParams(w=tensors["w"], b=tensors["b"],
                                  l2_c=float(meta["l2_c"]))
        if kind == "chowder":
            return ChowderParams(**tensors, r=int(meta["r"]))
        if kind == "deepmil":
            return DeepMILParams(**tensors, n_hidden=int(meta["n_hidden"]))
    except (KeyError, TypeError) as exc:
        raise CorruptionError(f"{context}: incomplete checkpoint: {exc}") from None
    raise FormatError(f"{context}: unknown model kind {kind!r}")


def predict_slides(params: ModelParams, bags) -> dict[str, float]:
    """Slide id -> predicted probability, full tile set, dataset order."""
    out: dict[str, float] = {}
    for bag in bags:
        out[bag.slide_id] = forward(params, bag).probability
    return out
