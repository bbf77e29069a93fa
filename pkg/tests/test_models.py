import math

import numpy as np
import pytest

from slidemil import models
from slidemil.errors import CorruptionError, FormatError, ValidationError
from slidemil.models import (
    ChowderParams,
    MeanPoolParams,
    ModelConfig,
    Prediction,
    extreme_concat,
    forward,
    init_params,
    load_checkpoint,
    loss,
    loss_and_gradient,
    prepare,
    save_checkpoint,
)


def _params(kind, d, seed=0, r=3, n_hidden=6, l2_c=0.0):
    rng = np.random.default_rng(seed)
    p = init_params(ModelConfig(kind=kind, r=r, n_hidden=n_hidden, l2_c=l2_c), d, rng)
    for t in p.tensors().values():
        t += rng.normal(0, 0.2, size=t.shape)
    return p


# ---------------------------------------------------------------------------
# meanpool


def test_meanpool_identical_tiles_exact():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(4)
    x = rng.standard_normal(4)
    params = MeanPoolParams(w=w, b=np.array([0.3]))
    bag = np.tile(x, (9, 1))
    pred = forward(params, prepare(bag))
    assert pred.logit == pytest.approx(float(w @ x) + 0.3, abs=1e-12)


def test_meanpool_zero_weights_gives_half():
    params = MeanPoolParams(w=np.zeros(3), b=np.zeros(1))
    pred = forward(params, prepare(np.random.default_rng(2).standard_normal((11, 3))))
    assert pred.probability == 0.5
    assert pred.logit == 0.0


def test_meanpool_matches_brute_force_summation():
    # independent oracle: plain python loops, fsum accumulation
    rng = np.random.default_rng(1234)
    x = rng.standard_normal((7, 4))
    params = _params("meanpool", 4, seed=5)
    pred = forward(params, prepare(x))
    mean = [math.fsum(float(x[i, j]) for i in range(7)) / 7.0 for j in range(4)]
    want = math.fsum(float(params.w[j]) * mean[j] for j in range(4)) + params.bias
    assert pred.logit == pytest.approx(want, abs=1e-12)


def test_meanpool_tile_scores_average_to_logit():
    rng = np.random.default_rng(3)
    params = _params("meanpool", 5, seed=6)
    pred = forward(params, prepare(rng.standard_normal((23, 5))))
    assert float(np.mean(pred.tile_scores)) == pytest.approx(pred.logit, abs=1e-10)


def test_meanpool_dimension_mismatch_names_both():
    params = _params("meanpool", 4)
    with pytest.raises(ValidationError, match="D=4.*D=6"):
        forward(params, prepare(np.zeros((3, 6))))


# ---------------------------------------------------------------------------
# chowder


def test_extreme_concat_hand_case():
    sel, vals = extreme_concat(np.array([3.0, 1.0, 4.0, 1.0, 5.0]), 2)
    assert vals.tolist() == [5.0, 4.0, 1.0, 1.0]
    assert sel.tolist() == [4, 2, 3, 1]


def test_extreme_concat_tie_break_ascending_index():
    sel, vals = extreme_concat(np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0]), 2)
    assert sel[:2].tolist() == [0, 1]          # top side: lowest indices win
    assert vals.tolist() == [1.0] * 4


def test_extreme_concat_rejects_small_bag():
    with pytest.raises(ValidationError, match="too small"):
        extreme_concat(np.array([1.0, 2.0, 3.0]), 2)


def _saturated_scorer(scores):
    """Chowder params whose tile scorer emits the given integer scores for
    one-hot inputs: saturated sigmoid hidden units select w2 entries."""
    n = len(scores)
    h = models.SCORER_HIDDEN
    rng = np.random.default_rng(0)
    base = init_params(ModelConfig(kind="chowder", r=2), n, rng)
    w1 = np.zeros((h, n))
    b1 = np.full(h, -1000.0)
    for j in range(n):
        w1[j, j] = 1000.0
        b1[j] = -500.0
    w2 = np.zeros(h)
    w2[:n] = scores
    return ChowderParams(
        w1=w1, b1=b1, w2=w2, b2=np.zeros(1),
        a1=base.a1, c1=base.c1, a2=base.a2, c2=base.c2,
        w3=base.w3, b3=base.b3, r=2,
    )


def test_chowder_hand_set_scorer_selects_5411():
    params = _saturated_scorer([3.0, 1.0, 4.0, 1.0, 5.0])
    bag = np.eye(5)
    pred = forward(params, prepare(bag))
    assert pred.tile_scores == pytest.approx([3, 1, 4, 1, 5], abs=1e-9)
    _, vals = extreme_concat(pred.tile_scores, params.r)
    assert vals == pytest.approx([5.0, 4.0, 1.0, 1.0], abs=1e-9)


def test_chowder_equal_tiles_constant_aggregator_input():
    params = _params("chowder", 6, seed=9, r=3)
    row = np.random.default_rng(4).standard_normal(6)
    pred = forward(params, prepare(np.tile(row, (6, 1))))
    assert np.isfinite(pred.logit)
    assert np.ptp(pred.tile_scores) <= 1e-12


def test_chowder_requires_2r_tiles():
    params = _params("chowder", 4, r=3)
    with pytest.raises(ValidationError, match="too small"):
        forward(params, prepare(np.zeros((5, 4))))


def test_chowder_gradient_ignores_unselected_tiles():
    rng = np.random.default_rng(11)
    params = _params("chowder", 5, seed=12, r=2)
    x = rng.standard_normal((12, 5))
    pred = forward(params, prepare(x))
    sel, _ = extreme_concat(pred.tile_scores, 2)
    untouched = [i for i in range(12) if i not in set(sel.tolist())]
    _, g1 = loss_and_gradient(params, prepare(x), 1)
    x2 = x.copy()
    x2[untouched[0]] += 0.01 * rng.standard_normal(5)
    pred2 = forward(params, prepare(x2))
    sel2, _ = extreme_concat(pred2.tile_scores, 2)
    assert np.array_equal(sel, sel2)  # selection unchanged by construction
    _, g2 = loss_and_gradient(params, prepare(x2), 1)
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(g1[name], g2[name])


def test_chowder_duplication_changes_extremes():
    # duplicating tiles mixes duplicates into the top-r values, so the
    # aggregator input genuinely changes for r >= 2 (unlike mean/attention
    # pooling, which are exactly duplication-invariant)
    s = np.array([5.0, 4.0, 3.0, 2.0])
    _, vals = extreme_concat(s, 2)
    _, vals_dup = extreme_concat(np.concatenate([s, s]), 2)
    assert vals.tolist() == [5.0, 4.0, 2.0, 3.0]
    assert vals_dup.tolist() == [5.0, 5.0, 2.0, 2.0]


# ---------------------------------------------------------------------------
# deepmil


def test_deepmil_singleton_attention():
    params = _params("deepmil", 4, n_hidden=3)
    pred = forward(params, prepare(np.random.default_rng(5).standard_normal((1, 4))))
    assert pred.tile_scores.tolist() == [1.0]


def test_deepmil_identical_tiles_uniform_attention():
    params = _params("deepmil", 4, n_hidden=5)
    row = np.random.default_rng(6).standard_normal(4)
    pred = forward(params, prepare(np.tile(row, (37, 1))))
    assert np.abs(pred.tile_scores - 1.0 / 37).max() <= 1e-12


def test_deepmil_attention_normalized():
    rng = np.random.default_rng(7)
    for _ in range(10):
        params = _params("deepmil", 6, seed=int(rng.integers(1e6)), n_hidden=4)
        pred = forward(params, prepare(rng.standard_normal((int(rng.integers(1, 50)), 6))))
        a = pred.tile_scores
        assert abs(a.sum() - 1.0) <= 1e-12
        assert ((a > 0) & (a < 1)).all() or len(a) == 1


def test_deepmil_matches_scalar_oracle():
    # independent reimplementation with plain floats, N=3, Nh=2, D=2
    we = [[0.3, -0.2], [0.1, 0.4]]
    be = [0.05, -0.1]
    v = [[0.2, -0.5], [0.7, 0.1]]
    u = [[-0.3, 0.2], [0.4, 0.6]]
    wa = [0.8, -0.4]
    wh = [1.2, -0.7]
    bh = 0.15
    x = [[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]]

    def sig(t):
        return 1.0 / (1.0 + math.exp(-t))

    h = [[sum(we[j][k] * xi[k] for k in range(2)) + be[j] for j in range(2)] for xi in x]
    g = []
    for hi in h:
        tv = [math.tanh(sum(v[j][k] * hi[k] for k in range(2))) for j in range(2)]
        sv = [sig(sum(u[j][k] * hi[k] for k in range(2))) for j in range(2)]
        g.append(sum(wa[j] * tv[j] * sv[j] for j in range(2)))
    mx = max(g)
    e = [math.exp(gi - mx) for gi in g]
    a = [ei / sum(e) for ei in e]
    z = [sum(a[i] * h[i][j] for i in range(3)) for j in range(2)]
    want_logit = sum(wh[j] * z[j] for j in range(2)) + bh

    params = models.DeepMILParams(
        we=np.array(we), be=np.array(be), v=np.array(v), u=np.array(u),
        wa=np.array(wa), wh=np.array(wh), bh=np.array([bh]), n_hidden=2,
    )
    pred = forward(params, prepare(np.array(x)))
    assert pred.logit == pytest.approx(want_logit, abs=1e-12)
    assert pred.tile_scores == pytest.approx(a, abs=1e-12)


# ---------------------------------------------------------------------------
# loss


def test_loss_logit_zero_label_one():
    p = Prediction(probability=0.5, logit=0.0)
    params = MeanPoolParams(w=np.zeros(2), b=np.zeros(1))
    assert loss(p, 1, params) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_large_logit_stable():
    p = Prediction(probability=1.0, logit=40.0)
    params = MeanPoolParams(w=np.zeros(2), b=np.zeros(1))
    value = loss(p, 1, params)
    assert 0 <= value < 1e-15
    assert math.isfinite(value)
    value0 = loss(Prediction(probability=0.0, logit=-745.0), 0, params)
    assert math.isfinite(value0)


def test_loss_meanpool_l2_penalty():
    p = Prediction(probability=0.5, logit=0.0)
    params = MeanPoolParams(w=np.array([1.0, 1.0]), b=np.zeros(1), l2_c=0.5)
    assert loss(p, 0, params) == pytest.approx(math.log(2) + 1.0, abs=1e-12)


def test_loss_rejects_bad_label():
    p = Prediction(probability=0.5, logit=0.0)
    params = MeanPoolParams(w=np.zeros(2), b=np.zeros(1))
    with pytest.raises(ValidationError):
        loss(p, 2, params)


def test_probability_logit_consistency():
    rng = np.random.default_rng(8)
    for kind in ("meanpool", "chowder", "deepmil"):
        params = _params(kind, 5, seed=13)
        pred = forward(params, prepare(rng.standard_normal((9, 5))))
        assert abs(pred.probability - 1.0 / (1.0 + math.exp(-pred.logit))) <= 1e-12


# ---------------------------------------------------------------------------
# gradients


def test_meanpool_gradient_closed_form():
    rng = np.random.default_rng(9)
    params = _params("meanpool", 6, seed=14, l2_c=0.7)
    x = rng.standard_normal((15, 6))
    value, grads = loss_and_gradient(params, prepare(x), 1)
    pred = forward(params, prepare(x))
    want = (pred.probability - 1.0) * x.mean(axis=0) + 2 * 0.7 * params.w
    assert grads["w"] == pytest.approx(want, abs=1e-10)
    assert grads["b"][0] == pytest.approx(pred.probability - 1.0, abs=1e-12)
    assert value == pytest.approx(loss(pred, 1, params), abs=1e-12)


def _fd_max_rel_err(kind, seed, h=1e-5, n=14, d=5, **kw):
    rng = np.random.default_rng(seed)
    params = _params(kind, d, seed=seed, **kw)
    x = rng.standard_normal((n, d))
    y = int(rng.integers(2))
    pb = prepare(x)
    _, grads = loss_and_gradient(params, pb, y)
    worst = 0.0
    for name, t in params.tensors().items():
        flat = t.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = models.bag_loss(params, pb, y)
            flat[i] = orig - h
            dn = models.bag_loss(params, pb, y)
            flat[i] = orig
            fd[i] = (up - dn) / (2 * h)
        an = grads[name].reshape(-1)
        rel = np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-6)
        worst = max(worst, float(rel.max()))
    return worst


@pytest.mark.parametrize("kind", ["meanpool", "chowder", "deepmil"])
def test_gradients_match_finite_differences(kind):
    assert _fd_max_rel_err(kind, seed=77, d=4, n=10, r=2, n_hidden=3, l2_c=0.4) <= 1e-4


# ---------------------------------------------------------------------------
# invariances


@pytest.mark.parametrize("kind", ["meanpool", "chowder", "deepmil"])
def test_permutation_invariance_exact(kind):
    rng = np.random.default_rng(15)
    for _ in range(10):
        n = int(rng.integers(8, 400))
        d = int(rng.integers(2, 24))
        params = _params(kind, d, seed=int(rng.integers(1e6)), r=3, n_hidden=7)
        x = rng.standard_normal((n, d)).astype(np.float32)
        perm = rng.permutation(n)
        assert forward(params, prepare(x)).logit == forward(params, prepare(x[perm])).logit


@pytest.mark.parametrize("kind", ["meanpool", "deepmil"])
def test_duplication_leaves_logit_unchanged(kind):
    rng = np.random.default_rng(16)
    params = _params(kind, 5, seed=17, n_hidden=6)
    x = rng.standard_normal((30, 5))
    l1 = forward(params, prepare(x)).logit
    l2 = forward(params, prepare(np.vstack([x, x]))).logit
    assert l1 == pytest.approx(l2, abs=1e-12)


def test_identity_scaling_is_identity():
    rng = np.random.default_rng(18)
    params = _params("deepmil", 4, seed=19, n_hidden=5)
    x = rng.standard_normal((12, 4))
    assert forward(params, prepare(x)).logit == forward(params, prepare(x * 1.0)).logit


# ---------------------------------------------------------------------------
# init and checkpoints


def test_init_params_deterministic():
    for kind in ("meanpool", "chowder", "deepmil"):
        cfg = ModelConfig(kind=kind, r=4, n_hidden=8)
        a = init_params(cfg, 7, np.random.default_rng(123))
        b = init_params(cfg, 7, np.random.default_rng(123))
        for ta, tb in zip(a.tensors().values(), b.tensors().values()):
            assert np.array_equal(ta, tb)


def test_init_biases_zero_and_bounds():
    cfg = ModelConfig(kind="chowder", r=4)
    p = init_params(cfg, 9, np.random.default_rng(4))
    assert np.all(p.b1 == 0) and np.all(p.b2 == 0)
    assert np.abs(p.w1).max() <= 1 / math.sqrt(9)
    assert np.abs(p.a1).max() <= 1 / math.sqrt(8)


@pytest.mark.parametrize("kind", ["meanpool", "chowder", "deepmil"])
def test_checkpoint_round_trip_exact(tmp_path, kind):
    params = _params(kind, 6, seed=20, r=4, n_hidden=9, l2_c=0.25)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert back.kind == params.kind
    assert back.config() == params.config()
    for (na, ta), (nb, tb) in zip(params.tensors().items(), back.tensors().items()):
        assert na == nb
        assert ta.tobytes() == tb.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    params = _params("meanpool", 4)
    path = tmp_path / "x.ckpt"
    save_checkpoint(params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)
