import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vagram import autodiff as ad
from vagram.agent import GaussianPolicy, SacAgent, SacConfig, ValueBundle
from vagram.autodiff import ShapeError
from vagram.modelloss import (LossSpec, PreparedBatch, clip_gradients, entropy_estimate, eval_vaml_error,
                              itervaml_loss, itervaml_mse_loss, mse_loss, multi_vf_loss, nearest_rank,
                              prepare_batch, sac_vaml_loss, single_vf_loss, taylor_vaml_loss,
                              value_weighted_mse_loss, vagram_bound_loss, vagram_loss)
from vagram.nn import init_mlp, make_model, zero_mlp

A = np.array


def sum_v(x):
    return ad.sum(ad.as_tensor(x), axis=1)


def sq_v(x):
    return ad.sum(ad.square(ad.as_tensor(x)), axis=1)


def val(t):
    return t.item()


# ---------------------------------------------------------------- examples

def test_mse_examples():
    assert val(mse_loss(A([[1.0, 2.0]]), A([[1.0, 2.0]]))) == 0.0
    assert val(mse_loss(A([[1.0, 2.0]]), A([[0.0, 0.0]]))) == 5.0
    assert val(mse_loss(A([[1.0, 0.0], [0.0, 2.0]]), np.zeros((2, 2)))) == 2.5


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_itervaml_examples():
    s = A([[0.3, -0.4]])
    assert val(itervaml_loss(sum_v, s, s)) == 0.0
    assert val(itervaml_loss(sum_v, A([[1.0, 1.0]]), A([[0.0, 0.0]]))) == 4.0
    spurious = A([[0.0, 1.0]])
    sample = A([[1.0, 0.0]])
    assert val(itervaml_loss(sq_v, spurious, sample)) == 0.0
    assert np.linalg.norm(spurious - sample) == pytest.approx(math.sqrt(2))


def test_itervaml_non_finite_value():
    with pytest.raises(ad.NonFiniteError):
        itervaml_loss(lambda x: ad.log(ad.sum(ad.as_tensor(x), axis=1)), A([[-1.0, 0.0]]), A([[1.0, 1.0]]))


def test_taylor_examples():
    assert val(taylor_vaml_loss(A([[1.0, -1.0]]), A([[1.0, 1.0]]), np.zeros((1, 2)))) == 0.0
    assert val(taylor_vaml_loss(A([[1.0, 1.0]]), A([[1.0, 2.0]]), np.zeros((1, 2)))) == 9.0


def test_taylor_shape_mismatch():
    with pytest.raises(ShapeError):
        taylor_vaml_loss(np.ones((1, 3)), np.ones((1, 2)), np.zeros((1, 2)))


@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), arrays(np.float64, (5, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (3,), elements=st.floats(-5, 5)))
def test_taylor_equals_itervaml_for_linear_value(f, sp, w):
    def lin(x):
        return ad.sum(ad.mul(ad.as_tensor(x), w), axis=1)

    g = np.tile(w, (5, 1))
    a, b = val(taylor_vaml_loss(g, f, sp)), val(itervaml_loss(lin, f, sp))
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_vagram_examples():
    f, sp = A([[1.0, 2.0]]), np.zeros((1, 2))
    assert val(vagram_loss(np.ones((1, 2)), f, sp)) == val(mse_loss(f, sp))
    assert val(vagram_loss(A([[1.0, 1.0]]), f, sp)) == 5.0
    assert 2 * 5.0 >= val(taylor_vaml_loss(A([[1.0, 1.0]]), f, sp)) == 9.0
    assert val(vagram_loss(A([[2.0, 0.0]]), A([[3.0, 5.0]]), sp)) == 36.0


def test_vagram_bound_examples(rng):
    assert val(vagram_bound_loss(A([[1.0, 0.0]]), A([[1.0, 0.0]]), np.zeros((1, 2)), 2.0)) == 4.0
    g, f, sp = rng.normal(size=(7, 3)), rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    assert val(vagram_bound_loss(g, f, sp, 0.0)) == pytest.approx(2 * val(taylor_vaml_loss(g, f, sp)), rel=1e-15)
    assert val(vagram_bound_loss(g, sp, sp, 3.0)) == 0.0
    with pytest.raises(ValueError):
        vagram_bound_loss(g, f, sp, -1.0)


def test_itervaml_mse_examples(rng):
    f, sp = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    assert val(itervaml_mse_loss(sq_v, f, sp, 0.0)) == val(itervaml_loss(sq_v, f, sp))
    big = val(itervaml_mse_loss(sq_v, f, sp, 1e6))
    assert big / (1e6 * val(mse_loss(f, sp))) == pytest.approx(1.0, rel=1e-4)
    assert val(itervaml_mse_loss(sq_v, A([[0.0, 1.0]]), A([[1.0, 0.0]]), 0.01)) == pytest.approx(0.02)
    with pytest.raises(ValueError):
        itervaml_mse_loss(sq_v, f, sp, -0.1)


def test_value_weighted_mse_examples(rng):
    f, sp = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    const = val(value_weighted_mse_loss(lambda x: ad.mul(ad.sum(ad.as_tensor(x), axis=1), 0.0) + 3.0, sp, f))
    assert const == pytest.approx(val(mse_loss(f, sp)) / (3.0 + 1e-6), rel=1e-12)
    one = val(value_weighted_mse_loss(lambda x: ad.as_tensor(np.ones(1)), A([[0.0, 0.0]]), A([[1.0, 0.0]])))
    assert one == pytest.approx(1.0, rel=1e-5)
    zero = val(value_weighted_mse_loss(lambda x: ad.as_tensor(np.zeros(1)), A([[0.0, 0.0]]), A([[1.0, 0.0]])))
    assert zero == pytest.approx(1e6) and math.isfinite(zero)


def small_bundle(seed=0, obs_dim=3):
    agent = SacAgent(obs_dim, 1, 2.0, SacConfig(hidden=(8, 8), activation="tanh"), seed=seed)
    return agent.bundle()


def test_sac_vaml_zero_at_identity(rng):
    b = small_bundle()
    s = rng.normal(size=(6, 3))
    assert val(sac_vaml_loss(b, s, s, K=4, rng=np.random.default_rng(1))) == 0.0


def test_sac_vaml_state_independent_policy_reduces_to_itervaml(rng):
    b = small_bundle()
    net = zero_mlp([3, 2], "tanh")
    net.params[1][...] = [0.2, -0.3]
    b = ValueBundle(GaussianPolicy(net, 1, 2.0), b.critics)
    f, sp = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    a = val(sac_vaml_loss(b, f, sp, K=3, rng=np.random.default_rng(2)))
    assert a == pytest.approx(val(itervaml_loss(b.evaluator(0), f, sp)), abs=1e-12)


def test_entropy_estimate_converges():
    b = small_bundle(seed=5)
    s = np.full((1, 3), 0.4)
    K = 100_000
    noise = np.random.default_rng(0).standard_normal((K, 1, 1))
    est = entropy_estimate(b, s, noise).item()
    _, logp = b.policy.sample_np(np.repeat(s, K, axis=0), noise[:, 0])
    # an independent draw sets the Monte-Carlo yardstick
    _, ref = b.policy.sample_np(np.repeat(s, K, axis=0), np.random.default_rng(9).standard_normal((K, 1)))
    assert est == pytest.approx(logp.mean(), rel=1e-10)
    assert abs(est - ref.mean()) < 3 * math.sqrt(2) * ref.std() / math.sqrt(K)


def test_loss_spec_validation():
    for bad in (dict(kind="nope"), dict(lam=-1), dict(M=-1), dict(K=0), dict(clip_percentile=0)):
        with pytest.raises(ValueError):
            LossSpec(**bad)


# ---------------------------------------------------------------- clipping

def test_clip_equal_norms_unchanged():
    g = np.tile([[3.0, 4.0]], (5, 1))
    out, t = clip_gradients(g, 95)
    assert t == 5.0 and out.tobytes() == g.tobytes()


def test_clip_nearest_rank_example():
    g = A([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [10.0, 0.0]])
    out, t = clip_gradients(g, 50)
    assert t == 1.0
    np.testing.assert_array_equal(out[:3], g[:3])
    assert np.linalg.norm(out[3]) == pytest.approx(1.0)


@given(arrays(np.float64, (9, 3), elements=st.floats(-100, 100)))
def test_clip_p100_is_identity(g):
    out, _ = clip_gradients(g, 100)
    assert out.tobytes() == g.tobytes()


def test_clip_empty_rejected():
    with pytest.raises(ValueError):
        clip_gradients(np.zeros((0, 2)), 95)


def test_nearest_rank_definition():
    assert nearest_rank([5, 1, 3, 2, 4], 40) == 2
    assert nearest_rank([5, 1, 3, 2, 4], 41) == 3
    assert nearest_rank([7], 1) == 7


# ------------------------------------------------------------ multi-VF sums

def prepared(rng, bundle, n=16, d=3, vf=(0, 1, 2, 3), kind="vagram", clip=None):
    spec = LossSpec(kind, clip_percentile=clip, vf_indices=vf)
    s, a, sp = rng.normal(size=(n, d)), rng.normal(size=(n, 1)), rng.normal(size=(n, d))
    return spec, prepare_batch(spec, bundle, s, a, sp)


@pytest.mark.parametrize("kind", ["vagram", "taylor_vaml", "vagram_bound", "itervaml", "itervaml_mse"])
def test_single_vf_selection_equals_single_loss(kind, rng):
    b = small_bundle()
    spec, pb = prepared(rng, b, vf=(1,), kind=kind)
    f = rng.normal(size=pb.s_next.shape)
    expected = single_vf_loss(spec, f, pb.s_next, g=pb.grads[0] if pb.grads is not None else None,
                              V=b.evaluator(1), bundle=b, which=1)
    assert val(multi_vf_loss(spec, b, pb, f)) == val(expected)


def test_four_identical_vfs_quadruple(rng):
    b = small_bundle()
    b = ValueBundle(b.policy, [b.critics[0]] * 4)
    spec, pb = prepared(rng, b, clip=95.0)
    f = rng.normal(size=pb.s_next.shape)
    one = PreparedBatch(pb.s, pb.a, pb.s_next, pb.grads[:1])
    single = val(multi_vf_loss(LossSpec("vagram", clip_percentile=95.0, vf_indices=(0,)), b, one, f))
    assert val(multi_vf_loss(spec, b, pb, f)) == pytest.approx(4 * single, rel=1e-14)


def test_opposite_gradients_contribute_equally(rng):
    g = rng.normal(size=(10, 3))
    f, sp = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    assert val(vagram_loss(g, f, sp)) == val(vagram_loss(-g, f, sp))


def test_empty_vf_set_rejected(rng):
    b = small_bundle()
    pb = PreparedBatch(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 3)), np.zeros((0, 2, 3)))
    with pytest.raises(ValueError):
        multi_vf_loss(LossSpec("vagram", vf_indices=()), b, pb, np.zeros((2, 3)))


def test_clipping_is_per_vf_and_recorded(rng):
    b = small_bundle()
    spec, pb = prepared(rng, b, n=40, clip=90.0)
    multi_vf_loss(spec, b, pb, rng.normal(size=pb.s_next.shape))
    norms = np.linalg.norm(pb.grads, axis=2)
    assert pb.thresholds == [nearest_rank(norms[j], 90.0) for j in range(4)]


# ------------------------------------------------------------- evaluation

def test_eval_vaml_error_examples(rng):
    s, a = rng.normal(size=(8, 3)), rng.normal(size=(8, 1))
    model = make_model(3, 1, (4,), "tanh", "delta", 0)
    sp = model.predict_np(s, a)
    assert eval_vaml_error(lambda x: x.sum(axis=1), model, s, a, sp) == 0.0
    assert eval_vaml_error(lambda x: np.full(len(x), 2.0), model, s, a, rng.normal(size=(8, 3))) == 0.0
    other = rng.normal(size=(8, 3))
    expected = val(itervaml_loss(sq_v, model.predict_np(s, a), other))
    assert eval_vaml_error(lambda x: (x ** 2).sum(axis=1), model, s, a, other) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        eval_vaml_error(lambda x: x.sum(axis=1), model, s[:0], a[:0], sp[:0])


# ------------------------------------------------------------- properties

@given(st.integers(1, 10), st.integers(0, 2 ** 31))
def test_cauchy_schwarz_bound(d, seed):
    rng = np.random.default_rng(seed)
    g, diff = rng.normal(size=(500, d)), rng.normal(size=(500, d))
    vag = np.sum(g * g * diff * diff, axis=1)
    tay = np.sum(g * diff, axis=1) ** 2
    assert np.all(d * vag >= tay * (1 - 1e-12))


def test_cauchy_schwarz_equality_case(rng):
    for d in range(1, 8):
        g = rng.normal(size=d)
        diff = 0.7 * np.sign(g) / np.where(g == 0, 1, np.abs(g))  # g_i * d_i all equal
        vag = np.sum(g * g * diff * diff)
        assert d * vag == pytest.approx(np.dot(g, diff) ** 2, rel=1e-12)


def test_taylor_error_is_third_order():
    def V(x):
        x = ad.as_tensor(x)
        return ad.sum(ad.add(ad.sin(x), ad.mul(ad.square(x), 0.0)), axis=1)

    sp = A([[0.3, -0.5, 1.1]])
    g = np.cos(sp)
    u = A([[1.0, 2.0, -1.0]]) / math.sqrt(6)
    deltas = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    gaps = []
    for delta in deltas:
        f = sp + delta * u
        gaps.append(abs(val(itervaml_loss(V, f, sp)) - val(taylor_vaml_loss(g, f, sp))))
    slope = np.polyfit(np.log(deltas), np.log(gaps), 1)[0]
    assert 2.7 <= slope <= 3.3


def test_vagram_grid_is_axis_aligned_quadratic(rng):
    sp, g = rng.normal(size=2), rng.normal(size=2)
    xs, ys = np.linspace(-3, 3, 11), np.linspace(-2, 4, 13)
    grid = np.array([[x, y] for x in xs for y in ys])
    vals = np.array([val(vagram_loss(g[None], c[None], sp[None])) for c in grid])
    # fit per-axis quadratics through 3 points and predict the rest
    cx = np.polyfit(xs[[0, 5, 10]], g[0] ** 2 * (xs[[0, 5, 10]] - sp[0]) ** 2, 2)
    cy = np.polyfit(ys[[0, 6, 12]], g[1] ** 2 * (ys[[0, 6, 12]] - sp[1]) ** 2, 2)
    pred = np.polyval(cx, grid[:, 0]) + np.polyval(cy, grid[:, 1])
    assert np.max(np.abs(pred - vals)) < 1e-10


@given(st.integers(2, 6), st.integers(0, 2 ** 31))
def test_taylor_zero_on_hyperplane(d, seed):
    rng = np.random.default_rng(seed)
    g, sp = rng.normal(size=d), rng.normal(size=d)
    v = rng.normal(size=(20, d))
    v -= np.outer(v @ g, g) / (g @ g)  # project onto g's orthogonal complement
    f = sp + 5 * v
    losses = [val(taylor_vaml_loss(g[None], f[i:i + 1], sp[None])) for i in range(20)]
    scale = (np.linalg.norm(g) * np.max(np.linalg.norm(f - sp, axis=1))) ** 2
    assert max(losses) <= 1e-24 * scale


def test_linear_model_matches_weighted_least_squares(rng):
    n, d = 400, 2
    s, a = rng.normal(size=(n, d)), rng.normal(size=(n, 1))
    sp = np.tanh(s @ rng.normal(size=(d, d))) + a @ rng.normal(size=(1, d))
    g = rng.normal(size=(n, d))
    model = make_model(d, 1, (), "relu", "absolute", 0)
    from vagram.nn import Adam
    from vagram.autodiff import Graph, backward
    opt = Adam(0.05)
    for i in range(4000):
        if i == 3000:
            opt.lr = 0.005
        gr = Graph()
        leaves = gr.leaves_for(model.params)
        grads = backward(gr, vagram_loss(g, model.predict(s, a, leaves), sp))
        opt.step(model.params, [grads[p] for p in leaves])
    X = np.concatenate([s, a, np.ones((n, 1))], axis=1)
    for j in range(d):
        W = g[:, j] ** 2
        coef = np.linalg.solve(X.T @ (W[:, None] * X), X.T @ (W * sp[:, j]))
        learned = np.concatenate([model.params[0][:, j], model.params[1][j:j + 1]])
        assert np.max(np.abs(learned - coef)) / np.max(np.abs(coef)) < 1e-4
