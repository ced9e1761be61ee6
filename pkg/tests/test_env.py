import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vagram.env import (DISTRACTOR_BOUND, REWARD_MIN, Batch, DistractorSpec, EnvSpec, PendulumEnv,
                        dataset_csv, distractor_step, encode, pendulum_step, sample_dataset, wrap,
                        wrapped_step)

angles = st.floats(-50, 50, allow_nan=False)


def test_upright_fixed_point():
    assert pendulum_step(0.0, 0.0, 0.0) == (0.0, 0.0, -0.0)


def test_hanging_fixed_point():
    th, thd, r = pendulum_step(math.pi, 0.0, 0.0)
    assert th == pytest.approx(math.pi) and abs(thd) < 1e-12
    assert r == pytest.approx(-math.pi ** 2) and r == pytest.approx(-9.8696, abs=1e-4)


def test_small_angle_hand_evaluation():
    th, thd, r = pendulum_step(0.1, 0.0, 0.0)
    thd_expected = 15.0 * math.sin(0.1) * 0.05
    assert thd == thd_expected
    assert th == 0.1 + thd_expected * 0.05
    assert r == -(0.1 ** 2)


def test_torque_and_speed_are_clipped():
    _, thd, r = pendulum_step(0.0, 7.9, 50.0)
    assert thd == 8.0
    assert r == pytest.approx(-(0.1 * 7.9 ** 2 + 0.001 * 4.0))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        pendulum_step(np.nan, 0.0, 0.0)
    with pytest.raises(ValueError):
        pendulum_step(0.0, 0.0, np.inf)


@given(angles, st.floats(-8, 8), st.floats(-10, 10))
def test_reward_bounds(th, thd, u):
    _, _, r = pendulum_step(th, thd, u)
    assert REWARD_MIN <= r <= 0.0


@given(angles)
def test_wrap_range_and_idempotence(th):
    w = wrap(th)
    assert -math.pi < w <= math.pi
    assert wrap(w) == w
    assert abs(wrap(th + 2 * math.pi) - w) < 1e-12 or abs(abs(wrap(th + 2 * math.pi) - w) - 2 * math.pi) < 1e-12


def test_wrap_boundaries():
    assert wrap(math.pi) == math.pi
    assert wrap(-math.pi) == math.pi


def test_distractor_zero_matrix_is_identity():
    spec = DistractorSpec(3, np.zeros((3, 3)), np.zeros(3))
    z = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(distractor_step(z, spec), z)


def test_distractor_reset_branch():
    spec = DistractorSpec(2, np.zeros((2, 2)), np.array([0.05, -0.05]))
    np.testing.assert_array_equal(distractor_step(np.array([20.0, 0.0]), spec), spec.s0)
    np.testing.assert_array_equal(distractor_step(np.array([19.0, -25.0]), spec), spec.s0)


def test_distractor_matches_elementwise_oracle():
    spec = DistractorSpec.sample(2, 11)
    z = np.array([0.3, -1.2])
    cand = [z[i] + math.sin(sum(spec.A[i, j] * z[j] for j in range(2))) for i in range(2)]
    expected = spec.s0 if max(abs(c) for c in cand) >= 20 else np.array(cand)
    np.testing.assert_allclose(distractor_step(z, spec), expected, rtol=0, atol=1e-15)


def test_distractor_dim_mismatch():
    with pytest.raises(ValueError):
        distractor_step(np.zeros(3), DistractorSpec.sample(2, 0))


def test_distractor_spec_fixed_and_scaled():
    a, b = DistractorSpec.sample(50, 3), DistractorSpec.sample(50, 3)
    np.testing.assert_array_equal(a.A, b.A)
    assert 9.0 < a.A.std() < 11.0 and 0.08 < a.s0.std() < 0.12


@given(st.integers(0, 2 ** 32 - 1))
def test_reset_branch_iff_candidate_reaches_bound(seed):
    rng = np.random.default_rng(seed)
    spec = DistractorSpec.sample(3, seed)
    z = rng.uniform(-22, 22, size=3)
    cand = z + np.sin([math.fsum(row * z) for row in spec.A])
    out = distractor_step(z, spec)
    if np.max(np.abs(cand)) >= DISTRACTOR_BOUND + 1e-9:
        np.testing.assert_array_equal(out, spec.s0)
    elif np.max(np.abs(cand)) < DISTRACTOR_BOUND - 1e-9:
        np.testing.assert_allclose(out, cand, rtol=1e-13, atol=1e-13)


def test_wrapped_step_without_distractors_is_pendulum_step():
    spec = EnvSpec("raw")
    obs, r = wrapped_step(np.array([0.4, -2.0]), 1.5, spec, None)
    th, thd, r2 = pendulum_step(0.4, -2.0, 1.5)
    np.testing.assert_array_equal(obs, [th, thd])
    assert r == r2


def test_wrapped_step_composes_component_oracles():
    spec = EnvSpec("trig", distractors=3, distractor_seed=5)
    dspec = DistractorSpec.sample(3, 5)
    core = encode(1.0, 0.5, "trig")
    z = np.array([0.1, 0.2, -0.3])
    obs, r = wrapped_step(np.concatenate([core, z]), -0.7, spec, dspec)
    th, thd, r2 = pendulum_step(1.0, 0.5, -0.7)
    np.testing.assert_allclose(obs[:3], encode(th, thd, "trig"), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(obs[3:], distractor_step(z, dspec))
    assert r == pytest.approx(r2, abs=1e-15)


@given(st.integers(0, 10_000))
def test_distractors_never_change_reward(seed):
    rng = np.random.default_rng(seed)
    core = encode(rng.uniform(-3, 3), rng.uniform(-8, 8), "trig")
    u = rng.uniform(-2, 2)
    spec0 = EnvSpec("trig")
    spec4 = EnvSpec("trig", distractors=4, distractor_seed=seed)
    _, r0 = wrapped_step(core, u, spec0, None)
    _, r4 = wrapped_step(np.concatenate([core, rng.normal(size=4) * 10]), u, spec4,
                         DistractorSpec.sample(4, seed))
    assert r0 == r4


def test_sample_dataset_deterministic_and_in_range():
    a = sample_dataset(5, seed=3, spec=EnvSpec("raw"))
    b = sample_dataset(5, seed=3, spec=EnvSpec("raw"))
    for f in ("s", "a", "r", "s_next"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    big = sample_dataset(2000, seed=1, spec=EnvSpec("raw"))
    assert np.all(big.s[:, 0] > -math.pi) and np.all(big.s[:, 0] <= math.pi)
    assert np.all(np.abs(big.s[:, 1]) <= 8) and np.all(np.abs(big.a) <= 2)


def test_sample_dataset_replays_through_step_oracle():
    d = sample_dataset(200, seed=9, spec=EnvSpec("raw"))
    for t in d:
        th, thd, r = pendulum_step(t.s[0], t.s[1], t.a[0])
        assert (th, thd) == tuple(t.s_next) and r == t.r


def test_sample_dataset_rejects_empty():
    with pytest.raises(ValueError):
        sample_dataset(0)


def test_policy_rollout_dataset():
    d = sample_dataset(450, "policy_rollout", seed=2, policy=lambda obs: np.array([0.0]))
    assert len(d) == 450 and not d.done.any()
    with pytest.raises(ValueError):
        sample_dataset(3, "policy_rollout")


def test_env_episode_truncates_at_200():
    env = PendulumEnv(EnvSpec("trig", distractors=2), seed=0)
    obs = env.reset()
    assert obs.shape == (5,)
    for t in range(200):
        obs, r, done, trunc = env.step(np.array([0.3]))
        assert not done
        assert trunc == (t == 199)


def test_dataset_csv_header_and_precision():
    d = sample_dataset(2, seed=0, spec=EnvSpec("raw"))
    lines = dataset_csv(d).splitlines()
    assert lines[0] == "s_0,s_1,a_0,r,sp_0,sp_1,done"
    assert float(lines[1].split(",")[0]) == d.s[0, 0]


def test_batch_concat_and_index():
    d = sample_dataset(4, seed=0)
    both = Batch.concat([d[:2], d[2:]])
    np.testing.assert_array_equal(both.s, d.s)


@given(st.integers(1, 9), st.integers(0, 2 ** 31))
def test_distractor_batch_rows_match_single_steps(k, seed):
    spec = DistractorSpec.sample(k, seed)
    z = np.random.default_rng(seed).uniform(-15, 15, size=(6, k))
    batched = distractor_step(z, spec)
    for i in range(6):
        assert batched[i].tobytes() == distractor_step(z[i], spec).tobytes()
