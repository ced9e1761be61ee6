"""Pendulum dynamics, distractor dimensions and dataset generation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np

MAX_SPEED = 8.0
MAX_TORQUE = 2.0
DT = 0.05
G = 10.0
MASS = 1.0
LENGTH = 1.0
GAMMA = 0.99
EPISODE_LENGTH = 200
DISTRACTOR_BOUND = 20.0

REWARD_MIN = -(math.pi ** 2 + 0.1 * MAX_SPEED ** 2 + 0.001 * MAX_TORQUE ** 2)


def wrap(theta):
    """Map angles into (-pi, pi]. Values already in range are returned untouched."""
    theta = np.asarray(theta, dtype=np.float64)
    inside = (theta > -math.pi) & (theta <= math.pi)
    out = np.where(inside, theta, math.pi - np.mod(math.pi - theta, 2.0 * math.pi))
    return out if out.ndim else float(out)


def pendulum_step(theta, theta_dot, u):
    """One Euler step. Works elementwise on arrays. Returns (theta', theta_dot', reward)."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_dot = np.asarray(theta_dot, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(theta_dot)) and np.all(np.isfinite(u))):
        raise ValueError("pendulum_step: non-finite input")
    u_c = np.clip(u, -MAX_TORQUE, MAX_TORQUE)
    reward = -(wrap(theta) ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u_c ** 2)
    new_theta_dot = np.clip(
        theta_dot + (3.0 * G / (2.0 * LENGTH) * np.sin(theta) + 3.0 / (MASS * LENGTH ** 2) * u_c) * DT,
        -MAX_SPEED, MAX_SPEED)
    new_theta = wrap(theta + new_theta_dot * DT)
    return new_theta, new_theta_dot, reward


# -------------------------------------------------------------- distractors


@dataclass
class DistractorSpec:
    k: int
    A: np.ndarray
    s0: np.ndarray
    bound: float = DISTRACTOR_BOUND

    @classmethod
    def sample(cls, k: int, seed) -> DistractorSpec:
        if k < 0:
            raise ValueError("distractor dim must be >= 0")
        rng = np.random.default_rng(seed)
        return cls(k, rng.normal(0.0, 10.0, size=(k, k)), rng.normal(0.0, 0.1, size=k))


def distractor_step(z: np.ndarray, spec: DistractorSpec) -> np.ndarray:
    """z + sin(A z), reset to s0 if any component reaches the bound.

    Accepts a single vector (k,) or a batch (B, k).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != spec.k:
        raise ValueError(f"distractor state has dim {z.shape[-1]}, spec has {spec.k}")
    # explicit row sums rather than BLAS so a batch row equals the same vector stepped alone
    cand = z + np.sin(np.sum(z[..., None, :] * spec.A, axis=-1))
    if spec.k == 0:
        return cand
    reset = np.max(np.abs(cand), axis=-1) >= spec.bound
    return np.where(reset[..., None], spec.s0, cand) if z.ndim == 2 else (spec.s0.copy() if reset else cand)


# ------------------------------------------------------------- environment


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    """Column-stored transitions."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.s.shape[0]

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]))

    def __getitem__(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    @classmethod
    def concat(cls, batches) -> Batch:
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("s", "a", "r", "s_next", "done")))


@dataclass
class EnvSpec:
    obs_mode: str = "trig"
    distractors: int = 0
    distractor_seed: int = 0
    gamma: float = GAMMA
    action_dim: int = 1
    action_bound: float = MAX_TORQUE
    dt: float = DT
    g: float = G
    m: float = MASS
    l: float = LENGTH  # noqa: E741

    def __post_init__(self):
        if self.obs_mode not in ("trig", "raw"):
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}")

    @property
    def core_dim(self) -> int:
        return 3 if self.obs_mode == "trig" else 2

    @property
    def obs_dim(self) -> int:
        return self.core_dim + self.distractors


def encode(theta, theta_dot, obs_mode: str) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    theta_dot = np.asarray(theta_dot, dtype=np.float64)
    if obs_mode == "trig":
        return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)
    return np.stack([theta, theta_dot], axis=-1)


def decode(obs: np.ndarray, obs_mode: str) -> tuple[np.ndarray, np.ndarray]:
    obs = np.asarray(obs)
    if obs_mode == "trig":
        return np.arctan2(obs[..., 1], obs[..., 0]), obs[..., 2]
    return obs[..., 0], obs[..., 1]


def wrapped_step(obs: np.ndarray, u, spec: EnvSpec, distractor: DistractorSpec | None):
    """Step a concatenated observation (core ⊕ distractors). Batched or single."""
    obs = np.asarray(obs, dtype=np.float64)
    c = spec.core_dim
    k = 0 if distractor is None else distractor.k
    if obs.shape[-1] != c + k:
        raise ValueError(f"observation has dim {obs.shape[-1]}, expected {c + k}")
    theta, theta_dot = decode(obs[..., :c], spec.obs_mode)
    u = np.asarray(u, dtype=np.float64).reshape(np.shape(theta))
    th2, thd2, r = pendulum_step(theta, theta_dot, u)
    core = encode(th2, thd2, spec.obs_mode)
    if k:
        core = np.concatenate([core, distractor_step(obs[..., c:], distractor)], axis=-1)
    return core, r


@dataclass
class PendulumEnv:
    """Episodic Pendulum with optional distractor dimensions.

    Episodes are truncated after ``EPISODE_LENGTH`` steps; ``done`` is never
    set because truncation is not termination.
    """

    spec: EnvSpec = field(default_factory=EnvSpec)
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.distractor = DistractorSpec.sample(self.spec.distractors, self.spec.distractor_seed) \
            if self.spec.distractors else None
        self.obs: np.ndarray | None = None
        self.t = 0

    def reset(self) -> np.ndarray:
        theta = self.rng.uniform(-math.pi, math.pi)
        theta_dot = self.rng.uniform(-1.0, 1.0)
        obs = encode(theta, theta_dot, self.spec.obs_mode)
        if self.distractor is not None:
            obs = np.concatenate([obs, self.distractor.s0])
        self.obs = obs
        self.t = 0
        return obs.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        """Returns (obs, reward, done, truncated)."""
        if self.obs is None:
            raise RuntimeError("reset() before step()")
        a = float(np.asarray(action).reshape(-1)[0])
        obs, r = wrapped_step(self.obs, a, self.spec, self.distractor)
        self.obs = obs
        self.t += 1
        return obs.copy(), float(r), False, self.t >= EPISODE_LENGTH


def sample_dataset(n: int, source: str = "uniform_state", seed=0, spec: EnvSpec | None = None,
                   policy: Callable[[np.ndarray], np.ndarray] | None = None) -> Batch:
    """Uniform-over-state-space or on-policy transitions, deterministic under seed."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    spec = spec or EnvSpec()
    rng = np.random.default_rng(seed)
    distractor = DistractorSpec.sample(spec.distractors, spec.distractor_seed) if spec.distractors else None
    if source == "uniform_state":
        theta = math.pi - rng.uniform(0.0, 2.0 * math.pi, size=n)  # (-pi, pi]
        theta_dot = rng.uniform(-MAX_SPEED, MAX_SPEED, size=n)
        a = rng.uniform(-MAX_TORQUE, MAX_TORQUE, size=(n, 1))
        s = encode(theta, theta_dot, spec.obs_mode)
        if distractor is not None:
            # distractor dynamics keep states inside the reset box
            z = rng.uniform(-DISTRACTOR_BOUND, DISTRACTOR_BOUND, size=(n, distractor.k))
            s = np.concatenate([s, z], axis=1)
        sp, r = wrapped_step(s, a[:, 0], spec, distractor)
        return Batch(s, a, r, sp, np.zeros(n, dtype=bool))
    if source == "policy_rollout":
        if policy is None:
            raise ValueError("policy_rollout needs a policy")
        env = PendulumEnv(spec, seed=int(rng.integers(2 ** 63)))
        rows = []
        obs = env.reset()
        for _ in range(n):
            a = np.asarray(policy(obs), dtype=np.float64).reshape(1)
            nxt, r, done, trunc = env.step(a)
            rows.append((obs, a, r, nxt, done))
            obs = env.reset() if trunc else nxt
        s, a, r, sp, d = zip(*rows)
        return Batch(np.array(s), np.array(a), np.array(r), np.array(sp), np.array(d))
    raise ValueError(f"unknown dataset source {source!r}")


def dataset_csv(batch: Batch) -> str:
    d = batch.s.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"s_{i}" for i in range(d)] + ["a_0", "r"] + [f"sp_{i}" for i in range(d)] + ["done"])
    for t in batch:
        w.writerow([format(x, ".17g") for x in t.s] + [format(t.a[0], ".17g"), format(t.r, ".17g")]
                   + [format(x, ".17g") for x in t.s_next] + [int(t.done)])
    return buf.getvalue()
