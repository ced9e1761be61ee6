"""Soft actor-critic and the critic-derived state-value functions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward
from .env import Batch
from .nn import Adam, Mlp, atomic_write_text, init_mlp, load_mlp, mlp_to_dict

LOG_2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
VF_NAMES = ("q1", "q2", "q1_target", "q2_target")


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    init_alpha: float = 0.2
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    target_entropy: float | None = None  # defaults to -action_dim


def _log_std(raw: Tensor, lo: float, hi: float) -> Tensor:
    # smooth squash of the raw output into [lo, hi]
    return ad.add(ad.mul(ad.add(ad.tanh(raw), 1.0), 0.5 * (hi - lo)), lo)


def _log_std_np(raw, lo, hi):
    return (np.tanh(raw) + 1.0) * (0.5 * (hi - lo)) + lo


def squash_correction(u: Tensor) -> Tensor:
    """log(1 - tanh(u)^2), computed stably."""
    return ad.mul(ad.sub(ad.sub(LOG_2, u), ad.softplus(ad.mul(u, -2.0))), 2.0)


def _squash_correction_np(u):
    return 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class GaussianPolicy:
    """tanh-squashed diagonal Gaussian; the net emits (mean, raw log-std)."""

    net: Mlp
    action_dim: int
    action_bound: float = 2.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def dist(self, s, params: Sequence | None = None) -> tuple[Tensor, Tensor]:
        h = self.net(s, params)
        k = self.action_dim
        mu = ad.columns(h, 0, k)
        log_std = _log_std(ad.columns(h, k, 2 * k), self.log_std_min, self.log_std_max)
        return mu, log_std

    def mean_action(self, s, params: Sequence | None = None) -> Tensor:
        mu, _ = self.dist(s, params)
        return ad.mul(ad.tanh(mu), self.action_bound)

    def sample(self, s, noise: np.ndarray, params: Sequence | None = None) -> tuple[Tensor, Tensor]:
        """Reparameterised action and log-prob, shape (B, k) and (B,)."""
        mu, log_std = self.dist(s, params)
        u = ad.add(mu, ad.mul(ad.exp(log_std), noise))
        a = ad.mul(ad.tanh(u), self.action_bound)
        gauss = ad.sub(ad.mul(np.square(noise), -0.5), ad.add(log_std, HALF_LOG_2PI))
        logp = ad.sum(ad.sub(gauss, squash_correction(u)), axis=1)
        logp = ad.sub(logp, self.action_dim * math.log(self.action_bound))
        return a, logp

    def log_prob_at(self, s, u: np.ndarray) -> np.ndarray:
        """Log-density of the squashed action tanh(u)*bound, untracked."""
        h = self.net.forward_np(s)
        k = self.action_dim
        mu = h[:, :k]
        log_std = _log_std_np(h[:, k:], self.log_std_min, self.log_std_max)
        z = (u - mu) / np.exp(log_std)
        gauss = -0.5 * z * z - log_std - HALF_LOG_2PI
        return (gauss - _squash_correction_np(u)).sum(axis=1) - k * math.log(self.action_bound)

    def sample_np(self, s: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.net.forward_np(s)
        k = self.action_dim
        mu = h[:, :k]
        log_std = _log_std_np(h[:, k:], self.log_std_min, self.log_std_max)
        u = mu + np.exp(log_std) * noise
        gauss = -0.5 * noise * noise - log_std - HALF_LOG_2PI
        logp = (gauss - _squash_correction_np(u)).sum(axis=1) - k * math.log(self.action_bound)
        return np.tanh(u) * self.action_bound, logp

    def mean_action_np(self, s: np.ndarray) -> np.ndarray:
        h = self.net.forward_np(s)
        return np.tanh(h[:, :self.action_dim]) * self.action_bound

    def copy(self) -> GaussianPolicy:
        return GaussianPolicy(self.net.copy(), self.action_dim, self.action_bound,
                              self.log_std_min, self.log_std_max)


@dataclass
class ValueBundle:
    """State-value functions V_i(s) = Q_i(s, mean action of the policy at s).

    The mean action depends on s, and that dependence is differentiated too.
    The entropy bonus is not part of V.
    """

    policy: GaussianPolicy
    critics: list[Mlp]

    def __len__(self):
        return len(self.critics)

    def _check(self, which: int):
        if not 0 <= which < len(self.critics):
            raise IndexError(f"value function index {which} outside 0..{len(self.critics) - 1}")

    def value(self, s, which: int) -> Tensor:
        """Per-sample values, shape (B,)."""
        self._check(which)
        s = ad.as_tensor(s)
        a = self.policy.mean_action(s)
        q = self.critics[which](ad.concat([s, a], axis=1))
        return ad.reshape(q, (q.shape[0],))

    def value_np(self, s: np.ndarray, which: int) -> np.ndarray:
        self._check(which)
        s = np.atleast_2d(s)
        a = self.policy.mean_action_np(s)
        return self.critics[which].forward_np(np.concatenate([s, a], axis=1))[:, 0]

    def evaluator(self, which: int):
        return lambda s: self.value(s, which)

    def gradients(self, s: np.ndarray, indices: Sequence[int] | None = None) -> np.ndarray:
        """grad_s V_i at every row of ``s``: shape (len(indices), B, d)."""
        return value_gradients(self, s, indices)

    def copy(self) -> ValueBundle:
        return ValueBundle(self.policy.copy(), [c.copy() for c in self.critics])

    def save(self, directory) -> None:
        directory = Path(directory)
        p = self.policy
        meta = {"action_dim": p.action_dim, "action_bound": p.action_bound,
                "log_std_min": p.log_std_min, "log_std_max": p.log_std_max,
                "critics": list(VF_NAMES[:len(self.critics)])}
        atomic_write_text(directory / "policy.json", json.dumps(mlp_to_dict(p.net)))
        for name, c in zip(VF_NAMES, self.critics):
            atomic_write_text(directory / f"{name}.json", json.dumps(mlp_to_dict(c)))
        atomic_write_text(directory / "bundle.json", json.dumps(meta))

    @classmethod
    def load(cls, directory) -> ValueBundle:
        directory = Path(directory)
        if not (directory / "bundle.json").exists():
            raise FileNotFoundError(f"no value bundle at {directory}")
        meta = json.loads((directory / "bundle.json").read_text())
        policy = GaussianPolicy(load_mlp(directory / "policy.json"), meta["action_dim"],
                                meta["action_bound"], meta["log_std_min"], meta["log_std_max"])
        critics = [load_mlp(directory / f"{n}.json") for n in meta["critics"]]
        return cls(policy, critics)


def value_gradients(bundle: ValueBundle, s: np.ndarray, indices: Sequence[int] | None = None) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] == 0:
        raise ValueError("empty state batch")
    indices = range(len(bundle)) if indices is None else indices
    out = np.empty((len(indices), *s.shape))
    for j, which in enumerate(indices):
        # rows are independent, so the gradient of the summed values is per-row grad V
        g = Graph()
        x = g.leaf(s)
        total = ad.sum(bundle.value(x, which))
        grad = backward(g, total)[x]
        if not np.all(np.isfinite(grad)):
            raise ad.NonFiniteError(f"value gradient {which}", None)
        out[j] = grad
    return out


@dataclass
class SacAgent:
    obs_dim: int
    action_dim: int = 1
    action_bound: float = 2.0
    config: SacConfig = field(default_factory=SacConfig)
    seed: int = 0

    def __post_init__(self):
        cfg = self.config
        self.rng = np.random.default_rng(self.seed)
        self.policy = GaussianPolicy(
            init_mlp([self.obs_dim, *cfg.hidden, 2 * self.action_dim], cfg.activation, self.rng),
            self.action_dim, self.action_bound, cfg.log_std_min, cfg.log_std_max)
        q_dims = [self.obs_dim + self.action_dim, *cfg.hidden, 1]
        self.q1 = init_mlp(q_dims, cfg.activation, self.rng)
        self.q2 = init_mlp(q_dims, cfg.activation, self.rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.array([math.log(cfg.init_alpha)])
        self.target_entropy = -float(self.action_dim) if cfg.target_entropy is None else cfg.target_entropy
        self.policy_opt = Adam(cfg.lr)
        self.q_opt = Adam(cfg.lr)
        self.alpha_opt = Adam(cfg.lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    @property
    def gamma(self) -> float:
        return self.config.gamma

    def bundle(self, copy: bool = False) -> ValueBundle:
        b = ValueBundle(self.policy, [self.q1, self.q2, self.q1_target, self.q2_target])
        return b.copy() if copy else b

    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        s = np.atleast_2d(obs)
        if deterministic:
            return self.policy.mean_action_np(s)[0]
        a, _ = self.policy.sample_np(s, self.rng.standard_normal((s.shape[0], self.action_dim)))
        return a[0]

    def hard_update_targets(self) -> None:
        self.q1_target.load_params(self.q1.params)
        self.q2_target.load_params(self.q2.params)

    def polyak_update(self) -> None:
        tau = self.config.tau
        for tgt, src in ((self.q1_target, self.q1), (self.q2_target, self.q2)):
            for pt, ps in zip(tgt.params, src.params):
                pt *= 1.0 - tau
                pt += tau * ps

    def save(self, directory) -> None:
        directory = Path(directory)
        self.bundle().save(directory)
        atomic_write_text(directory / "alpha.json", json.dumps({"log_alpha": float(self.log_alpha[0])}))


def policy_sample(agent: SacAgent, s: np.ndarray, mode: str = "stochastic",
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if not np.all(np.isfinite(s)):
        raise ad.NonFiniteError("policy_sample", None)
    p = agent.policy
    if mode == "mean":
        h = p.net.forward_np(s)
        u = h[:, :p.action_dim]
        return np.tanh(u) * p.action_bound, p.log_prob_at(s, u)
    if mode == "stochastic":
        rng = agent.rng if rng is None else rng
        return p.sample_np(s, rng.standard_normal((s.shape[0], p.action_dim)))
    raise ValueError(f"unknown sampling mode {mode!r}")


def state_value(agent: SacAgent, s: np.ndarray, which: int) -> np.ndarray:
    return agent.bundle().value_np(s, which)


def _q(net: Mlp, s, a, params=None) -> Tensor:
    q = net(ad.concat([ad.as_tensor(s), a], axis=1), params)
    return ad.reshape(q, (q.shape[0],))


def critic_target(agent: SacAgent, batch: Batch, noise: np.ndarray, gamma: float | None = None) -> np.ndarray:
    gamma = agent.gamma if gamma is None else gamma
    a2, logp2 = agent.policy.sample_np(batch.s_next, noise)
    x = np.concatenate([batch.s_next, a2], axis=1)
    q_t = np.minimum(agent.q1_target.forward_np(x)[:, 0], agent.q2_target.forward_np(x)[:, 0])
    not_done = 1.0 - batch.done.astype(np.float64)
    return batch.r + gamma * not_done * (q_t - agent.alpha * logp2)


def critic_loss(agent: SacAgent, batch: Batch, y: np.ndarray) -> float:
    x = np.concatenate([batch.s, batch.a], axis=1)
    return float(np.mean((agent.q1.forward_np(x)[:, 0] - y) ** 2) + np.mean((agent.q2.forward_np(x)[:, 0] - y) ** 2))


def sac_update(agent: SacAgent, batch: Batch, gamma: float | None = None,
               update_actor: bool = True) -> dict[str, float]:
    """One SAC step on ``batch``: critics, actor, temperature, then Polyak targets."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    k = agent.action_dim
    y = critic_target(agent, batch, agent.rng.standard_normal((n, k)), gamma)

    g = Graph()
    q_leaves = g.leaves_for(agent.q1.params + agent.q2.params)
    n1 = len(agent.q1.params)
    sa = np.concatenate([batch.s, batch.a], axis=1)
    q1 = ad.reshape(agent.q1(sa, q_leaves[:n1]), (n,))
    q2 = ad.reshape(agent.q2(sa, q_leaves[n1:]), (n,))
    loss_q = ad.add(ad.mean(ad.square(ad.sub(q1, y))), ad.mean(ad.square(ad.sub(q2, y))))
    grads = backward(g, loss_q)
    agent.q_opt.step(agent.q1.params + agent.q2.params, [grads[p] for p in q_leaves])
    out = {"critic": loss_q.item()}

    if update_actor:
        g = Graph()
        p_leaves = g.leaves_for(agent.policy.net.params)
        a, logp = agent.policy.sample(batch.s, agent.rng.standard_normal((n, k)), p_leaves)
        q_min = ad.minimum(_q(agent.q1, batch.s, a), _q(agent.q2, batch.s, a))
        loss_pi = ad.mean(ad.sub(ad.mul(logp, agent.alpha), q_min))
        grads = backward(g, loss_pi)
        agent.policy_opt.step(agent.policy.net.params, [grads[p] for p in p_leaves])

        # d/dlog_alpha of -log_alpha * mean(logp + target_entropy)
        g_alpha = -np.array([np.mean(logp.data) + agent.target_entropy])
        agent.alpha_opt.step([agent.log_alpha], [g_alpha])
        out["actor"] = loss_pi.item()
        out["alpha"] = float(-agent.log_alpha[0] * (np.mean(logp.data) + agent.target_entropy))

    agent.polyak_update()
    agent.updates += 1
    return out


def load_agent_bundle(directory) -> tuple[ValueBundle, float]:
    b = ValueBundle.load(directory)
    alpha_path = Path(directory) / "alpha.json"
    log_alpha = json.loads(alpha_path.read_text())["log_alpha"] if alpha_path.exists() else 0.0
    return b, math.exp(log_alpha)

