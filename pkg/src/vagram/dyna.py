"""Replay buffers, model training, model rollouts and the Dyna training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .agent import SacAgent, SacConfig, ValueBundle, sac_update
from .autodiff import Graph, backward
from .env import Batch, EnvSpec, PendulumEnv, wrapped_step, DistractorSpec, EPISODE_LENGTH
from .modelloss import LossSpec, PreparedBatch, eval_mse_error, eval_vaml_error, multi_vf_loss, prepare_batch
from .nn import Adam, DeterministicModel, GaussianEnsemble, Mlp, ensemble_nll, init_mlp, make_ensemble, make_model

MAX_MODEL_FRACTION = 0.95


class ReplayBuffer:
    """FIFO ring of transitions with seeded uniform sampling (with replacement)."""

    def __init__(self, capacity: int, seed=0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self._data: dict[str, np.ndarray] | None = None
        self._pos = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _alloc(self, b: Batch):
        self._data = {
            "s": np.zeros((self.capacity, b.s.shape[1])),
            "a": np.zeros((self.capacity, b.a.shape[1])),
            "r": np.zeros(self.capacity),
            "s_next": np.zeros((self.capacity, b.s_next.shape[1])),
            "done": np.zeros(self.capacity, dtype=bool),
        }

    def push(self, s, a, r, s_next, done=False) -> None:
        self.push_batch(Batch(np.atleast_2d(s), np.atleast_2d(a), np.atleast_1d(np.asarray(r, dtype=np.float64)),
                              np.atleast_2d(s_next), np.atleast_1d(done)))

    def push_batch(self, b: Batch) -> None:
        n = len(b)
        if n == 0:
            return
        if self._data is None:
            self._alloc(b)
        if n > self.capacity:
            b = b[n - self.capacity:]
            n = self.capacity
        idx = (self._pos + np.arange(n)) % self.capacity
        for name in ("s", "a", "r", "s_next", "done"):
            self._data[name][idx] = getattr(b, name)
        self._pos = (self._pos + n) % self.capacity
        self._size = min(self._size + n, self.capacity)

    def _take(self, idx) -> Batch:
        d = self._data
        return Batch(d["s"][idx], d["a"][idx], d["r"][idx], d["s_next"][idx], d["done"][idx])

    def sample_indices(self, n: int) -> np.ndarray:
        if self._size == 0:
            raise IndexError("sample from an empty buffer")
        return self.rng.integers(0, self._size, size=n)

    def sample_batch(self, n: int) -> Batch:
        return self._take(self.sample_indices(n))

    def all(self) -> Batch:
        """Stored transitions, oldest first."""
        if self._size == 0:
            raise IndexError("empty buffer")
        start = self._pos if self._size == self.capacity else 0
        return self._take((start + np.arange(self._size)) % self.capacity)


# ----------------------------------------------------------- model training


@dataclass
class RewardModel:
    net: Mlp

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden=(64, 64), activation="silu", seed=0):
        return cls(init_mlp([obs_dim + action_dim, *hidden, 1], activation, seed))

    def predict(self, s, a, params=None):
        out = self.net(ad.concat([ad.as_tensor(s), a], axis=1), params)
        return ad.reshape(out, (out.shape[0],))

    def predict_np(self, s, a) -> np.ndarray:
        return self.net.forward_np(np.concatenate([s, a], axis=1))[:, 0]


@dataclass
class AnalyticModel:
    """The true environment step dressed as a model (for oracle comparisons)."""

    spec: EnvSpec
    distractor: DistractorSpec | None = None

    def predict_np(self, s, a) -> np.ndarray:
        return wrapped_step(s, np.asarray(a)[:, 0], self.spec, self.distractor)[0]

    def reward_np(self, s, a) -> np.ndarray:
        return wrapped_step(s, np.asarray(a)[:, 0], self.spec, self.distractor)[1]


@dataclass
class AnalyticReward:
    model: AnalyticModel

    def predict_np(self, s, a) -> np.ndarray:
        return self.model.reward_np(s, a)


@dataclass
class ModelCriterion:
    max_steps: int = 500
    patience: int = 5
    eval_every: int = 25
    batch_size: int = 128
    holdout_frac: float = 0.1
    max_holdout: int = 1000


@dataclass
class TrainResult:
    curve: list[float]
    heldout: list[float]
    steps: int
    stopped_early: bool
    thresholds: list[float]
    holdout: Batch | None


class ModelTrainingError(RuntimeError):
    def __init__(self, step: int, kind: str, detail: str = ""):
        self.step = step
        self.kind = kind
        super().__init__(f"non-finite model loss at step {step} (loss={kind}) {detail}".rstrip())


def _model_loss(model, loss: LossSpec, bundle, pb: PreparedBatch, params, rng):
    if loss.kind == "nll":
        return ensemble_nll(model, pb.s, pb.a, pb.s_next, params)
    pred = model.predict(pb.s, pb.a, params)
    return multi_vf_loss(loss, bundle, pb, pred, rng)


def train_model(model, data: Batch, bundle: ValueBundle | None, loss: LossSpec,
                criterion: ModelCriterion | None = None, opt=None, rng=None,
                reward_model: RewardModel | None = None, reward_opt=None) -> TrainResult:
    """Minibatch descent on the chosen model loss until max steps or patience runs out.

    The reward model (if given) is regressed on the same minibatches.
    """
    criterion = criterion or ModelCriterion()
    rng = np.random.default_rng(0) if rng is None else rng
    opt = Adam(1e-3) if opt is None else opt
    n = len(data)
    if n < 1:
        raise ValueError("no data to train the model on")
    if loss.kind == "nll" and not isinstance(model, GaussianEnsemble):
        raise TypeError("nll loss needs a GaussianEnsemble")

    n_hold = min(criterion.max_holdout, int(n * criterion.holdout_frac)) if n >= 10 else 0
    perm = rng.permutation(n)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    train = data[train_idx]
    hold = data[hold_idx] if n_hold else train
    pb_train = prepare_batch(loss, bundle, train.s, train.a, train.s_next)
    pb_hold = prepare_batch(loss, bundle, hold.s, hold.a, hold.s_next)

    curve, heldout, thresholds = [], [], []
    best, bad, stopped = math.inf, 0, False
    step = 0
    for step in range(1, criterion.max_steps + 1):
        idx = rng.integers(0, len(pb_train), size=min(criterion.batch_size, len(pb_train)))
        mb = pb_train[idx]
        g = Graph()
        leaves = g.leaves_for(model.params)
        try:
            value = _model_loss(model, loss, bundle, mb, leaves, rng)
        except ad.NonFiniteError as e:
            raise ModelTrainingError(step, loss.kind, f"({e})") from e
        if not math.isfinite(value.item()):
            raise ModelTrainingError(step, loss.kind)
        grads = backward(g, value)
        opt.step(model.params, [grads[p] for p in leaves])
        curve.append(value.item())
        thresholds = list(mb.thresholds)

        if reward_model is not None:
            rg = Graph()
            r_leaves = rg.leaves_for(reward_model.net.params)
            r_pred = reward_model.predict(mb.s, mb.a, r_leaves)
            r_loss = ad.mean(ad.square(ad.sub(r_pred, train.r[idx])))
            r_grads = backward(rg, r_loss)
            (reward_opt or opt).step(reward_model.net.params, [r_grads[p] for p in r_leaves])

        if step % criterion.eval_every == 0:
            h = _model_loss(model, loss, bundle, pb_hold, None, rng).item()
            heldout.append(h)
            if h < best:
                best, bad = h, 0
            else:
                bad += 1
                if bad >= criterion.patience:
                    stopped = True
                    break
    return TrainResult(curve, heldout, step, stopped, thresholds, hold if n_hold else None)


# ----------------------------------------------------------------- rollouts


def _policy_actions(agent: SacAgent, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a, _ = agent.policy.sample_np(s, rng.standard_normal((s.shape[0], agent.action_dim)))
    return a


def model_rollout(model, reward_model, agent: SacAgent, buffer_env: ReplayBuffer,
                  buffer_model: ReplayBuffer, M: int, H: int = 1,
                  rng: np.random.Generator | None = None, policy=None) -> tuple[int, int]:
    """Branch M rollouts of H steps from real states. Returns (added, dropped branches).

    ``policy`` overrides the agent's stochastic policy: a callable (s, rng) -> a.
    """
    if H < 1:
        raise ValueError("rollout horizon must be >= 1")
    if M <= 0:
        return 0, 0
    rng = np.random.default_rng(0) if rng is None else rng
    act = policy or (lambda s, r: _policy_actions(agent, s, r))
    s = buffer_env.sample_batch(M).s
    added = dropped = 0
    with np.errstate(all="ignore"):
        for _ in range(H):
            a = act(s, rng)
            if isinstance(model, GaussianEnsemble):
                mu, lv = model.predict_np(s, a)
                member = rng.integers(0, mu.shape[0], size=s.shape[0])
                rows = np.arange(s.shape[0])
                sp = mu[member, rows] + np.exp(0.5 * lv[member, rows]) * rng.standard_normal(mu.shape[1:])
            else:
                sp = model.predict_np(s, a)
            r = reward_model.predict_np(s, a)
            ok = np.all(np.isfinite(sp), axis=1) & np.isfinite(r)
            dropped += int((~ok).sum())
            if ok.any():
                buffer_model.push_batch(Batch(s[ok], a[ok], r[ok], sp[ok], np.zeros(int(ok.sum()), dtype=bool)))
                added += int(ok.sum())
            s = sp[ok]
            if s.shape[0] == 0:
                break
    return added, dropped


def ramp_fraction(epoch: int, ramp_epochs: int, start: float = 0.0,
                  end: float = MAX_MODEL_FRACTION) -> float:
    if ramp_epochs <= 0:
        frac = end
    else:
        frac = start + (end - start) * min(1.0, epoch / ramp_epochs)
    return min(frac, MAX_MODEL_FRACTION)


def mixed_batch(buffer_env: ReplayBuffer, buffer_model: ReplayBuffer, frac_model: float,
                n: int) -> tuple[Batch, int]:
    """round(n * frac_model) model transitions plus env transitions.

    Returns the batch and 1 if a source was empty and the other filled in, else 0.
    """
    if not 0.0 <= frac_model <= 1.0:
        raise ValueError("model fraction must lie in [0, 1]")
    n_model = int(math.floor(n * frac_model + 0.5))
    fallback = 0
    if n_model > 0 and len(buffer_model) == 0:
        n_model, fallback = 0, 1
    elif n - n_model > 0 and len(buffer_env) == 0:
        n_model, fallback = n, 1
    parts = []
    if n - n_model > 0:
        parts.append(buffer_env.sample_batch(n - n_model))
    if n_model > 0:
        parts.append(buffer_model.sample_batch(n_model))
    return (parts[0] if len(parts) == 1 else Batch.concat(parts)), fallback


# -------------------------------------------------------------- Dyna loop


@dataclass
class DynaConfig:
    epochs: int = 40
    env_steps: int = 200
    rollouts: int = 32
    horizon: int = 1
    policy_updates: int = 1
    batch_size: int = 128
    init_steps: int = 1000
    model_max_steps: int = 500
    model_patience: int = 5
    model_eval_every: int = 25
    model_batch_size: int = 128
    model_lr: float = 1e-3
    model_hidden: tuple[int, ...] = (64, 64)
    model_activation: str = "silu"
    model_mode: str = "delta"
    ensemble_size: int = 1
    reward_hidden: tuple[int, ...] = (64, 64)
    mix_start: float = 0.0
    mix_end: float = MAX_MODEL_FRACTION
    ramp_epochs: int = 10
    env_capacity: int = 100_000
    model_capacity: int = 20_000
    return_window: int = 10
    baseline_episodes: int = 10
    model_free: bool = False
    perfect_model: bool = False
    loss: LossSpec = field(default_factory=LossSpec)
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        for name in ("epochs", "env_steps", "horizon", "policy_updates", "batch_size",
                     "model_max_steps", "model_patience", "model_eval_every", "model_batch_size",
                     "ensemble_size", "env_capacity", "model_capacity", "return_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rollouts < 0 or self.init_steps < 0 or self.baseline_episodes < 0:
            raise ValueError("counts must be non-negative")
        if not (0.0 <= self.mix_start <= 1.0 and 0.0 <= self.mix_end <= 1.0):
            raise ValueError("mix fractions must lie in [0, 1]")


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    epoch: int
    env_steps: int
    episodes: int
    return_mean: float | None
    return_min: float | None
    return_max: float | None
    random_baseline: float | None
    model_loss_train: float | None
    model_loss_heldout: float | None
    vaml_error_q1: float | None
    vaml_error_q2: float | None
    vaml_error_q1_target: float | None
    vaml_error_q2_target: float | None
    model_mse_heldout: float | None
    clip_threshold: float | None
    frac_model: float
    rollout_drops: int
    mix_fallbacks: int
    critic_loss: float | None
    wall_seconds: float | None = None


# wall-clock time is kept out of the CSV so reruns are byte-identical
METRICS_COLUMNS = [f.name for f in fields(MetricsRow) if f.name != "wall_seconds"]


def random_policy_return(spec: EnvSpec, episodes: int, seed) -> float:
    env = PendulumEnv(spec, seed=seed)
    rng = np.random.default_rng(seed)
    totals = []
    for _ in range(episodes):
        env.reset()
        total, trunc = 0.0, False
        while not trunc:
            _, r, _, trunc = env.step(rng.uniform(-spec.action_bound, spec.action_bound, size=1))
            total += r
        totals.append(total)
    return float(np.mean(totals))


def _build_model(cfg: DynaConfig, obs_dim: int, action_dim: int, seed):
    if cfg.loss.kind == "nll":
        return make_ensemble(obs_dim, action_dim, cfg.ensemble_size, cfg.model_hidden,
                             cfg.model_activation, cfg.model_mode, seed)
    return make_model(obs_dim, action_dim, cfg.model_hidden, cfg.model_activation, cfg.model_mode, seed)


def dyna_train(config: DynaConfig, env_spec: EnvSpec | None = None, seed: int = 0,
               run_id: str = "run",
               on_epoch: Callable[[int, SacAgent], None] | None = None) -> Iterator[MetricsRow]:
    """Model learning, short branched rollouts and SAC on mixed data; one row per epoch.

    ``on_epoch(epoch, agent)`` runs after each epoch's environment steps, before the row is yielded.
    """
    cfg = config
    env_spec = env_spec or EnvSpec()
    ss = np.random.SeedSequence(seed)
    s_env, s_agent, s_model, s_buf, s_roll, s_base = (int(c.generate_state(1)[0]) for c in ss.spawn(6))
    env = PendulumEnv(env_spec, seed=s_env)
    obs_dim, act_dim = env_spec.obs_dim, env_spec.action_dim
    agent = SacAgent(obs_dim, act_dim, env_spec.action_bound, cfg.sac, seed=s_agent)
    model_rng = np.random.default_rng(s_model)
    roll_rng = np.random.default_rng(s_roll)
    buf_env = ReplayBuffer(cfg.env_capacity, seed=s_buf)
    buf_model = ReplayBuffer(cfg.model_capacity, seed=s_buf + 1)

    use_model = not cfg.model_free
    if cfg.perfect_model:
        model = AnalyticModel(env_spec, env.distractor)
        reward_model = AnalyticReward(model)
    elif use_model:
        model = _build_model(cfg, obs_dim, act_dim, model_rng)
        reward_model = RewardModel.create(obs_dim, act_dim, cfg.reward_hidden, cfg.model_activation, model_rng)
        model_opt, reward_opt = Adam(cfg.model_lr), Adam(cfg.model_lr)
    criterion = ModelCriterion(cfg.model_max_steps, cfg.model_patience, cfg.model_eval_every, cfg.model_batch_size)

    baseline = random_policy_return(env_spec, cfg.baseline_episodes, s_base) if cfg.baseline_episodes else None
    returns: list[float] = []
    obs = env.reset()
    ep_return = 0.0
    explore_rng = np.random.default_rng(s_env + 1)

    def env_step(action):
        nonlocal obs, ep_return
        nxt, r, done, trunc = env.step(action)
        buf_env.push(obs, action, r, nxt, done)
        ep_return += r
        if done or trunc:
            returns.append(ep_return)
            ep_return = 0.0
            obs = env.reset()
        else:
            obs = nxt

    for _ in range(cfg.init_steps):
        env_step(explore_rng.uniform(-env_spec.action_bound, env_spec.action_bound, size=act_dim))

    total_steps = cfg.init_steps
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        row_loss = row_hold = row_thr = None
        vaml = [None] * 4
        mse_hold = None
        if use_model and not cfg.perfect_model:
            bundle = agent.bundle()
            try:
                res = train_model(model, buf_env.all(), bundle, cfg.loss, criterion, model_opt, model_rng,
                                  reward_model, reward_opt)
            except ModelTrainingError as e:
                raise RuntimeError(f"{run_id}: epoch {epoch}: {e}") from e
            row_loss = res.curve[-1]
            row_hold = min(res.heldout) if res.heldout else None
            row_thr = float(np.mean(res.thresholds)) if res.thresholds else None
            if res.holdout is not None and not isinstance(model, GaussianEnsemble):
                h = res.holdout
                vaml = [eval_vaml_error(lambda x, i=i: bundle.value_np(x, i), model, h.s, h.a, h.s_next)
                        for i in range(4)]
                mse_hold = eval_mse_error(model, h.s, h.a, h.s_next)

        frac = 0.0 if not use_model else ramp_fraction(epoch, cfg.ramp_epochs, cfg.mix_start, cfg.mix_end)
        drops = fallbacks = 0
        critic = []
        for _ in range(cfg.env_steps):
            env_step(agent.act(obs))
            total_steps += 1
            if use_model:
                _, d = model_rollout(model, reward_model, agent, buf_env, buf_model, cfg.rollouts,
                                     cfg.horizon, roll_rng)
                drops += d
            for _ in range(cfg.policy_updates):
                batch, fb = mixed_batch(buf_env, buf_model, frac, cfg.batch_size)
                fallbacks += fb
                critic.append(sac_update(agent, batch)["critic"])

        if on_epoch is not None:
            on_epoch(epoch, agent)
        window = returns[-cfg.return_window:]
        yield MetricsRow(
            run_id=run_id, seed=seed, epoch=epoch, env_steps=total_steps, episodes=len(returns),
            return_mean=float(np.mean(window)) if window else None,
            return_min=float(np.min(window)) if window else None,
            return_max=float(np.max(window)) if window else None,
            random_baseline=baseline, model_loss_train=row_loss, model_loss_heldout=row_hold,
            vaml_error_q1=vaml[0], vaml_error_q2=vaml[1], vaml_error_q1_target=vaml[2],
            vaml_error_q2_target=vaml[3], model_mse_heldout=mse_hold, clip_threshold=row_thr,
            frac_model=frac, rollout_drops=drops, mix_fallbacks=fallbacks,
            critic_loss=float(np.mean(critic)) if critic else None,
            wall_seconds=time.perf_counter() - t0)
