"""Model-learning objectives and value-gradient preprocessing.

Every loss is a mean over samples. Predictions may be autodiff tensors (the
loss is then differentiable with respect to the model); value functions are
callables mapping a (B, d) tensor of states to a (B,) tensor of values.
Value gradients ``g`` are constant (B, d) arrays evaluated at the observed
next states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .agent import ValueBundle

ValueFn = Callable[[Tensor], Tensor]

LOSS_KINDS = ("mse", "nll", "itervaml", "itervaml_mse", "taylor_vaml", "vagram", "vagram_bound",
              "value_weighted_mse", "sac_vaml")
# losses that need grad_s V at the observed next states
GRADIENT_LOSSES = ("taylor_vaml", "vagram", "vagram_bound")
# losses that evaluate V itself inside the objective
VALUE_LOSSES = ("itervaml", "itervaml_mse", "value_weighted_mse", "sac_vaml")

VALUE_WEIGHT_EPS = 1e-6


@dataclass
class LossSpec:
    kind: str = "vagram"
    lam: float = 0.01
    M: float = 1.0
    K: int = 1
    clip_percentile: float | None = 95.0
    vf_indices: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.clip_percentile is not None and not 0 < self.clip_percentile <= 100:
            raise ValueError("clip percentile must lie in (0, 100]")
        self.vf_indices = tuple(int(i) for i in self.vf_indices)

    @property
    def uses_gradients(self) -> bool:
        return self.kind in GRADIENT_LOSSES

    @property
    def uses_values(self) -> bool:
        return self.kind in VALUE_LOSSES


def _diff(f_pred, s_next) -> Tensor:
    f_pred, s_next = ad.as_tensor(f_pred), ad.as_tensor(s_next)
    if f_pred.shape != s_next.shape:
        raise ad.ShapeError("model loss", f_pred.shape, s_next.shape)
    return ad.sub(f_pred, s_next)


def _check_g(g, d: Tensor) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != d.shape:
        raise ad.ShapeError("value gradients", g.shape, d.shape)
    return g


def mse_loss(f_pred, s_next) -> Tensor:
    d = _diff(f_pred, s_next)
    return ad.mean(ad.sum(ad.square(d), axis=1))


def itervaml_loss(V: ValueFn, f_pred, s_next) -> Tensor:
    _diff(f_pred, s_next)
    return ad.mean(ad.square(ad.sub(V(ad.as_tensor(s_next)), V(ad.as_tensor(f_pred)))))


def taylor_vaml_loss(g, f_pred, s_next) -> Tensor:
    d = _diff(f_pred, s_next)
    g = _check_g(g, d)
    return ad.mean(ad.square(ad.sum(ad.mul(d, g), axis=1)))


def vagram_loss(g, f_pred, s_next) -> Tensor:
    """Per-sample diagonal rescaling of the squared error by g**2.

    The dim(S) factor of the Cauchy-Schwarz bound is left out.
    """
    d = _diff(f_pred, s_next)
    g = _check_g(g, d)
    return ad.mean(ad.sum(ad.mul(ad.square(d), np.square(g)), axis=1))


def vagram_bound_loss(g, f_pred, s_next, M: float) -> Tensor:
    if M < 0:
        raise ValueError("M must be >= 0")
    d = _diff(f_pred, s_next)
    g = _check_g(g, d)
    first = ad.mul(ad.square(ad.sum(ad.mul(d, g), axis=1)), 2.0)
    second = ad.mul(ad.square(ad.sum(ad.square(d), axis=1)), M * M / 2.0)
    return ad.mean(ad.add(first, second))


def itervaml_mse_loss(V: ValueFn, f_pred, s_next, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return ad.add(itervaml_loss(V, f_pred, s_next), ad.mul(mse_loss(f_pred, s_next), lam))


def value_weighted_mse_loss(V: ValueFn, s_next, f_pred, eps: float = VALUE_WEIGHT_EPS) -> Tensor:
    d = _diff(f_pred, s_next)
    v = V(Tensor(ad.as_tensor(s_next).data)).data
    w = 1.0 / (np.abs(v) + eps)
    return ad.mean(ad.mul(ad.sum(ad.square(d), axis=1), w))


def entropy_estimate(bundle: ValueBundle, s, noise: np.ndarray) -> Tensor:
    """(1/K) sum_k log pi(a_k|s) with a_k = squash(mu(s) + sigma(s) * noise[k]).

    ``noise`` has shape (K, B, action_dim).
    """
    s = ad.as_tensor(s)
    total = None
    for xi in noise:
        _, logp = bundle.policy.sample(s, xi)
        total = logp if total is None else ad.add(total, logp)
    return ad.mul(total, 1.0 / noise.shape[0])


def sac_vaml_loss(bundle: ValueBundle, f_pred, s_next, K: int, which: int = 0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Value-matching with the policy's entropy term; the same noise drives both estimates."""
    if K < 1:
        raise ValueError("K must be >= 1")
    _diff(f_pred, s_next)
    f_pred, s_next = ad.as_tensor(f_pred), ad.as_tensor(s_next)
    rng = np.random.default_rng(0) if rng is None else rng
    noise = rng.standard_normal((K, s_next.shape[0], bundle.policy.action_dim))
    env_side = ad.sub(bundle.value(s_next, which), entropy_estimate(bundle, s_next, noise))
    model_side = ad.sub(bundle.value(f_pred, which), entropy_estimate(bundle, f_pred, noise))
    return ad.mean(ad.square(ad.sub(env_side, model_side)))


# ------------------------------------------------------- gradient handling


def nearest_rank(values: np.ndarray, p: float) -> float:
    """Smallest sorted element whose rank is >= ceil(p/100 * n)."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[rank - 1])


def clip_gradients(grads: np.ndarray, p: float) -> tuple[np.ndarray, float]:
    """Rescale rows whose L2 norm exceeds the nearest-rank p-th percentile norm."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] == 0:
        raise ValueError("clip_gradients needs a non-empty (B, d) array")
    if not 0 < p <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    norms = np.sqrt(np.sum(grads * grads, axis=1))
    t = nearest_rank(norms, p)
    out = grads.copy()
    over = norms > t
    out[over] = grads[over] * (t / norms[over])[:, None]
    return out, t


@dataclass
class PreparedBatch:
    """A model-training batch with raw value gradients at s' for each selected VF.

    ``thresholds`` holds the clip threshold per VF from the last loss evaluation.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    grads: np.ndarray | None = None  # (n_vf, B, d)
    thresholds: list[float] = field(default_factory=list)

    def __len__(self):
        return self.s.shape[0]

    def __getitem__(self, idx) -> PreparedBatch:
        g = None if self.grads is None else self.grads[:, idx]
        return PreparedBatch(self.s[idx], self.a[idx], self.s_next[idx], g)


def prepare_batch(spec: LossSpec, bundle: ValueBundle | None, s, a, s_next) -> PreparedBatch:
    """Evaluate value gradients once for a whole dataset; minibatches index into it."""
    pb = PreparedBatch(np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64),
                       np.asarray(s_next, dtype=np.float64))
    if spec.uses_gradients:
        if bundle is None:
            raise ValueError(f"loss {spec.kind!r} needs a value bundle")
        if not spec.vf_indices:
            raise ValueError("no value functions selected")
        pb.grads = bundle.gradients(pb.s_next, spec.vf_indices)
    return pb


def single_vf_loss(spec: LossSpec, f_pred, s_next, g=None, V: ValueFn | None = None,
                   bundle: ValueBundle | None = None, which: int = 0,
                   rng: np.random.Generator | None = None) -> Tensor:
    kind = spec.kind
    if kind == "mse":
        return mse_loss(f_pred, s_next)
    if kind == "taylor_vaml":
        return taylor_vaml_loss(g, f_pred, s_next)
    if kind == "vagram":
        return vagram_loss(g, f_pred, s_next)
    if kind == "vagram_bound":
        return vagram_bound_loss(g, f_pred, s_next, spec.M)
    if kind == "itervaml":
        return itervaml_loss(V, f_pred, s_next)
    if kind == "itervaml_mse":
        return itervaml_mse_loss(V, f_pred, s_next, spec.lam)
    if kind == "value_weighted_mse":
        return value_weighted_mse_loss(V, s_next, f_pred)
    if kind == "sac_vaml":
        return sac_vaml_loss(bundle, f_pred, s_next, spec.K, which, rng)
    raise ValueError(f"loss {kind!r} is not a single-prediction loss")


def multi_vf_loss(spec: LossSpec, bundle: ValueBundle | None, batch: PreparedBatch, f_pred,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Sum of the per-VF losses over ``spec.vf_indices``; MSE ignores the bundle.

    Value gradients are clipped per VF on this batch before use.
    """
    if spec.kind == "mse":
        return mse_loss(f_pred, batch.s_next)
    if not spec.vf_indices:
        raise ValueError("no value functions selected")
    if spec.uses_values and bundle is None:
        raise ValueError(f"loss {spec.kind!r} needs a value bundle")
    total = None
    batch.thresholds = []
    for j, which in enumerate(spec.vf_indices):
        g = None
        if batch.grads is not None:
            g = batch.grads[j]
            if spec.clip_percentile is not None:
                g, t = clip_gradients(g, spec.clip_percentile)
                batch.thresholds.append(t)
        V = bundle.evaluator(which) if bundle is not None else None
        term = single_vf_loss(spec, f_pred, batch.s_next, g=g, V=V, bundle=bundle, which=which, rng=rng)
        total = term if total is None else ad.add(total, term)
    return total


def eval_vaml_error(V: Callable[[np.ndarray], np.ndarray], model, s, a, s_next) -> float:
    """Mean squared value difference between real and predicted next states, untracked."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("empty held-out set")
    pred = model.predict_np(s, np.asarray(a, dtype=np.float64))
    return float(np.mean((V(np.asarray(s_next)) - V(pred)) ** 2))


def eval_mse_error(model, s, a, s_next) -> float:
    pred = model.predict_np(np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64))
    return float(np.mean(np.sum((pred - s_next) ** 2, axis=1)))
