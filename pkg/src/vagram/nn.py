"""MLPs, dynamics models and optimizers on top of :mod:`vagram.autodiff`.

Networks keep their parameters as plain float64 arrays. To differentiate,
wrap them as leaves of a graph and pass the leaves back in::

    g = Graph()
    leaves = g.leaves_for(net.params)
    loss = ad.mean(ad.square(net(x, leaves)))
    grads = backward(g, loss)
    opt.step(net.params, [grads[p] for p in leaves])
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_SCHEMA_VERSION = 1

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 0.5


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = {
    "relu": (ad.relu, lambda x: np.maximum(x, 0.0)),
    "silu": (ad.silu, lambda x: x * _np_sigmoid(x)),
    "tanh": (ad.tanh, np.tanh),
}


@dataclass
class Mlp:
    layer_dims: list[int]
    activation: str
    params: list[np.ndarray]  # W0, b0, W1, b1, ...; W is (d_in, d_out)

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.params) != 2 * (len(self.layer_dims) - 1):
            raise ValueError("parameter list does not match layer_dims")
        for i, (d_in, d_out) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            if self.params[2 * i].shape != (d_in, d_out) or self.params[2 * i + 1].shape != (d_out,):
                raise ValueError(f"layer {i} parameters do not conform to dims {d_in}->{d_out}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def __call__(self, x, params: Sequence | None = None) -> Tensor:
        ps = self.params if params is None else params
        act = _ACTIVATIONS[self.activation][0]
        h = ad.as_tensor(x)
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, ps[2 * i]), ps[2 * i + 1])
            if i < n_layers - 1:
                h = act(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Untracked forward pass; does not raise on non-finite values."""
        act = _ACTIVATIONS[self.activation][1]
        h = np.asarray(x, dtype=np.float64)
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = act(h)
        return h

    def copy(self) -> Mlp:
        return Mlp(list(self.layer_dims), self.activation, [p.copy() for p in self.params])

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.params, params):
            dst[...] = src


def init_mlp(dims: Sequence[int], activation: str = "relu",
             seed: int | np.random.Generator | None = 0) -> Mlp:
    """Fan-in uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = []
    for d_in, d_out in zip(dims, dims[1:]):
        bound = math.sqrt(1.0 / d_in)
        params.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        params.append(np.zeros(d_out))
    return Mlp(dims, activation, params)


def zero_mlp(dims: Sequence[int], activation: str = "relu") -> Mlp:
    dims = [int(d) for d in dims]
    return Mlp(dims, activation, [a for d_in, d_out in zip(dims, dims[1:])
                                  for a in (np.zeros((d_in, d_out)), np.zeros(d_out))])


# ------------------------------------------------------------------- models


@dataclass
class DeterministicModel:
    """f(s, a) -> s'. ``delta`` mode predicts s' - s."""

    net: Mlp
    state_dim: int
    mode: str = "delta"

    def __post_init__(self):
        if self.mode not in ("delta", "absolute"):
            raise ValueError(f"unknown predict mode {self.mode!r}")
        if self.net.out_dim != self.state_dim:
            raise ValueError("model output dim must equal state dim")

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def predict(self, s, a, params: Sequence | None = None) -> Tensor:
        s = ad.as_tensor(s)
        out = self.net(ad.concat([s, a], axis=1), params)
        return ad.add(s, out) if self.mode == "delta" else out

    def predict_np(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        out = self.net.forward_np(np.concatenate([s, a], axis=1))
        return s + out if self.mode == "delta" else out

    def copy(self) -> DeterministicModel:
        return DeterministicModel(self.net.copy(), self.state_dim, self.mode)


def make_model(state_dim: int, action_dim: int, hidden: Sequence[int] = (16,),
               activation: str = "relu", mode: str = "delta", seed=0) -> DeterministicModel:
    """``hidden=()`` gives a linear model."""
    net = init_mlp([state_dim + action_dim, *hidden, state_dim], activation, seed)
    return DeterministicModel(net, state_dim, mode)


def model_predict(m: DeterministicModel, s, a) -> np.ndarray:
    pred = m.predict(s, a)
    return pred.data


@dataclass
class GaussianEnsemble:
    """Ensemble of MLPs emitting (mean, log-variance) per state dim."""

    members: list[Mlp]
    state_dim: int
    mode: str = "delta"
    log_var_min: float = LOG_VAR_MIN
    log_var_max: float = LOG_VAR_MAX
    fixed_log_var: float | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        for m in self.members:
            if m.out_dim != 2 * self.state_dim:
                raise ValueError("each member must emit mean and log-variance per state dim")

    @property
    def params(self) -> list[np.ndarray]:
        return [p for m in self.members for p in m.params]

    def predict(self, s, a, params: Sequence | None = None) -> list[tuple[Tensor, Tensor]]:
        s = ad.as_tensor(s)
        x = ad.concat([s, a], axis=1)
        d = self.state_dim
        out = []
        offset = 0
        for m in self.members:
            n = len(m.params)
            ps = None if params is None else params[offset:offset + n]
            offset += n
            h = m(x, ps)
            mu = ad.columns(h, 0, d)
            if self.mode == "delta":
                mu = ad.add(s, mu)
            if self.fixed_log_var is not None:
                log_var = ad.as_tensor(np.full((h.shape[0], d), self.fixed_log_var))
            else:
                log_var = ad.clip(ad.columns(h, d, 2 * d), self.log_var_min, self.log_var_max)
            out.append((mu, log_var))
        return out

    def predict_np(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        """Mean and log-variance stacked over members: (E, B, d) each."""
        x = np.concatenate([s, a], axis=1)
        d = self.state_dim
        mus, lvs = [], []
        for m in self.members:
            h = m.forward_np(x)
            mu = h[:, :d] + (s if self.mode == "delta" else 0.0)
            if self.fixed_log_var is not None:
                lv = np.full_like(mu, self.fixed_log_var)
            else:
                lv = np.clip(h[:, d:], self.log_var_min, self.log_var_max)
            mus.append(mu)
            lvs.append(lv)
        return np.stack(mus), np.stack(lvs)


def make_ensemble(state_dim: int, action_dim: int, n_members: int = 7,
                  hidden: Sequence[int] = (200, 200, 200), activation: str = "silu",
                  mode: str = "delta", seed=0) -> GaussianEnsemble:
    if n_members < 1:
        raise ValueError("ensemble needs at least one member")
    rng = np.random.default_rng(seed)
    members = [init_mlp([state_dim + action_dim, *hidden, 2 * state_dim], activation, rng)
               for _ in range(n_members)]
    return GaussianEnsemble(members, state_dim, mode)


def ensemble_nll(e: GaussianEnsemble, s, a, s_next, params: Sequence | None = None) -> Tensor:
    """Mean over members and samples of sum_d [(mu-s')^2 / var + log var]."""
    if np.shape(s)[0] == 0:
        raise ValueError("empty batch")
    total = None
    for mu, log_var in e.predict(s, a, params):
        err = ad.square(ad.sub(mu, s_next))
        per_sample = ad.sum(ad.add(ad.mul(err, ad.exp(ad.neg(log_var))), log_var), axis=1)
        term = ad.mean(per_sample)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(e.members))


# --------------------------------------------------------------- optimizers


@dataclass
class Sgd:
    lr: float = 1e-3

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        _check_grads(params, grads)
        for p, g in zip(params, grads):
            p -= self.lr * g
        return params


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        _check_grads(params, grads)
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def optimizer_step(opt, params, grads):
    return opt.step(params, grads)


def _check_grads(params, grads):
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ad.ShapeError("optimizer_step", p.shape, np.shape(g))
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("optimizer_step", None)


# --------------------------------------------------------------- checkpoint


def mlp_to_dict(net: Mlp) -> dict:
    layers = [{"weight": net.params[2 * i].tolist(), "bias": net.params[2 * i + 1].tolist()}
              for i in range(len(net.layer_dims) - 1)]
    return {"schema_version": CHECKPOINT_SCHEMA_VERSION, "layer_dims": list(net.layer_dims),
            "activation": net.activation, "arrays": layers}


def mlp_from_dict(doc: dict) -> Mlp:
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    params = []
    for layer in doc["arrays"]:
        params.append(np.array(layer["weight"], dtype=np.float64))
        params.append(np.array(layer["bias"], dtype=np.float64))
    return Mlp([int(d) for d in doc["layer_dims"]], doc["activation"], params)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_mlp(net: Mlp, path) -> None:
    atomic_write_text(path, json.dumps(mlp_to_dict(net)))


def load_mlp(path) -> Mlp:
    with open(path) as f:
        return mlp_from_dict(json.load(f))
