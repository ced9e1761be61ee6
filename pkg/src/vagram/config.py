"""Strict `key = value` config files with `[section]` headers.

Each section maps onto a dataclass below; every key carries a ``doc``
metadata entry, used both for ``resolved_config`` comments and the README.
Lists are comma-separated; ``none`` stands for an absent optional value.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import SacConfig
from .dyna import DynaConfig, ModelCriterion
from .env import EnvSpec
from .modelloss import LOSS_KINDS, LossSpec
from .nn import atomic_write_text

EXPERIMENTS = ("smoke", "mf_snapshots", "model_loss_study", "loss_surface", "dyna_compare")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path=None):
        self.line = line
        where = f"{path or '<config>'}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + msg)


def _doc(text: str, default=dataclasses.MISSING, factory=dataclasses.MISSING):
    if factory is not dataclasses.MISSING:
        return field(default_factory=factory, metadata={"doc": text})
    return field(default=default, metadata={"doc": text})


@dataclass
class ExperimentSection:
    experiment: str = _doc("one of smoke, mf_snapshots, model_loss_study, loss_surface, dyna_compare", "")
    seed: int = _doc("base seed; every random stream derives from it", 0)
    out_dir: str = _doc("output directory (the CLI --out flag overrides it)", "out")


@dataclass
class EnvSection:
    obs_mode: str = _doc("observation encoding: trig (cos, sin, theta_dot) or raw (theta, theta_dot)", "trig")
    distractors: int = _doc("number of appended distractor dimensions", 0)
    distractor_seed: int = _doc("seed of the fixed distractor matrix and reset state", 0)
    gamma: float = _doc("discount factor", 0.99)


@dataclass
class AgentSection:
    hidden: list[int] = _doc("hidden layer widths of policy and critics", factory=lambda: [64, 64])
    activation: str = _doc("relu, silu or tanh", "relu")
    lr: float = _doc("Adam learning rate for policy, critics and temperature", 1e-3)
    tau: float = _doc("Polyak rate of the target critics", 0.005)
    init_alpha: float = _doc("initial entropy temperature", 0.2)


@dataclass
class DynaSection:
    epochs: int = _doc("training epochs", 40)
    env_steps: int = _doc("environment steps per epoch", 200)
    rollouts: int = _doc("model rollouts branched per environment step", 32)
    horizon: int = _doc("model rollout horizon", 1)
    policy_updates: int = _doc("SAC updates per environment step", 1)
    batch_size: int = _doc("SAC minibatch size", 128)
    init_steps: int = _doc("uniformly random exploration steps before the first epoch", 1000)
    model_max_steps: int = _doc("maximum model gradient steps per epoch", 500)
    model_patience: int = _doc("held-out evaluations without improvement before stopping", 5)
    model_eval_every: int = _doc("model steps between held-out evaluations", 25)
    model_batch_size: int = _doc("model minibatch size", 128)
    model_lr: float = _doc("Adam learning rate of model and reward model", 1e-3)
    model_hidden: list[int] = _doc("hidden widths of the dynamics model (empty = linear)", factory=lambda: [64, 64])
    model_activation: str = _doc("dynamics/reward model activation", "silu")
    model_mode: str = _doc("delta or absolute next-state prediction", "delta")
    ensemble_size: int = _doc("members of the Gaussian ensemble (nll loss only)", 1)
    reward_hidden: list[int] = _doc("hidden widths of the reward model", factory=lambda: [64, 64])
    mix_end: float = _doc("final share of model data in SAC batches (capped at 0.95)", 0.95)
    ramp_epochs: int = _doc("epochs over which the model share ramps up linearly from 0", 10)
    env_capacity: int = _doc("environment buffer capacity", 100000)
    model_capacity: int = _doc("model buffer capacity", 20000)
    return_window: int = _doc("episodes in the final-return window", 10)
    baseline_episodes: int = _doc("random-policy episodes for the in-run baseline", 10)


@dataclass
class LossSection:
    kinds: list[str] = _doc("model losses to run: " + ", ".join(LOSS_KINDS), factory=lambda: ["vagram"])
    lam: float = _doc("MSE weight of itervaml_mse", 0.01)
    M: float = _doc("Hessian bound of vagram_bound", 1.0)
    K: int = _doc("action samples of sac_vaml", 1)
    clip_percentile: float | None = _doc("value-gradient clipping percentile, none to disable", 95.0)
    vf_indices: list[int] = _doc("value functions used: 0=q1 1=q2 2=q1_target 3=q2_target",
                                 factory=lambda: [0, 1, 2, 3])


@dataclass
class SnapshotSection:
    epochs: int = _doc("model-free SAC epochs; one value snapshot per epoch", 10)
    steps_per_epoch: int = _doc("environment steps per epoch", 200)
    init_steps: int = _doc("random exploration steps before the first epoch", 200)


@dataclass
class StudySection:
    snapshot_dir: str = _doc("directory holding epoch_XXX snapshot bundles", "")
    first_epoch: int = _doc("snapshot epoch the sequence starts at", 20)
    segments: int = _doc("number of snapshots to iterate through", 10)
    steps_per_segment: int = _doc("model training steps per snapshot", 1000)
    dataset_size: int = _doc("uniform-state training transitions", 10000)
    heldout_size: int = _doc("held-out transitions for evaluation", 2000)
    seeds: int = _doc("model initialisations / dataset draws per configuration", 8)
    architectures: list[str] = _doc("linear and/or mlp16", factory=lambda: ["linear", "mlp16"])
    losses: list[str] = _doc("losses compared", factory=lambda: ["mse", "itervaml", "vagram"])
    optimizer: str = _doc("sgd or adam", "adam")
    lr: float = _doc("model learning rate", 1e-3)
    batch_size: int = _doc("model minibatch size", 128)
    eval_vf: int = _doc("value function the VAML error is measured with", 0)


@dataclass
class SurfaceSection:
    snapshot_dir: str = _doc("raw-mode snapshot to load; empty trains one first", "")
    train_epochs: int = _doc("model-free epochs when no snapshot is given", 10)
    n_theta: int = _doc("grid points along theta", 101)
    n_theta_dot: int = _doc("grid points along theta_dot", 101)
    theta: float = _doc("reference state angle", 0.5)
    theta_dot: float = _doc("reference state angular velocity", -1.0)
    action: float = _doc("reference action", 0.0)
    vf_index: int = _doc("value function shown", 0)


@dataclass
class CompareSection:
    capacities: list[str] = _doc("model capacities: large and/or small", factory=lambda: ["large", "small"])
    large_hidden: list[int] = _doc("hidden widths of the large model", factory=lambda: [64, 64])
    small_hidden: list[int] = _doc("hidden widths of the small model", factory=lambda: [4])
    distractors: list[int] = _doc("distractor counts", factory=lambda: [0, 4, 8])
    seeds: int = _doc("seeds per cell", 5)
    model_free_reference: bool = _doc("also run model-free SAC per (distractors, seed)", True)


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "env": EnvSection,
    "agent": AgentSection,
    "dyna": DynaSection,
    "loss": LossSection,
    "snapshots": SnapshotSection,
    "study": StudySection,
    "surface": SurfaceSection,
    "compare": CompareSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    dyna: DynaSection = field(default_factory=DynaSection)
    loss: LossSection = field(default_factory=LossSection)
    snapshots: SnapshotSection = field(default_factory=SnapshotSection)
    study: StudySection = field(default_factory=StudySection)
    surface: SurfaceSection = field(default_factory=SurfaceSection)
    compare: CompareSection = field(default_factory=CompareSection)

    # -- builders ---------------------------------------------------------

    def env_spec(self, distractors: int | None = None) -> EnvSpec:
        e = self.env
        return EnvSpec(e.obs_mode, e.distractors if distractors is None else distractors,
                       e.distractor_seed, e.gamma)

    def sac_config(self) -> SacConfig:
        a = self.agent
        return SacConfig(hidden=tuple(a.hidden), activation=a.activation, lr=a.lr,
                         gamma=self.env.gamma, tau=a.tau, init_alpha=a.init_alpha)

    def loss_spec(self, kind: str) -> LossSpec:
        s = self.loss
        return LossSpec(kind, s.lam, s.M, s.K, s.clip_percentile, tuple(s.vf_indices))

    def dyna_config(self, kind: str = "mse", **overrides) -> DynaConfig:
        d = dataclasses.asdict(self.dyna)
        for key in ("model_hidden", "reward_hidden"):
            d[key] = tuple(d[key])
        d.update(overrides)
        return DynaConfig(loss=self.loss_spec(kind), sac=self.sac_config(), **d)

    def model_criterion(self) -> ModelCriterion:
        d = self.dyna
        return ModelCriterion(d.model_max_steps, d.model_patience, d.model_eval_every, d.model_batch_size)


# ------------------------------------------------------------------ parsing


def _parse_scalar(tp, raw: str):
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            return raw[1:-1]
        return raw
    raise TypeError(f"unsupported config type {tp}")


def _parse_value(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp)
        raw = raw.strip()
        if raw in ("", "[]"):
            return []
        return [_parse_scalar(inner, x.strip()) for x in raw.strip("[]").split(",")]
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.strip().lower() == "none":
            return None
        return _parse_value(args[0], raw)
    return _parse_scalar(tp, raw.strip())


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _validate(cfg: ExperimentConfig, lines: dict, path):
    def fail(section, key, msg):
        raise ConfigError(f"[{section}] {key}: {msg}", lines.get((section, key)), path)

    if cfg.experiment.experiment not in EXPERIMENTS:
        fail("experiment", "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    if cfg.env.obs_mode not in ("trig", "raw"):
        fail("env", "obs_mode", "must be trig or raw")
    if cfg.env.distractors < 0:
        fail("env", "distractors", "must be >= 0")
    for k in cfg.loss.kinds:
        if k not in LOSS_KINDS:
            fail("loss", "kinds", f"unknown loss {k!r}")
    for k in cfg.study.losses:
        if k not in LOSS_KINDS or k == "nll":
            fail("study", "losses", f"unsupported loss {k!r}")
    for a in cfg.study.architectures:
        if a not in ("linear", "mlp16"):
            fail("study", "architectures", f"unknown architecture {a!r}")
    if cfg.study.optimizer not in ("sgd", "adam"):
        fail("study", "optimizer", "must be sgd or adam")
    for c in cfg.compare.capacities:
        if c not in ("large", "small"):
            fail("compare", "capacities", f"unknown capacity {c!r}")
    for name in ("n_theta", "n_theta_dot"):
        if getattr(cfg.surface, name) < 1:
            fail("surface", name, "grid needs at least one point")
    try:
        for kind in cfg.loss.kinds:
            cfg.loss_spec(kind)
        cfg.dyna_config(cfg.loss.kinds[0] if cfg.loss.kinds else "mse")
        cfg.env_spec()
    except ValueError as e:
        raise ConfigError(str(e), None, path) from None


def parse_config_text(text: str, path=None) -> ExperimentConfig:
    """Parse config text; unknown keys, bad types and missing required keys raise ConfigError."""
    cfg = ExperimentConfig()
    section = None
    seen: dict[tuple[str, str], int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno, path)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, path)
        key, raw = (x.strip() for x in stripped.split("=", 1))
        sec = section or "experiment"
        obj = getattr(cfg, sec)
        hints = typing.get_type_hints(type(obj))
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in [{sec}]", lineno, path)
        if (sec, key) in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[(sec, key)]})", lineno, path)
        seen[(sec, key)] = lineno
        try:
            setattr(obj, key, _parse_value(hints[key], raw))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}", lineno, path) from None
    if ("experiment", "experiment") not in seen:
        raise ConfigError("missing required key 'experiment'", None, path)
    _validate(cfg, seen, path)
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", None, path)
    return parse_config_text(path.read_text(), path)


def format_config(cfg: ExperimentConfig, with_docs: bool = True) -> str:
    out = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if with_docs:
                out.append(f"# {f.metadata['doc']}")
            out.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved_config"
    atomic_write_text(path, format_config(cfg))
    return path


def describe_keys() -> str:
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    defaults = ExperimentConfig()
    for name in SECTIONS:
        obj = getattr(defaults, name)
        for f in dataclasses.fields(obj):
            rows.append(f"| `[{name}] {f.name}` | `{_format_value(getattr(obj, f.name))}` | {f.metadata['doc']} |")
    return "\n".join(rows)


def config_for(experiment: str, seed: int = 0, **sections: dict[str, Any]) -> ExperimentConfig:
    """Programmatic construction with the same validation as a file."""
    lines = [f"experiment = {experiment}", f"seed = {seed}"]
    for sec, values in sections.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {_format_value(v)}" for k, v in values.items())
    return parse_config_text("\n".join(lines))
