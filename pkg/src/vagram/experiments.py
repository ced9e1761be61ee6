"""Experiment orchestration and CSV persistence.

Four experiments plus a smoke run. Every CSV has a header, fixed column
order, 17 significant digits and empty fields for missing values; files are
written atomically. Wall-clock timings go to ``timing.json`` so that the CSV
outputs depend only on the resolved config and seed.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import ValueBundle
from .autodiff import Graph, NonFiniteError, backward
from .config import ExperimentConfig
from .dyna import METRICS_COLUMNS, MetricsRow, dyna_train
from .env import MAX_SPEED, EnvSpec, sample_dataset, wrapped_step
from .modelloss import (PreparedBatch, eval_mse_error, eval_vaml_error, multi_vf_loss,
                        prepare_batch)
from .nn import Adam, Sgd, atomic_write_text, make_model

STUDY_COLUMNS = ["loss", "arch", "seed", "segment", "steps", "vaml_error", "mse_error"]
SURFACE_COLUMNS = ["theta", "theta_dot", "value", "loss_mse", "loss_vaml", "loss_vagram", "loss_taylor"]
SUMMARY_COLUMNS = ["loss", "capacity", "distractors", "seed", "status", "epochs", "episodes",
                   "final_return", "random_baseline", "error"]
REFERENCE_COLUMNS = ["distractors", "seed", "status", "epochs", "episodes", "final_return",
                     "random_baseline", "error"]
ARCHITECTURES = {"linear": (), "mlp16": (16,)}


class SnapshotMissing(FileNotFoundError):
    def __init__(self, epoch: int, path):
        self.epoch = epoch
        super().__init__(f"missing value snapshot for epoch {epoch} at {path}")


# --------------------------------------------------------------- CSV helpers


def format_field(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else format(float(v), ".17g")
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if dataclasses.is_dataclass(row):
            row = dataclasses.asdict(row)
        w.writerow([format_field(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, columns: Sequence[str], rows: Iterable) -> Path:
    path = Path(path)
    atomic_write_text(path, csv_text(columns, rows))
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _write_timing(out_dir: Path, timing: dict) -> None:
    atomic_write_text(out_dir / "timing.json", json.dumps(timing, indent=1, sort_keys=True))


def snapshot_dir(root, epoch: int) -> Path:
    return Path(root) / f"epoch_{epoch:03d}"


# ------------------------------------------------------------ mf snapshots


def run_mf_snapshots(cfg: ExperimentConfig, out_dir, env_spec: EnvSpec | None = None) -> Path:
    """Model-free SAC, saving the value bundle after every epoch. Returns the snapshot root."""
    out_dir = Path(out_dir)
    snap = cfg.snapshots
    env_spec = env_spec or cfg.env_spec()
    dcfg = cfg.dyna_config("mse", model_free=True, epochs=snap.epochs, env_steps=snap.steps_per_epoch,
                           init_steps=snap.init_steps)
    root = out_dir / "snapshots"

    def save(epoch, agent):
        agent.save(snapshot_dir(root, epoch))

    t0 = time.perf_counter()
    rows = list(dyna_train(dcfg, env_spec, cfg.experiment.seed, "mf_snapshots", on_epoch=save))
    for r in rows:
        if r.return_mean is not None and not math.isfinite(r.return_mean):
            raise RuntimeError(f"non-finite return at epoch {r.epoch}")
    write_csv(out_dir / "returns.csv", METRICS_COLUMNS, rows)
    _write_timing(out_dir, {"total_seconds": time.perf_counter() - t0,
                            "epoch_seconds": [r.wall_seconds for r in rows]})
    return root


def load_snapshots(root, count: int, first: int = 0) -> list[ValueBundle]:
    bundles = []
    for epoch in range(first, first + count):
        path = snapshot_dir(root, epoch)
        if not (path / "bundle.json").exists():
            raise SnapshotMissing(epoch, path)
        bundles.append(ValueBundle.load(path))
    return bundles


# -------------------------------------------------------- model-loss study


@dataclass
class StudyRun:
    loss: str
    arch: str
    seed: int


def study_run(cfg: ExperimentConfig, bundles: Sequence[ValueBundle], run: StudyRun,
              env_spec: EnvSpec) -> list[dict]:
    """Train one model through the snapshot sequence; one row per segment."""
    st = cfg.study
    ss = np.random.SeedSequence([cfg.experiment.seed, run.seed])
    s_data, s_hold, s_model, s_batch = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    data = sample_dataset(st.dataset_size, "uniform_state", s_data, env_spec)
    hold = sample_dataset(st.heldout_size, "uniform_state", s_hold, env_spec)
    model = make_model(env_spec.obs_dim, env_spec.action_dim, ARCHITECTURES[run.arch],
                       cfg.dyna.model_activation, cfg.dyna.model_mode, s_model)
    opt = Sgd(st.lr) if st.optimizer == "sgd" else Adam(st.lr)
    spec = cfg.loss_spec(run.loss)
    rng = np.random.default_rng(s_batch)
    rows, steps, diverged = [], 0, False
    for segment, bundle in enumerate(bundles):
        pb = prepare_batch(spec, bundle, data.s, data.a, data.s_next)
        for _ in range(st.steps_per_segment if not diverged else 0):
            mb = pb[rng.integers(0, len(pb), size=min(st.batch_size, len(pb)))]
            g = Graph()
            leaves = g.leaves_for(model.params)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = multi_vf_loss(spec, bundle, mb, model.predict(mb.s, mb.a, leaves), rng)
                    grads = backward(g, loss)
            except NonFiniteError:
                # a blown-up model stays blown up: remaining errors are recorded as missing
                diverged = True
                break
            opt.step(model.params, [grads[p] for p in leaves])
            steps += 1
        if diverged:
            rows.append({"loss": run.loss, "arch": run.arch, "seed": run.seed, "segment": segment,
                         "steps": steps, "vaml_error": None, "mse_error": None})
            continue
        with np.errstate(all="ignore"):
            v = eval_vaml_error(lambda x: bundle.value_np(x, st.eval_vf), model, hold.s, hold.a, hold.s_next)
            m = eval_mse_error(model, hold.s, hold.a, hold.s_next)
        rows.append({"loss": run.loss, "arch": run.arch, "seed": run.seed, "segment": segment,
                     "steps": steps, "vaml_error": v if math.isfinite(v) else None,
                     "mse_error": m if math.isfinite(m) else None})
    return rows


def run_model_loss_study(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    st = cfg.study
    env_spec = cfg.env_spec()
    root = Path(st.snapshot_dir) if st.snapshot_dir else None
    t0 = time.perf_counter()
    if root is None:
        epochs = st.first_epoch + st.segments
        snap_cfg = dataclasses.replace(cfg, snapshots=dataclasses.replace(cfg.snapshots, epochs=epochs))
        root = run_mf_snapshots(snap_cfg, out_dir / "mf", env_spec)
    bundles = load_snapshots(root, st.segments, st.first_epoch)
    runs = [StudyRun(loss, arch, seed) for arch in st.architectures for loss in st.losses
            for seed in range(st.seeds)]
    rows, timing = [], {}
    for run in runs:
        t = time.perf_counter()
        rows.extend(study_run(cfg, bundles, run, env_spec))
        timing[f"{run.loss}/{run.arch}/{run.seed}"] = time.perf_counter() - t
    path = write_csv(out_dir / "loss_study.csv", STUDY_COLUMNS, rows)
    timing["total_seconds"] = time.perf_counter() - t0
    _write_timing(out_dir, timing)
    return path


# ------------------------------------------------------------ loss surface


def surface_losses(bundle: ValueBundle, which: int, s_next_ref: np.ndarray, cells: np.ndarray) -> dict:
    """Each loss with ``cells`` (n, 2) as the model prediction against the reference next state."""
    cells = np.asarray(cells, dtype=np.float64)
    ref = np.asarray(s_next_ref, dtype=np.float64).reshape(1, -1)
    g = bundle.gradients(ref, [which])[0, 0]
    d = cells - ref
    v_ref = bundle.value_np(ref, which)[0]
    v = bundle.value_np(cells, which)
    return {"value": v, "loss_mse": np.sum(d * d, axis=1), "loss_vaml": (v - v_ref) ** 2,
            "loss_vagram": np.sum(d * d * g * g, axis=1), "loss_taylor": (d @ g) ** 2}


def surface_grid(n_theta: int, n_theta_dot: int) -> tuple[np.ndarray, np.ndarray]:
    if n_theta < 1 or n_theta_dot < 1:
        raise ValueError("empty surface grid")
    th = np.linspace(-math.pi, math.pi, n_theta) if n_theta > 1 else np.array([0.0])
    thd = np.linspace(-MAX_SPEED, MAX_SPEED, n_theta_dot) if n_theta_dot > 1 else np.array([0.0])
    return th, thd


def export_loss_surface(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    sf = cfg.surface
    th, thd = surface_grid(sf.n_theta, sf.n_theta_dot)
    env_spec = EnvSpec("raw", 0, cfg.env.distractor_seed, cfg.env.gamma)
    t0 = time.perf_counter()
    if sf.snapshot_dir:
        root = Path(sf.snapshot_dir)
    else:
        snap_cfg = dataclasses.replace(cfg, snapshots=dataclasses.replace(cfg.snapshots, epochs=sf.train_epochs))
        run_mf_snapshots(snap_cfg, out_dir / "mf", env_spec)
        root = snapshot_dir(out_dir / "mf" / "snapshots", sf.train_epochs - 1)
    if not (root / "bundle.json").exists():
        raise FileNotFoundError(f"no value snapshot at {root}")
    bundle = ValueBundle.load(root)
    if bundle.policy.net.in_dim != 2:
        raise ValueError("loss surfaces need a raw-observation (theta, theta_dot) snapshot")
    s = np.array([[sf.theta, sf.theta_dot]])
    s_next, r = wrapped_step(s, np.array([sf.action]), env_spec, None)
    tt, dd = np.meshgrid(th, thd, indexing="ij")
    cells = np.stack([tt.ravel(), dd.ravel()], axis=1)
    cols = surface_losses(bundle, sf.vf_index, s_next[0], cells)
    rows = [{"theta": c[0], "theta_dot": c[1], **{k: float(v[i]) for k, v in cols.items()}}
            for i, c in enumerate(cells)]
    path = write_csv(out_dir / "surface.csv", SURFACE_COLUMNS, rows)
    g = bundle.gradients(s_next, [sf.vf_index])[0, 0]
    ref = {"s": s[0].tolist(), "a": [sf.action], "s_next": s_next[0].tolist(), "reward": float(r[0]),
           "value_gradient": g.tolist(), "vf_index": sf.vf_index}
    atomic_write_text(out_dir / "reference.json", json.dumps(ref, indent=1))
    _write_timing(out_dir, {"total_seconds": time.perf_counter() - t0})
    return path


# ------------------------------------------------------------ dyna compare


@dataclass(frozen=True)
class Cell:
    loss: str  # "model_free" for the reference runs
    capacity: str
    distractors: int
    seed: int

    @property
    def name(self) -> str:
        if self.loss == "model_free":
            return f"model_free_k{self.distractors}_seed{self.seed}"
        return f"{self.loss}_{self.capacity}_k{self.distractors}_seed{self.seed}"


def compare_cells(cfg: ExperimentConfig) -> tuple[list[Cell], list[Cell]]:
    cp = cfg.compare
    cells = [Cell(loss, cap, k, s) for loss in cfg.loss.kinds for cap in cp.capacities
             for k in cp.distractors for s in range(cp.seeds)]
    refs = [Cell("model_free", "", k, s) for k in cp.distractors for s in range(cp.seeds)] \
        if cp.model_free_reference else []
    return cells, refs


def _cell_seed(cfg: ExperimentConfig, cell: Cell) -> int:
    # paired across losses and capacities: same seed index, same environment and agent streams
    return cfg.experiment.seed * 1000 + cell.seed


def run_cell(cfg: ExperimentConfig, cell: Cell, out_dir) -> dict:
    """One dyna_train run; never raises, failures come back in the summary row."""
    t0 = time.perf_counter()
    summary = {"loss": cell.loss, "capacity": cell.capacity, "distractors": cell.distractors,
               "seed": cell.seed, "status": "ok"}
    rows: list[MetricsRow] = []
    try:
        if cell.loss == "model_free":
            dcfg = cfg.dyna_config("mse", model_free=True)
        else:
            hidden = cfg.compare.large_hidden if cell.capacity == "large" else cfg.compare.small_hidden
            dcfg = cfg.dyna_config(cell.loss, model_hidden=tuple(hidden))
        for row in dyna_train(dcfg, cfg.env_spec(cell.distractors), _cell_seed(cfg, cell), cell.name):
            rows.append(row)
    except Exception as e:  # noqa: BLE001 - recorded per cell, other cells continue
        summary["status"] = "failed"
        summary["error"] = f"{type(e).__name__}: {e}".replace("\n", " ")
    write_csv(Path(out_dir) / "cells" / f"{cell.name}.csv", METRICS_COLUMNS, rows)
    last = rows[-1] if rows else None
    summary.update(epochs=len(rows), episodes=last.episodes if last else None,
                   final_return=last.return_mean if last else None,
                   random_baseline=last.random_baseline if last else None)
    summary["wall_seconds"] = time.perf_counter() - t0
    return summary


def _workers(n_cells: int) -> int:
    cap = os.environ.get("VAGRAM_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, n_cells))


def run_dyna_compare(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    cells, refs = compare_cells(cfg)
    todo = cells + refs
    t0 = time.perf_counter()
    workers = _workers(len(todo))
    if workers == 1:
        results = [run_cell(cfg, c, out_dir) for c in todo]
    else:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_cell, [cfg] * len(todo), todo, [out_dir] * len(todo)))
    by_cell = dict(zip(todo, results))
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, [by_cell[c] for c in cells])
    if refs:
        write_csv(out_dir / "reference_summary.csv", REFERENCE_COLUMNS, [by_cell[c] for c in refs])
    _write_timing(out_dir, {"total_seconds": time.perf_counter() - t0, "workers": workers,
                            "cells": {c.name: r["wall_seconds"] for c, r in by_cell.items()}})
    return out_dir / "summary.csv"


# ------------------------------------------------------------------- smoke


def run_smoke(cfg: ExperimentConfig, out_dir) -> Path:
    """A single short Dyna run with the first configured loss."""
    out_dir = Path(out_dir)
    kind = cfg.loss.kinds[0] if cfg.loss.kinds else "mse"
    t0 = time.perf_counter()
    rows = list(dyna_train(cfg.dyna_config(kind), cfg.env_spec(), cfg.experiment.seed, f"smoke_{kind}"))
    path = write_csv(out_dir / "metrics.csv", METRICS_COLUMNS, rows)
    _write_timing(out_dir, {"total_seconds": time.perf_counter() - t0})
    return path


RUNNERS = {
    "smoke": run_smoke,
    "mf_snapshots": lambda cfg, out: run_mf_snapshots(cfg, out),
    "model_loss_study": run_model_loss_study,
    "loss_surface": export_loss_surface,
    "dyna_compare": run_dyna_compare,
}
