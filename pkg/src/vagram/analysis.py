"""Summaries of experiment CSVs: orderings, gap fractions and effect sizes."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np


def _f(x: str) -> float | None:
    return float(x) if x not in ("", None) else None


def study_table(rows: list[dict]) -> dict[tuple[str, str], dict[int, list[float | None]]]:
    """(loss, arch) -> seed -> vaml_error per segment (in segment order)."""
    out: dict = defaultdict(lambda: defaultdict(list))
    for r in sorted(rows, key=lambda r: int(r["segment"])):
        out[(r["loss"], r["arch"])][int(r["seed"])].append(_f(r["vaml_error"]))
    return out


def _bad(x) -> float:
    return np.inf if x is None else x


def count_final_below(table, loss_a: str, loss_b: str, arch: str) -> tuple[int, int]:
    """Seeds where loss_a's final error is below loss_b's."""
    a, b = table[(loss_a, arch)], table[(loss_b, arch)]
    seeds = sorted(set(a) & set(b))
    return sum(_bad(a[s][-1]) < _bad(b[s][-1]) for s in seeds), len(seeds)


def count_final_vs_first(table, loss: str, arch: str, direction: str) -> tuple[int, int]:
    """Seeds where the final error is above ('up') or below ('down') the first-segment error."""
    runs = table[(loss, arch)]
    n = 0
    for errs in runs.values():
        first, last = _bad(errs[0]), _bad(errs[-1])
        n += (last > first) if direction == "up" else (last < first)
    return n, len(runs)


def final_ratio(table, loss_a: str, loss_b: str, arch: str) -> float:
    """Ratio of the seed-median final errors, larger over smaller."""
    a = np.median([_bad(v[-1]) for v in table[(loss_a, arch)].values()])
    b = np.median([_bad(v[-1]) for v in table[(loss_b, arch)].values()])
    return float(max(a, b) / min(a, b))


@dataclass
class GapResult:
    loss: str
    fractions: list[float | None]
    passed: int
    total: int


def gap_fractions(summary: list[dict], reference: list[dict], loss: str, capacity: str = "large",
                  distractors: int = 0) -> GapResult:
    """(return - baseline) / (model-free return - baseline), paired by seed."""
    mf = {int(r["seed"]): r for r in reference if int(r["distractors"]) == distractors}
    fracs = []
    for r in summary:
        if r["loss"] != loss or r["capacity"] != capacity or int(r["distractors"]) != distractors:
            continue
        ref = mf.get(int(r["seed"]))
        ret, base = _f(r["final_return"]), _f(r["random_baseline"])
        ref_ret = _f(ref["final_return"]) if ref else None
        if ret is None or base is None or ref_ret is None or ref_ret <= base:
            fracs.append(None)
        else:
            fracs.append((ret - base) / (ref_ret - base))
    passed = sum(f is not None and f >= 0.5 for f in fracs)
    return GapResult(loss, fracs, passed, len(fracs))


def cell_returns(summary: list[dict], loss: str, capacity: str, distractors: int) -> np.ndarray:
    vals = [_f(r["final_return"]) for r in summary
            if r["loss"] == loss and r["capacity"] == capacity and int(r["distractors"]) == distractors]
    return np.array([-np.inf if v is None else v for v in vals])


def cliffs_delta(a, b) -> float:
    """P(a > b) - P(a < b) over all pairs."""
    a, b = np.asarray(a, dtype=float)[:, None], np.asarray(b, dtype=float)[None, :]
    return float(np.mean(a > b) - np.mean(a < b))


@dataclass
class Ordering:
    capacity: str
    distractors: int
    median_a: float
    median_b: float
    median_diff: float
    cliffs_delta: float
    holds: bool


def median_ordering(summary: list[dict], loss_a: str, loss_b: str, capacity: str, distractors: int) -> Ordering:
    a = cell_returns(summary, loss_a, capacity, distractors)
    b = cell_returns(summary, loss_b, capacity, distractors)
    if a.size == 0 or b.size == 0:
        raise ValueError(f"no runs for cell ({capacity}, k={distractors})")
    ma, mb = float(np.median(a)), float(np.median(b))
    # a cell with no finished episodes cannot support the ordering
    return Ordering(capacity, distractors, ma, mb, ma - mb, cliffs_delta(a, b), bool(np.isfinite(ma) and ma >= mb))
