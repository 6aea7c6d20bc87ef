"""Sample-complexity sweeps: final gap as a function of the per-iteration sample count."""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fqi import FqiSchedule, fqi_run
from .mdp import FeatureMap, TabularMDP, value_iteration_qstar

__all__ = [
    "SweepCell",
    "SweepResult",
    "fit_loglog_slope",
    "estimate_floor",
    "summarize_cells",
    "sample_complexity_sweep",
]

MIN_BUDGETS = 4
MIN_SPAN = 16
MIN_SEEDS = 5


@dataclass
class SweepCell:
    n: int
    seed: int
    final_gap: float = float("nan")
    wall_ms: float = 0.0
    status: str = "ok"
    error: str = ""
    record: object = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepResult:
    cells: list
    n_grid: list
    seeds: list
    medians: dict
    floor: float
    slope: float
    intercept: float
    identifiable: bool
    fit_points: list

    @property
    def success_fraction(self) -> float:
        return sum(c.ok for c in self.cells) / max(len(self.cells), 1)

    def summary(self) -> dict:
        return {
            "n_grid": list(self.n_grid),
            "seeds": list(self.seeds),
            "median_gap": {str(n): m for n, m in self.medians.items()},
            "floor": self.floor,
            "slope": self.slope,
            "intercept": self.intercept,
            "identifiable": self.identifiable,
            "fit_points": list(self.fit_points),
            "cells": len(self.cells),
            "failed_cells": sum(not c.ok for c in self.cells),
        }


def fit_loglog_slope(ns, gaps, floor: float = 0.0, tol: float = 1e-12):
    """Least-squares slope of ``log(gap - floor)`` against ``log(n)``.

    Points with ``gap - floor <= tol`` carry no information and are dropped.
    Returns ``(slope, intercept, identifiable, used_ns)``; with fewer than two
    usable points the slope is reported as 0 and flagged not identifiable.
    """
    ns = np.asarray(ns, dtype=float)
    excess = np.asarray(gaps, dtype=float) - floor
    keep = np.isfinite(excess) & (excess > tol)
    if keep.sum() < 2 or np.unique(ns[keep]).size < 2:
        return 0.0, 0.0, False, []
    slope, intercept = np.polyfit(np.log(ns[keep]), np.log(excess[keep]), 1)
    return float(slope), float(intercept), True, [int(n) for n in ns[keep]]


def estimate_floor(medians: dict) -> float:
    """Irreducible-gap estimate: the median gap at the largest budget."""
    return float(medians[max(medians)])


def summarize_cells(cells, n_grid, seeds) -> SweepResult:
    medians = {}
    for n in n_grid:
        gaps = [c.final_gap for c in cells if c.n == n and c.ok]
        medians[n] = float(np.median(gaps)) if gaps else float("nan")
    usable = {n: m for n, m in medians.items() if math.isfinite(m)}
    floor = estimate_floor(usable) if usable else float("nan")
    ns = sorted(usable)
    slope, intercept, ok, used = fit_loglog_slope(ns, [usable[n] for n in ns], floor) if usable else (0.0, 0.0, False, [])
    return SweepResult(list(cells), list(n_grid), list(seeds), medians, floor, slope, intercept, ok, used)


def _run_cell(args):
    mdp, features, schedule, n, seed, q_star = args
    start = time.perf_counter()
    try:
        result = fqi_run(mdp, features, schedule.with_samples(n).with_seed(seed), q_star=q_star)
    except Exception as exc:  # a failed cell is recorded, not fatal
        return SweepCell(n, seed, wall_ms=(time.perf_counter() - start) * 1e3,
                         status="failed", error=f"{type(exc).__name__}: {exc}")
    return SweepCell(n, seed, result.final_gap, (time.perf_counter() - start) * 1e3, record=result.record)


def sample_complexity_sweep(mdp: TabularMDP, features: FeatureMap, base_schedule: FqiSchedule,
                            n_grid, seeds, jobs: int = 1) -> SweepResult:
    """Run FQI for every ``(n, seed)`` and fit the decay of the floor-subtracted median gap.

    Every iteration of a cell uses ``n`` samples; all other budgets come from
    ``base_schedule``.
    """
    n_grid = sorted(int(n) for n in n_grid)
    seeds = [int(s) for s in seeds]
    if len(n_grid) < MIN_BUDGETS or n_grid[-1] < MIN_SPAN * n_grid[0]:
        raise ValueError(f"need at least {MIN_BUDGETS} budgets spanning a factor of {MIN_SPAN}")
    if len(seeds) < MIN_SEEDS:
        raise ValueError(f"need at least {MIN_SEEDS} seeds per budget")
    q_star = value_iteration_qstar(mdp, 1e-10)
    tasks = [(mdp, features, base_schedule, n, s, q_star) for n in n_grid for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    return summarize_cells(cells, n_grid, seeds)
