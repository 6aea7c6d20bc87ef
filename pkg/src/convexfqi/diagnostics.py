"""Exact-model diagnostics for a fitted Q-iteration run.

These use the transition table, which the learner never sees.  The error
decomposition compares the fitted Q-function with heavy-budget reference
fits: one regressed onto the exact Bellman image of the previous iterate,
and one regressed onto the iteration's empirical targets.  Both references
are estimates of argmins over the network class and are labelled as such.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import FeatureMap, TabularMDP, bellman_operator, _as_distribution
from .relu_convex import (
    ConvexReluRegressor,
    GateSet,
    ReluNetwork,
    enumerate_gates_exact,
    network_forward,
    sample_gates,
)

__all__ = [
    "IterationContext",
    "ErrorBreakdown",
    "q_table",
    "bellman_error",
    "error_decomposition",
]


def q_table(q, features: FeatureMap, clip: float | None = None) -> np.ndarray:
    """Tabulate a Q representation over all pairs.

    ``q`` may be ``None`` (the zero function), a :class:`ReluNetwork`, a
    fitted estimator with ``predict``, or an ``(S, A)`` table.
    """
    shape = (features.num_states, features.num_actions)
    if q is None:
        table = np.zeros(shape)
    elif isinstance(q, ReluNetwork):
        table = network_forward(q, features.table).reshape(shape)
    elif hasattr(q, "predict"):
        table = np.asarray(q.predict(features.table), dtype=float).reshape(shape)
    else:
        table = np.asarray(q, dtype=float).reshape(shape)
    if clip is not None:
        table = np.clip(table, 0.0, clip)
    return table


def bellman_error(mdp: TabularMDP, features: FeatureMap, q_prev, q_k, nu=None) -> float:
    """``E_nu |T Q_prev - Q_k|`` with ``T`` applied exactly through the transition table."""
    nu = _as_distribution(mdp, nu)
    t_prev = bellman_operator(mdp, q_table(q_prev, features))
    return float(np.sum(nu * np.abs(t_prev - q_table(q_k, features))))


@dataclass(eq=False)
class IterationContext:
    """Everything needed to re-examine one FQI iteration after the fact."""

    k: int
    states: np.ndarray
    actions: np.ndarray
    targets: np.ndarray
    q_prev: np.ndarray
    gates: GateSet
    network: ReluNetwork
    steps: int
    radius: float


@dataclass
class ErrorBreakdown:
    k: int
    bellman_error_l1: float
    approx_error_est: float
    estimation_error: float
    sampling_error_est: float
    optimization_error_est: float
    reliable: bool = True
    notes: list = field(default_factory=list)
    q_approx_ref: np.ndarray | None = field(default=None, repr=False)
    q_empirical_ref: np.ndarray | None = field(default=None, repr=False)

    @property
    def component_sum(self) -> float:
        return self.approx_error_est + self.estimation_error + self.sampling_error_est + self.optimization_error_est

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "bellman_error_l1": self.bellman_error_l1,
            "approx_error_est": self.approx_error_est,
            "estimation_error": self.estimation_error,
            "sampling_error_est": self.sampling_error_est,
            "optimization_error_est": self.optimization_error_est,
            "reliable": self.reliable,
            "notes": list(self.notes),
        }


def _reference_gates(grid: np.ndarray, n_gates: int, exact_limit: int, rng) -> GateSet:
    if grid.shape[0] <= exact_limit:
        return enumerate_gates_exact(grid, max_rows=exact_limit)
    return sample_gates(grid, n_gates, rng)


def _reference_fit(grid, targets, weights, gates, radius, steps):
    keep = weights > 0
    sub_gates = GateSet(gates.masks[:, keep], gates.directions)
    model = ConvexReluRegressor(radius=radius, max_iter=steps, gates=sub_gates)
    model.fit(grid[keep], targets[keep], sample_weight=weights[keep])
    history = model.loss_history_
    # relative loss change over the last tenth of the run, as a convergence residual
    tail = history[-max(2, len(history) // 10):]
    residual = float((tail[0] - tail[-1]) / max(tail[0], 1e-12))
    return model, residual


def error_decomposition(mdp: TabularMDP, features: FeatureMap, ctx: IterationContext, nu=None,
                        q_k=None, step_factor: int = 10, min_steps: int = 5000,
                        gate_factor: int = 10, exact_limit: int = 10, tol: float = 1e-4,
                        seed: int = 0) -> ErrorBreakdown:
    """Estimate the approximation, sampling and optimization parts of the Bellman error.

    The estimation part is reported as exactly zero.  All references are
    fitted on the table of state-action features: the empirical loss of a
    batch equals a count-weighted loss on that table with per-pair mean
    targets, up to a constant.  ``q_k`` overrides the iteration's network
    (any representation accepted by :func:`q_table`).
    """
    nu = _as_distribution(mdp, nu)
    grid = features.table
    shape = (mdp.num_states, mdp.num_actions)
    rng = np.random.default_rng(seed)
    steps = max(min_steps, step_factor * ctx.steps)
    gates = _reference_gates(grid, gate_factor * max(ctx.gates.count, 1), exact_limit, rng)
    notes = [f"references: {'exact' if grid.shape[0] <= exact_limit else 'sampled'} gates "
             f"({gates.count}), {steps} PGD steps; values are estimates"]

    t_prev = bellman_operator(mdp, ctx.q_prev)
    ref1, res1 = _reference_fit(grid, t_prev.ravel(), nu.ravel(), gates, ctx.radius, steps)
    q1 = ref1.predict(grid).reshape(shape)

    idx = features.index(ctx.states, ctx.actions)
    counts = np.bincount(idx, minlength=grid.shape[0]).astype(float)
    sums = np.bincount(idx, weights=ctx.targets, minlength=grid.shape[0])
    mean_targets = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    ref3, res3 = _reference_fit(grid, mean_targets, counts / counts.sum(), gates, ctx.radius, steps)
    q3 = ref3.predict(grid).reshape(shape)

    qk = q_table(ctx.network if q_k is None else q_k, features)
    reliable = res1 <= tol and res3 <= tol
    if not reliable:
        notes.append(f"reference fits not converged (relative tail change {res1:.2e}, {res3:.2e}); "
                     "components unreliable")
    if np.any(counts == 0):
        notes.append(f"{int(np.sum(counts == 0))} pair(s) unsampled; empirical reference extrapolates there")

    def avg_abs(a, b):
        return float(np.sum(nu * np.abs(a - b)))

    return ErrorBreakdown(
        k=ctx.k,
        bellman_error_l1=avg_abs(t_prev, qk),
        approx_error_est=avg_abs(t_prev, q1),
        estimation_error=0.0,
        sampling_error_est=avg_abs(q1, q3),
        optimization_error_est=avg_abs(q3, qk),
        reliable=reliable,
        notes=notes,
        q_approx_ref=q1,
        q_empirical_ref=q3,
    )
