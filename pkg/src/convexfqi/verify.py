"""Seeded self-checks run by ``convexfqi verify``.

Each suite compares a library routine with an independent oracle on random
instances and returns a :class:`SuiteResult`.  Library routines are looked
up through their modules at call time so a patched routine is what gets
checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mdp as mdp_mod
from . import relu_convex as rc

__all__ = ["SuiteResult", "SUITES", "run_suites", "format_report", "l1_projection_bisection"]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<16} cases={self.cases:<5d} worst={self.worst:.3e} tol={self.tolerance:.0e}"


def l1_projection_bisection(x, radius, iters: int = 200):
    """Projection onto the L1 ball by bisection on the soft-threshold level."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    if a.sum() <= radius:
        return x.copy()
    lo, hi = 0.0, float(a.max())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(a - mid, 0.0).sum() > radius:
            lo = mid
        else:
            hi = mid
    return np.sign(x) * np.maximum(a - hi, 0.0)


def _random_instance(rng, n_max=8, d_max=4, k_max=8):
    n = int(rng.integers(2, n_max + 1))
    d = int(rng.integers(2, d_max + 1))
    X = rng.random((n, d))
    y = rng.standard_normal(n)
    gates = rc.sample_gates(X, int(rng.integers(1, k_max + 1)), rng)
    return X, y, gates


def suite_loss_equality(rng, cases: int = 100) -> SuiteResult:
    tol = 1e-8
    worst = 0.0
    for _ in range(cases):
        X, y, gates = _random_instance(rng)
        u = rng.standard_normal((gates.count, X.shape[1]))
        net = rc.psi_transform(rc.cone_decompose(u, gates, X))
        diff = abs(rc.nonconvex_loss(net, X, y, 0.0) - rc.convex_loss(u, gates, X, y))
        worst = max(worst, diff)
    return SuiteResult("loss_equality", worst <= tol, cases, worst, tol)


def suite_projection(rng, cases: int = 300) -> SuiteResult:
    tol = 1e-9
    worst = 0.0
    for _ in range(cases):
        x = rng.standard_normal(int(rng.integers(1, 51))) * rng.uniform(0.1, 5.0)
        radius = float(rng.uniform(0.05, 3.0))
        p = rc.l1_ball_projection(x, radius)
        worst = max(worst,
                    float(np.max(np.abs(p - l1_projection_bisection(x, radius)))),
                    float(np.max(np.abs(rc.l1_ball_projection(p, radius) - p))),
                    max(0.0, float(np.abs(p).sum() - radius)))
    return SuiteResult("projection", worst <= tol, cases, worst, tol)


def suite_gradient(rng, cases: int = 50) -> SuiteResult:
    tol = 1e-5
    h = 1e-6
    worst = 0.0
    for _ in range(cases):
        X, y, gates = _random_instance(rng)
        u = rng.standard_normal((gates.count, X.shape[1]))
        grad = rc.convex_grad(u, gates, X, y)
        fd = np.zeros_like(u)
        for idx in np.ndindex(u.shape):
            e = np.zeros_like(u)
            e[idx] = h
            fd[idx] = (rc.convex_loss(u + e, gates, X, y) - rc.convex_loss(u - e, gates, X, y)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(grad - fd))))
    return SuiteResult("gradient", worst <= tol, cases, worst, tol)


def suite_gate_enumeration(rng, cases: int = 10) -> SuiteResult:
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(2, 7))
        X = rng.random((n, int(rng.integers(2, 4))))
        exact = rc.enumerate_gates_exact(X)
        sampled = rc.sample_gates(X, 64, rng)
        bad += int(not sampled.as_set() <= exact.as_set()) + int(exact.count > 2 ** n)
    return SuiteResult("gate_enumeration", bad == 0, cases, float(bad), 0.0)


def _random_mdp(rng, S, A):
    P = rng.random((S, A, S)) + 0.05
    P /= P.sum(axis=2, keepdims=True)
    P[..., -1] = 1.0 - P[..., :-1].sum(axis=2)
    return mdp_mod.TabularMDP(P, rng.random((S, A)), float(rng.uniform(0.5, 0.95)))


def suite_bellman_oracle(rng, cases: int = 10) -> SuiteResult:
    tol = 1e-8
    worst = 0.0
    for _ in range(cases):
        m = _random_mdp(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)))
        q = mdp_mod.value_iteration_qstar(m, 1e-10)
        residual = float(np.max(np.abs(mdp_mod.bellman_operator(m, q) - q)))
        pi = rng.integers(m.num_actions, size=m.num_states)
        q_pi = mdp_mod.policy_evaluation_q(m, pi, 1e-11)
        # direct solve over state-action pairs: (I - gamma P_pi) q = r
        S, A = m.num_states, m.num_actions
        P_pi = np.zeros((S * A, S * A))
        for s2 in range(S):
            P_pi[:, s2 * A + pi[s2]] = m.transition[:, :, s2].ravel()
        direct = np.linalg.solve(np.eye(S * A) - m.gamma * P_pi, m.reward.ravel()).reshape(S, A)
        gap = abs(mdp_mod.performance_gap(m, q, q_star=q))
        worst = max(worst, residual, float(np.max(np.abs(q_pi - direct))), gap)
    return SuiteResult("bellman_oracle", worst <= tol, cases, worst, tol)


SUITES = {
    "loss_equality": suite_loss_equality,
    "projection": suite_projection,
    "gradient": suite_gradient,
    "gate_enumeration": suite_gate_enumeration,
    "bellman_oracle": suite_bellman_oracle,
}


def run_suites(seed: int = 0, names=None) -> list[SuiteResult]:
    results = []
    for i, name in enumerate(names or SUITES):
        rng = np.random.default_rng([seed, i])
        results.append(SUITES[name](rng))
    return results


def format_report(results) -> str:
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append("all suites passed" if not failed else f"FAILED: {', '.join(failed)}")
    return "\n".join(lines)
