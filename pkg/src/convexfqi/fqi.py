"""Fitted Q-iteration with convex-trained two-layer ReLU Q-functions."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diagnostics import IterationContext, bellman_error, q_table
from .mdp import (
    FeatureMap,
    TabularMDP,
    TransitionBatch,
    _as_distribution,
    greedy_policy,
    performance_gap,
    sample_batch,
    value_iteration_qstar,
)
from .relu_convex import (
    ReluNetwork,
    SolverError,
    cone_decompose,
    network_forward,
    nonconvex_loss,
    projected_gradient_descent,
    psi_transform,
    sample_gates,
)

__all__ = [
    "FqiSchedule",
    "IterationLog",
    "RunRecord",
    "FqiResult",
    "build_targets",
    "fit_q_network",
    "fqi_run",
    "theorem_bounds",
    "theorem_schedule",
    "FittedQIteration",
]

STEP_MODES = ("backtracking", "theory")


@dataclass(frozen=True)
class FqiSchedule:
    """Per-iteration budgets of one FQI run.

    ``samples[k]`` and ``steps[k]`` are the sample count and PGD step count
    of iteration ``k + 1``.  ``nu`` is a distribution over state-action
    pairs (flattened ``s * A + a``); ``None`` means uniform.
    """

    samples: tuple
    steps: tuple
    gates: int = 32
    step_size: str = "backtracking"
    nu: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        samples = tuple(int(n) for n in self.samples)
        steps = tuple(int(t) for t in self.steps)
        if len(samples) < 1:
            raise ValueError("need at least one iteration")
        if len(samples) != len(steps):
            raise ValueError("samples and steps must have one entry per iteration")
        if min(samples) < 1 or min(steps) < 1:
            raise ValueError("sample and step counts must be at least 1")
        if self.gates < 1:
            raise ValueError("gate count must be at least 1")
        if self.step_size not in STEP_MODES:
            raise ValueError(f"step_size must be one of {STEP_MODES}")
        if self.nu is not None:
            nu = tuple(float(p) for p in np.ravel(self.nu))
            if min(nu) < 0 or abs(sum(nu) - 1.0) > 1e-9:
                raise ValueError("nu must be a probability vector")
            object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "steps", steps)

    @classmethod
    def constant(cls, iterations: int, samples: int, steps: int, **kwargs) -> "FqiSchedule":
        if iterations < 1:
            raise ValueError("need at least one iteration")
        return cls((samples,) * iterations, (steps,) * iterations, **kwargs)

    @property
    def iterations(self) -> int:
        return len(self.samples)

    @property
    def total_samples(self) -> int:
        return sum(self.samples)

    def scaled(self, factor: float) -> "FqiSchedule":
        """Same schedule with every sample count multiplied by ``factor``."""
        samples = tuple(max(1, int(round(n * factor))) for n in self.samples)
        return FqiSchedule(samples, self.steps, self.gates, self.step_size, self.nu, self.seed)

    def with_samples(self, n: int) -> "FqiSchedule":
        return FqiSchedule((n,) * self.iterations, self.steps, self.gates, self.step_size, self.nu, self.seed)

    def with_seed(self, seed: int) -> "FqiSchedule":
        return FqiSchedule(self.samples, self.steps, self.gates, self.step_size, self.nu, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples"] = list(self.samples)
        d["steps"] = list(self.steps)
        d["nu"] = list(self.nu) if self.nu is not None else None
        return d


@dataclass
class IterationLog:
    k: int
    n_k: int
    T_k: int
    train_loss: float
    bellman_error: float
    gap: float
    wall_ms: float | None = None
    gates: int = 0
    neurons: int = 0


@dataclass
class RunRecord:
    seed: int
    iterations: list = field(default_factory=list)
    samples_used: int = 0

    @property
    def final_gap(self) -> float:
        return self.iterations[-1].gap

    def rows(self) -> list[dict]:
        return [asdict(it) for it in self.iterations]


@dataclass(eq=False)
class FqiResult:
    network: ReluNetwork
    policy: np.ndarray
    q_table: np.ndarray
    record: RunRecord
    contexts: list = field(default_factory=list)

    @property
    def final_gap(self) -> float:
        return self.record.final_gap


def build_targets(batch, q_prev, features: FeatureMap, gamma: float, q_max: float) -> np.ndarray:
    """``r' + gamma * max_a' Q_prev(s', a')`` with ``Q_prev`` clipped to ``[0, q_max]``.

    ``batch`` is a :class:`TransitionBatch` or a list of :class:`SamplePair`;
    ``q_prev`` is anything :func:`q_table` accepts (``None`` is the zero function).
    """
    if not isinstance(batch, TransitionBatch):
        batch = TransitionBatch.from_pairs(batch)
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    table = q_table(q_prev, features, clip=q_max)
    y = batch.rewards + gamma * table[batch.next_states].max(axis=1)
    if not np.all(np.isfinite(y)):
        raise SolverError("non-finite Bellman targets")
    return y


def fit_q_network(X, y, n_gates: int, radius: float, steps: int, step_size: str, rng):
    """One call of the parameter-estimation step: gates, PGD, cone decomposition, psi."""
    gates = sample_gates(X, n_gates, rng)
    result = projected_gradient_descent(X, y, gates, radius, steps, step_size)
    network = psi_transform(cone_decompose(result.u, gates, X))
    return network, gates, result


def fqi_run(mdp: TabularMDP, features: FeatureMap, schedule: FqiSchedule,
            keep_contexts: bool = False, timing: bool = False, q_star=None) -> FqiResult:
    """Run fitted Q-iteration and log per-iteration loss, Bellman error and gap.

    Randomness is drawn from one generator seeded with ``schedule.seed``, in
    the order: pair indices, generative-model draws, gate directions.
    Bellman errors and gaps are measured under ``nu`` with the exact model.
    """
    if (features.num_states, features.num_actions) != (mdp.num_states, mdp.num_actions):
        raise ValueError("feature map does not match the MDP")
    nu = _as_distribution(mdp, schedule.nu)
    nu_flat = nu.ravel()
    rng = np.random.default_rng(schedule.seed)
    radius = mdp.q_max
    if q_star is None:
        q_star = value_iteration_qstar(mdp, 1e-10)
    network = ReluNetwork.empty(features.dim)
    q_prev = np.zeros((mdp.num_states, mdp.num_actions))
    record = RunRecord(seed=schedule.seed)
    contexts = []
    for k, (n_k, T_k) in enumerate(zip(schedule.samples, schedule.steps), start=1):
        start = time.perf_counter()
        idx = rng.choice(mdp.num_pairs, size=n_k, p=nu_flat)
        states, actions = np.divmod(idx, mdp.num_actions)
        batch = sample_batch(mdp, states, actions, rng)
        record.samples_used += len(batch)
        y = build_targets(batch, q_prev, features, mdp.gamma, radius)
        X = features.table[idx]
        network, gates, result = fit_q_network(X, y, schedule.gates, radius, T_k, schedule.step_size, rng)
        q_k = q_table(network, features)
        if not np.all(np.isfinite(q_k)):
            raise SolverError(f"iteration {k}: fitted network produced non-finite values")
        log = IterationLog(
            k=k,
            n_k=n_k,
            T_k=T_k,
            train_loss=nonconvex_loss(network, X, y) / n_k,
            bellman_error=bellman_error(mdp, features, q_prev, q_k, nu),
            gap=performance_gap(mdp, q_k, nu, q_star=q_star),
            gates=gates.count,
            neurons=network.m,
        )
        if timing:
            log.wall_ms = (time.perf_counter() - start) * 1e3
        record.iterations.append(log)
        if keep_contexts:
            contexts.append(IterationContext(k, states, actions, y, q_prev, gates, network, T_k, radius))
        q_prev = np.clip(q_k, 0.0, radius)
    q_final = q_table(network, features)
    return FqiResult(network, greedy_policy(q_final), q_final, record, contexts)


def theorem_bounds(gamma: float, r_max: float, epsilon: float, phi: float = 1.0, C: float = 1.0,
                   eta: float = 1.0, beta: float = 1.0, C_prime: float = 1.0, l: float = 1.0,
                   L: float = 1.0, u_norm: float = 1.0) -> dict:
    """Unrounded iteration, sample and step requirements of the finite-sample guarantee.

    ``phi`` (concentrability), ``C``, ``eta``, ``beta``, ``C_prime``, ``l``,
    ``L`` and ``u_norm`` are user-supplied surrogates for constants that are
    never instantiated.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    surrogates = dict(phi=phi, C=C, eta=eta, beta=beta, C_prime=C_prime, l=l, L=L, u_norm=u_norm)
    bad = [name for name, value in surrogates.items() if not value > 0]
    if bad or not r_max > 0:
        raise ValueError(f"constants must be positive: {', '.join(bad) or 'r_max'}")
    K = math.log(6.0 * phi * r_max / (epsilon * (1.0 - gamma) ** 2)) / math.log(1.0 / gamma) - 1.0
    n = 288.0 * (C * eta * beta * phi * gamma) ** 2 * (1.0 - gamma) ** -4 * epsilon ** -2
    T = (C_prime * epsilon * (1.0 - gamma) ** 2 / (6.0 * l * phi * gamma)) ** -2 * L ** 2 * u_norm ** 2 - 1.0
    return {"K": K, "n": n, "T": T}


def theorem_schedule(gamma: float, r_max: float, epsilon: float, gates: int = 32,
                     step_size: str = "theory", seed: int = 0, nu=None, **constants) -> FqiSchedule:
    """Constant schedule from :func:`theorem_bounds`, rounded up to integers (at least 1)."""
    b = theorem_bounds(gamma, r_max, epsilon, **constants)
    K = max(1, math.ceil(b["K"]))
    n = max(1, math.ceil(b["n"]))
    T = max(1, math.ceil(b["T"]))
    return FqiSchedule.constant(K, n, T, gates=gates, step_size=step_size, nu=nu, seed=seed)


class FittedQIteration(BaseEstimator):
    """Estimator wrapper around :func:`fqi_run`.

    ``fit(mdp, features)`` runs the iteration; ``predict`` evaluates the final
    Q-network on feature rows.  Sample and step counts may be integers
    (constant over iterations) or sequences of length ``n_iterations``.
    """

    def __init__(self, n_iterations=25, n_samples=2000, n_steps=2000, n_gates=32,
                 step_size="backtracking", nu=None, random_state=0):
        self.n_iterations = n_iterations
        self.n_samples = n_samples
        self.n_steps = n_steps
        self.n_gates = n_gates
        self.step_size = step_size
        self.nu = nu
        self.random_state = random_state

    def _schedule(self) -> FqiSchedule:
        K = self.n_iterations
        samples = (self.n_samples,) * K if np.isscalar(self.n_samples) else tuple(self.n_samples)
        steps = (self.n_steps,) * K if np.isscalar(self.n_steps) else tuple(self.n_steps)
        return FqiSchedule(samples, steps, gates=self.n_gates, step_size=self.step_size,
                           nu=self.nu, seed=int(self.random_state or 0))

    def fit(self, mdp: TabularMDP, features: FeatureMap):
        result = fqi_run(mdp, features, self._schedule())
        self.network_ = result.network
        self.policy_ = result.policy
        self.q_table_ = result.q_table
        self.record_ = result.record
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        return network_forward(self.network_, np.atleast_2d(np.asarray(X, dtype=float)))
