"""Finite MDPs, a generative sampler, featurization and exact DP oracles.

The Q-learning code only ever touches an MDP through :func:`sample_batch`
(the generative model).  Everything else here (value iteration, policy
evaluation, performance gaps) uses the transition table directly and is
meant as ground truth for tests and diagnostics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TabularMDP",
    "FeatureMap",
    "SamplePair",
    "TransitionBatch",
    "sample_transition",
    "sample_batch",
    "bellman_operator",
    "policy_bellman_operator",
    "value_iteration_qstar",
    "policy_evaluation_q",
    "greedy_policy",
    "performance_gap",
    "uniform_distribution",
    "make_feature_map",
    "chain_mdp",
    "benchmark_chain",
    "benchmark_mdp",
    "one_state_mdp",
    "mdp_from_dict",
    "mdp_to_dict",
    "load_mdp",
]


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite discounted MDP ``(P, r, gamma)`` with rewards in ``[0, r_max]``.

    ``reward_noise`` (a scalar or an ``(S, A)`` array) is the half-width of a symmetric uniform perturbation of the mean reward, truncated per pair so
    the sampled reward stays in ``[0, r_max]`` and its mean stays at
    ``reward[s, a]``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float = 1.0
    reward_noise: float | np.ndarray = 0.0

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ValueError(f"reward must have shape {P.shape[:2]}, got {r.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError("need at least one state and one action")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every transition row must be a probability vector")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if np.any(r < 0) or np.any(r > self.r_max):
            raise ValueError("mean rewards must lie in [0, r_max]")
        noise = np.array(self.reward_noise, dtype=float)
        if noise.ndim not in (0, 2) or (noise.ndim == 2 and noise.shape != r.shape):
            raise ValueError(f"reward_noise must be a scalar or have shape {r.shape}")
        if np.any(noise < 0):
            raise ValueError("reward_noise must be nonnegative")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))
        if noise.ndim == 0:
            noise = float(noise)
        else:
            noise.setflags(write=False)
        object.__setattr__(self, "reward_noise", noise)
        # per-pair noise half-width that keeps r' inside [0, r_max] with unchanged mean
        half = np.minimum(noise, np.minimum(r, self.r_max - r))
        half.setflags(write=False)
        object.__setattr__(self, "_noise_half_width", half)
        cdf = np.cumsum(P, axis=2)
        cdf[..., -1] = 1.0
        cdf.setflags(write=False)
        object.__setattr__(self, "_cdf", cdf)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    @property
    def q_max(self) -> float:
        """Upper bound ``r_max / (1 - gamma)`` on any Q-value."""
        return self.r_max / (1.0 - self.gamma)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Deterministic embedding of state-action pairs into ``[0, 1]^dim``.

    Row ``s * num_actions + a`` of ``table`` is the feature vector of ``(s, a)``.
    """

    table: np.ndarray
    num_states: int
    num_actions: int

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.shape[0] != self.num_states * self.num_actions:
            raise ValueError("feature table needs one row per state-action pair")
        if table.ndim != 2 or table.shape[1] < 2:
            raise ValueError("feature dimension must be at least 2")
        if np.any(table < 0) or np.any(table > 1):
            raise ValueError("features must lie in [0, 1]")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def index(self, states, actions):
        return np.asarray(states) * self.num_actions + np.asarray(actions)

    def embed(self, states, actions) -> np.ndarray:
        return self.table[self.index(states, actions)]


@dataclass(frozen=True)
class SamplePair:
    state: int
    action: int
    next_state: int
    reward: float
    features: np.ndarray | None = field(default=None, compare=False)


@dataclass(frozen=True, eq=False)
class TransitionBatch:
    """Vectorized collection of generative-model queries."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray

    def __len__(self):
        return len(self.states)

    def pairs(self, features: FeatureMap | None = None) -> list[SamplePair]:
        out = []
        for s, a, s2, r in zip(self.states, self.actions, self.next_states, self.rewards):
            feat = features.embed(s, a) if features is not None else None
            out.append(SamplePair(int(s), int(a), int(s2), float(r), feat))
        return out

    @classmethod
    def from_pairs(cls, pairs) -> "TransitionBatch":
        pairs = list(pairs)
        return cls(
            states=np.array([p.state for p in pairs], dtype=int),
            actions=np.array([p.action for p in pairs], dtype=int),
            next_states=np.array([p.next_state for p in pairs], dtype=int),
            rewards=np.array([p.reward for p in pairs], dtype=float),
        )


def _check_pairs(mdp: TabularMDP, states, actions):
    states = np.asarray(states, dtype=int)
    actions = np.asarray(actions, dtype=int)
    if states.shape != actions.shape:
        raise ValueError("states and actions must have the same shape")
    if np.any((states < 0) | (states >= mdp.num_states)):
        raise IndexError("state index out of range")
    if np.any((actions < 0) | (actions >= mdp.num_actions)):
        raise IndexError("action index out of range")
    return states, actions


def sample_batch(mdp: TabularMDP, states, actions, rng: np.random.Generator) -> TransitionBatch:
    """Query the generative model once for every ``(states[i], actions[i])``.

    Uses exactly two uniform draws per query (next state, reward noise), in
    that order, so results are reproducible given the generator state.
    """
    states, actions = _check_pairs(mdp, states, actions)
    n = states.size
    u_next = rng.random(n)
    u_noise = rng.random(n)
    cdf = mdp._cdf[states, actions]
    next_states = (u_next[:, None] >= cdf).sum(axis=1)
    next_states = np.minimum(next_states, mdp.num_states - 1)
    mean = mdp.reward[states, actions]
    half = mdp._noise_half_width[states, actions]
    rewards = np.clip(mean + half * (2.0 * u_noise - 1.0), 0.0, mdp.r_max)
    return TransitionBatch(states, actions, next_states.astype(int), rewards)


def sample_transition(mdp: TabularMDP, s: int, a: int, rng: np.random.Generator,
                      features: FeatureMap | None = None) -> SamplePair:
    """Single call of the one-step generative model."""
    batch = sample_batch(mdp, [s], [a], rng)
    return batch.pairs(features)[0]


def bellman_operator(mdp: TabularMDP, q: np.ndarray) -> np.ndarray:
    """Exact optimality operator ``r + gamma * P max_a' q``."""
    q = np.asarray(q, dtype=float).reshape(mdp.num_states, mdp.num_actions)
    return mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)


def policy_bellman_operator(mdp: TabularMDP, q: np.ndarray, policy) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(mdp.num_states, mdp.num_actions)
    v = q[np.arange(mdp.num_states), np.asarray(policy, dtype=int)]
    return mdp.reward + mdp.gamma * mdp.transition @ v


def _iterate_to_tolerance(operator, q0, tol, gamma, max_iter):
    # stopping at ||q_{t+1} - q_t|| <= tol (1 - gamma) gives ||T q_{t+1} - q_{t+1}|| <= tol
    q = q0
    target = tol * (1.0 - gamma)
    for _ in range(max_iter):
        q_next = operator(q)
        if np.max(np.abs(q_next - q)) <= target:
            return q_next
        q = q_next
    raise RuntimeError(f"fixed-point iteration did not reach tol={tol} in {max_iter} sweeps")


def value_iteration_qstar(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal Q table with sup-norm Bellman residual at most ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q0 = np.zeros((mdp.num_states, mdp.num_actions))
    q = _iterate_to_tolerance(lambda q: bellman_operator(mdp, q), q0, tol, mdp.gamma, max_iter)
    return np.clip(q, 0.0, mdp.q_max)


def policy_evaluation_q(mdp: TabularMDP, policy, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Q table of a deterministic policy, by fixed-point iteration."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    policy = np.asarray(policy, dtype=int)
    if policy.shape != (mdp.num_states,):
        raise ValueError(f"policy must assign one action per state, got shape {policy.shape}")
    if np.any((policy < 0) | (policy >= mdp.num_actions)):
        raise IndexError("policy action out of range")
    q0 = np.zeros((mdp.num_states, mdp.num_actions))
    return _iterate_to_tolerance(lambda q: policy_bellman_operator(mdp, q, policy), q0, tol,
                                 mdp.gamma, max_iter)


def greedy_policy(q) -> np.ndarray:
    """Per-state argmax; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2:
        raise ValueError("q must be a (num_states, num_actions) table")
    return np.argmax(q, axis=1)


def uniform_distribution(mdp: TabularMDP) -> np.ndarray:
    return np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_pairs)


def _as_distribution(mdp: TabularMDP, mu) -> np.ndarray:
    if mu is None:
        return uniform_distribution(mdp)
    mu = np.asarray(mu, dtype=float)
    if mu.size != mdp.num_pairs:
        raise ValueError(f"distribution has {mu.size} entries, expected {mdp.num_pairs}")
    mu = mu.reshape(mdp.num_states, mdp.num_actions)
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-9:
        raise ValueError("distribution must be nonnegative and sum to 1")
    return mu


def performance_gap(mdp: TabularMDP, q_est, mu=None, q_star=None, tol: float = 1e-10) -> float:
    """``E_mu[Q* - Q^pi]`` for the greedy policy ``pi`` of ``q_est``."""
    q_est = np.asarray(q_est, dtype=float)
    if q_est.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"q_est must have shape {(mdp.num_states, mdp.num_actions)}")
    mu = _as_distribution(mdp, mu)
    if q_star is None:
        q_star = value_iteration_qstar(mdp, tol)
    q_pi = policy_evaluation_q(mdp, greedy_policy(q_est), tol)
    return float(np.sum(mu * (q_star - q_pi)))


def make_feature_map(num_states: int, num_actions: int, dim: int = 4, seed: int = 0) -> FeatureMap:
    """Embed ``(s, a)`` into ``[0, 1]^dim``.

    Coordinate 0 is the state index and coordinate 1 the action index, each
    spread evenly over ``(0, 1]`` as ``(i + 1) / count``.  Every row of the
    last state or last action thus has a unit coordinate, which an
    L1-bounded network needs to reach outputs near ``r_max / (1 - gamma)``.  The remaining ``dim - 2`` coordinates are a
    seeded Gaussian projection of the one-hot pair passed through a logistic
    squash.  The first two coordinates alone make the map injective.
    """
    if dim < 2:
        raise ValueError("feature dimension must be at least 2")
    s_idx, a_idx = np.meshgrid(np.arange(num_states), np.arange(num_actions), indexing="ij")
    s_idx, a_idx = s_idx.ravel(), a_idx.ravel()
    s_coord = (s_idx + 1) / num_states
    a_coord = (a_idx + 1) / num_actions
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((num_states * num_actions, dim - 2))
    extra = 1.0 / (1.0 + np.exp(-W))
    table = np.column_stack([s_coord, a_coord, extra])
    return FeatureMap(table, num_states, num_actions)


def chain_mdp(num_states: int = 5, gamma: float = 0.9, p_forward: float = 0.7,
              small_reward: float = 0.3, reward_noise: float = 0.5) -> TabularMDP:
    """Classic two-action walk-right chain.

    Action 0 moves left deterministically and pays ``small_reward`` when taken
    in state 0.  Action 1 moves right with probability ``p_forward`` (otherwise
    stays) and pays 1 when taken in the last state.  A short planning horizon
    prefers the nearby small reward; the optimal policy walks right.
    """
    S = num_states
    P = np.zeros((S, 2, S))
    r = np.zeros((S, 2))
    for s in range(S):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, S - 1)] += p_forward
        P[s, 1, s] += 1.0 - p_forward
    r[0, 0] = small_reward
    r[S - 1, 1] = 1.0
    return TabularMDP(P, r, gamma, r_max=1.0, reward_noise=reward_noise)


BENCHMARK_MARGINS = (0.036, 0.06, 0.12)


def benchmark_chain(gamma: float = 0.9, margins=BENCHMARK_MARGINS, tie_reward: float = 0.3,
                    exit_reward: float = 0.6, home_reward: float = 0.321,
                    home_margin: float = 0.18) -> TabularMDP:
    """Relay chain whose greedy-policy gap shrinks steadily with the sample size.

    States ``0 .. k-1`` (``k = len(margins)``) form a relay.  In relay state
    ``i`` action 1 passes to state ``i + 1`` (the last one passes to the home
    state ``k + 1``) and action 0 exits to the tie state ``k``, paying
    ``exit_reward``.  Passing on is optimal by ``margins[i]``.  The tie state
    is absorbing with two identical actions whose rewards are uniform on
    ``[0, 2 tie_reward]``; taking the max of their noisy estimates
    overestimates its value by an amount that shrinks like ``n^{-1/2}``, and
    every relay state exits once that overestimate exceeds its margin.  All
    relay decisions hinge on the same estimate, so the gap is a step function
    of one statistic and its median over seeds is stable.  The home state
    stays put for ``home_reward`` (action 0) or restarts the relay (action 1,
    worse by ``home_margin``), which makes the first relay decision count.

    Exits are paid up front, so stopping the iteration early also favours
    exiting; the gap therefore shrinks with the number of iterations too.
    The default rewards keep ``Q*`` near 3, well inside what an L1-bounded
    network over the default feature map can represent.
    """
    margins = np.asarray(margins, dtype=float)
    if margins.ndim != 1 or margins.size < 1 or np.any(margins <= 0):
        raise ValueError("margins must be a nonempty sequence of positive numbers")
    k = margins.size
    tie, home = k, k + 1
    S = k + 2
    P = np.zeros((S, 2, S))
    r = np.zeros((S, 2))
    noise = np.zeros((S, 2))
    v_exit = exit_reward + gamma * tie_reward / (1.0 - gamma)
    v_next = home_reward / (1.0 - gamma)
    for i in reversed(range(k)):
        v_here = v_exit + margins[i]
        P[i, 0, tie] = 1.0
        r[i, 0] = exit_reward
        P[i, 1, i + 1 if i + 1 < k else home] = 1.0
        r[i, 1] = v_here - gamma * v_next
        v_next = v_here
    P[tie, :, tie] = 1.0
    r[tie, :] = tie_reward
    noise[tie, :] = tie_reward
    P[home, 0, home] = 1.0
    r[home, 0] = home_reward
    P[home, 1, 0] = 1.0
    r[home, 1] = home_reward / (1.0 - gamma) - home_margin - gamma * v_next
    if np.any(r < 0) or np.any(r > 1):
        raise ValueError("parameters give rewards outside [0, 1]")
    return TabularMDP(P, r, gamma, r_max=1.0, reward_noise=noise)


def one_state_mdp(reward: float = 1.0, gamma: float = 0.9) -> TabularMDP:
    return TabularMDP(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma)


BENCHMARKS = {
    "chain": benchmark_chain,
    "walk_chain": chain_mdp,
    "one_state": one_state_mdp,
}


def benchmark_mdp(name: str = "chain") -> TabularMDP:
    """Named benchmark MDP with default parameters."""
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return BENCHMARKS[name]()


def mdp_from_dict(spec: dict) -> tuple[TabularMDP, FeatureMap]:
    """Build an MDP and its feature map from the JSON definition schema."""
    required = ("num_states", "num_actions", "gamma", "r_max", "transition", "reward")
    allowed = set(required) | {"reward_noise", "feature_dim", "seed"}
    missing = [k for k in required if k not in spec]
    if missing:
        raise KeyError(f"missing key(s) in MDP definition: {', '.join(missing)}")
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise KeyError(f"unknown key(s) in MDP definition: {', '.join(unknown)}")
    mdp = TabularMDP(
        transition=np.asarray(spec["transition"], dtype=float),
        reward=np.asarray(spec["reward"], dtype=float),
        gamma=spec["gamma"],
        r_max=spec["r_max"],
        reward_noise=spec.get("reward_noise", 0.0),
    )
    if (mdp.num_states, mdp.num_actions) != (spec["num_states"], spec["num_actions"]):
        raise ValueError("num_states/num_actions disagree with the transition table")
    features = make_feature_map(mdp.num_states, mdp.num_actions,
                                dim=spec.get("feature_dim", 4), seed=spec.get("seed", 0))
    return mdp, features


def mdp_to_dict(mdp: TabularMDP, feature_dim: int = 4, seed: int = 0) -> dict:
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "gamma": mdp.gamma,
        "r_max": mdp.r_max,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "reward_noise": np.asarray(mdp.reward_noise).tolist(),
        "feature_dim": feature_dim,
        "seed": seed,
    }


def load_mdp(path) -> tuple[TabularMDP, FeatureMap]:
    with open(Path(path)) as fh:
        return mdp_from_dict(json.load(fh))
