"""Convex training of two-layer ReLU networks over sampled gate patterns.

A gate pattern ``D_i`` is the 0/1 activation mask ``1(X g > 0)`` of a
hyperplane through the origin.  Fixing a set of patterns turns the squared
loss of a two-layer ReLU network into a least-squares problem in stacked
per-gate weights ``u`` (shape ``(num_gates, d)``)::

    g(u) = || sum_i D_i X u_i - y ||^2

which is minimized here by projected gradient descent over an L1 ball.  A
cone decomposition ``u_i = v_i - w_i`` with ``v_i, w_i`` in the cone of
weights that reproduce ``D_i`` then maps the solution back to ReLU neurons
with output signs +1/-1 without changing the loss on the training rows.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "SolverError",
    "GateSet",
    "ReluNetwork",
    "ConeDecomposition",
    "PGDResult",
    "GateSufficiencyReport",
    "sample_gates",
    "enumerate_gates_exact",
    "gated_design",
    "convex_predict",
    "convex_loss",
    "convex_grad",
    "l1_ball_projection",
    "lipschitz_surrogate",
    "projected_gradient_descent",
    "cone_membership",
    "cone_decompose",
    "psi_transform",
    "network_forward",
    "nonconvex_loss",
    "verify_gate_sufficiency",
    "ConvexReluRegressor",
]

CONE_SLACK = 1e-9
MAX_EXACT_ROWS = 12


class SolverError(RuntimeError):
    """Raised when the convex solver or the cone decomposition cannot proceed."""


@dataclass(frozen=True, eq=False)
class GateSet:
    """Distinct activation masks, one row per gate.

    ``directions[i]`` is a weight vector realizing ``masks[i]`` when known
    (the sampled Gaussian vector, or the LP witness from exact enumeration).
    """

    masks: np.ndarray
    directions: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        masks = np.atleast_2d(np.asarray(self.masks, dtype=bool))
        if masks.shape[0] < 1:
            raise ValueError("a gate set needs at least one mask")
        object.__setattr__(self, "masks", masks)

    def __len__(self):
        return self.masks.shape[0]

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def n_rows(self) -> int:
        return self.masks.shape[1]

    def as_set(self) -> set[tuple[bool, ...]]:
        return {tuple(bool(b) for b in m) for m in self.masks}

    def to_dict(self) -> dict:
        return {"masks": self.masks.astype(int).tolist(), "seed": self.seed}


@dataclass(frozen=True, eq=False)
class ReluNetwork:
    """``f(x) = sum_i max(x . U[i], 0) * alpha[i]`` with ``alpha[i]`` in {-1, 0, 1}."""

    U: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        if U.ndim != 2 or U.shape[0] != alpha.shape[0]:
            raise ValueError("U must be (m, d) with one alpha per row")
        if not np.all(np.isin(alpha, (-1.0, 0.0, 1.0))):
            raise ValueError("alpha entries must be -1, 0 or +1")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "alpha", alpha)

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    @classmethod
    def empty(cls, dim: int) -> "ReluNetwork":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def __call__(self, x):
        return network_forward(self, x)

    def to_dict(self) -> dict:
        return {"U": self.U.tolist(), "alpha": self.alpha.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ReluNetwork":
        U = np.asarray(data["U"], dtype=float)
        return cls(U.reshape(len(data["alpha"]), -1), data["alpha"])


@dataclass(frozen=True, eq=False)
class ConeDecomposition:
    v: np.ndarray
    w: np.ndarray


@dataclass(eq=False)
class PGDResult:
    u: np.ndarray
    losses: np.ndarray
    step_sizes: np.ndarray
    lipschitz: float
    mode: str

    @property
    def loss(self) -> float:
        return float(self.losses[-1])


@dataclass
class GateSufficiencyReport:
    contained: np.ndarray
    containment_fraction: float
    all_contained: bool
    neurons: int
    required_neurons: int
    enough_neurons: bool
    missing_masks: list = field(default_factory=list)

    @property
    def satisfied(self) -> bool:
        return self.all_contained and self.enough_neurons


def _check_design(X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if y is None:
        return X
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"y has {y.shape[0]} entries but X has {X.shape[0]} rows")
    return X, y


def _gate_masks(gates) -> np.ndarray:
    return gates.masks if isinstance(gates, GateSet) else np.atleast_2d(np.asarray(gates, dtype=bool))


def _check_u(u, masks, X) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    expected = (masks.shape[0], X.shape[1])
    if u.size != expected[0] * expected[1]:
        raise ValueError(f"u must have shape {expected}, got {u.shape}")
    if masks.shape[1] != X.shape[0]:
        raise ValueError(f"gate masks have {masks.shape[1]} rows but X has {X.shape[0]}")
    return u.reshape(expected)


def _unique_masks(masks, directions=None):
    _, first = np.unique(masks, axis=0, return_index=True)
    keep = np.sort(first)
    return masks[keep], (directions[keep] if directions is not None else None)


def sample_gates(X, count: int, rng=None) -> GateSet:
    """Draw ``count`` Gaussian directions and keep the distinct masks ``1(X g > 0)``."""
    X = _check_design(X)
    if count < 1:
        raise ValueError("count must be at least 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    G = rng.standard_normal((count, X.shape[1]))
    masks = (X @ G.T > 0).T
    masks, G = _unique_masks(masks, G)
    return GateSet(masks, G, seed)


def _realizing_direction(X, mask):
    """Witness ``u`` with ``X u >= 1`` on the mask and ``X u <= 0`` off it, or None."""
    n, d = X.shape
    sign = np.where(mask, -1.0, 1.0)
    b = np.where(mask, -1.0, 0.0)
    res = linprog(np.zeros(d), A_ub=sign[:, None] * X, b_ub=b,
                  bounds=[(None, None)] * d, method="highs")
    if res.status == 0:
        return res.x
    return None


def enumerate_gates_exact(X, max_rows: int = MAX_EXACT_ROWS) -> GateSet:
    """Every realizable mask ``1(X u > 0)``, by an LP feasibility test per pattern.

    ``1(X u > 0) = mask`` is homogeneous in ``u``, so it is feasible iff
    ``X u >= 1`` on the mask and ``X u <= 0`` off it is.  Only usable for
    small ``n`` since all ``2^n`` patterns are tried.
    """
    X = _check_design(X)
    n, d = X.shape
    if n > max_rows:
        raise ValueError(f"exact enumeration is limited to {max_rows} rows, got {n}")
    masks, dirs = [], []
    for bits in itertools.product((False, True), repeat=n):
        mask = np.array(bits)
        if not mask.any():
            masks.append(mask)
            dirs.append(np.zeros(d))
            continue
        u = _realizing_direction(X, mask)
        if u is not None:
            masks.append(mask)
            dirs.append(u)
    return GateSet(np.array(masks), np.array(dirs))


def gated_design(gates, X) -> np.ndarray:
    """Stacked matrix ``[D_1 X, ..., D_k X]`` so that ``A @ u.ravel()`` is the prediction."""
    X = _check_design(X)
    masks = _gate_masks(gates)
    if masks.shape[1] != X.shape[0]:
        raise ValueError(f"gate masks have {masks.shape[1]} rows but X has {X.shape[0]}")
    # (n, k, d) -> (n, k*d), row-major in (gate, feature)
    return (masks.T[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)


def convex_predict(u, gates, X) -> np.ndarray:
    X = _check_design(X)
    masks = _gate_masks(gates)
    u = _check_u(u, masks, X)
    return np.sum(masks.T * (X @ u.T), axis=1)


def convex_loss(u, gates, X, y) -> float:
    """``|| sum_i D_i X u_i - y ||_2^2``."""
    X, y = _check_design(X, y)
    r = convex_predict(u, gates, X) - y
    return float(r @ r)


def convex_grad(u, gates, X, y) -> np.ndarray:
    """Gradient of :func:`convex_loss`; block ``i`` is ``2 (D_i X)^T residual``."""
    X, y = _check_design(X, y)
    masks = _gate_masks(gates)
    u = _check_u(u, masks, X)
    r = np.sum(masks.T * (X @ u.T), axis=1) - y
    return 2.0 * (masks * r) @ X


def l1_ball_projection(x, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{z : ||z||_1 <= radius}`` (sort-and-threshold)."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    x = np.asarray(x, dtype=float)
    shape = x.shape
    x = x.ravel()
    a = np.abs(x)
    if a.sum() <= radius or math.isinf(radius):
        return x.reshape(shape).copy()
    s = np.sort(a)[::-1]
    css = np.cumsum(s) - radius
    k = np.arange(1, s.size + 1)
    rho = np.nonzero(s * k > css)[0][-1]
    theta = css[rho] / (rho + 1.0)
    z = np.sign(x) * np.maximum(a - theta, 0.0)
    total = np.abs(z).sum()
    if total > radius:
        # rounding can leave the sum a few ulps over the radius
        z *= radius / total
    return z.reshape(shape)


def lipschitz_surrogate(A, y) -> float:
    """``2 * sigma_max(A) * ||y||``: gradient-norm bound over the sublevel set of ``u = 0``."""
    if A.size == 0:
        return 0.0
    sigma = np.linalg.norm(A, 2)
    return float(2.0 * sigma * np.linalg.norm(y))


def _step_mode(step_size):
    if isinstance(step_size, str):
        if step_size not in ("backtracking", "theory", "fixed"):
            raise ValueError(f"unknown step_size mode {step_size!r}")
        return "theory" if step_size == "fixed" else step_size
    if not step_size > 0:
        raise ValueError("a numeric step size must be positive")
    return "constant"


def projected_gradient_descent(X, y, gates, radius: float, steps: int,
                               step_size="backtracking", u0=None) -> PGDResult:
    """Minimize :func:`convex_loss` over ``||vec(u)||_1 <= radius``.

    ``step_size`` is ``"backtracking"`` (Armijo halving, monotone losses),
    ``"theory"`` (constant ``radius / (L sqrt(steps + 1))`` with ``L`` from
    :func:`lipschitz_surrogate`), or a positive float.
    ``losses[t]`` is the loss after ``t`` updates, so it has ``steps + 1`` entries.
    """
    X, y = _check_design(X, y)
    masks = _gate_masks(gates)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    mode = _step_mode(step_size)
    k, d = masks.shape[0], X.shape[1]
    A = gated_design(masks, X)
    G = A.T @ A
    b = A.T @ y
    c = float(y @ y)

    def loss(v):
        # Gram form; clamp the small negative values cancellation can produce
        return max(float(v @ (G @ v) - 2.0 * (b @ v) + c), 0.0)

    u = np.zeros(k * d) if u0 is None else l1_ball_projection(np.asarray(u0, float).ravel(), radius)
    L = lipschitz_surrogate(A, y)
    losses = np.empty(steps + 1)
    alphas = np.empty(steps)
    f = loss(u)
    losses[0] = f
    if mode == "theory":
        if math.isinf(radius):
            raise ValueError("theory step size needs a finite radius")
        alpha = radius / (L * math.sqrt(steps + 1.0)) if L > 0 else 0.0
    elif mode == "constant":
        alpha = float(step_size)
    else:
        lam = float(np.linalg.eigvalsh(G)[-1]) if G.size else 0.0
        alpha = 2.0 / lam if lam > 0 else 1.0

    for t in range(steps):
        grad = 2.0 * (G @ u - b)
        if mode == "backtracking":
            while True:
                u_new = l1_ball_projection(u - alpha * grad, radius)
                diff = u_new - u
                f_new = loss(u_new)
                if f_new <= f + grad @ diff + (diff @ diff) / (2.0 * alpha) + 1e-12 * max(f, 1.0):
                    break
                alpha *= 0.5
                if alpha < 1e-300:
                    raise SolverError("backtracking line search collapsed")
        else:
            u_new = l1_ball_projection(u - alpha * grad, radius)
            f_new = loss(u_new)
        if not math.isfinite(f_new):
            raise SolverError(f"non-finite loss at PGD step {t + 1} (step size {alpha:g})")
        u, f = u_new, f_new
        losses[t + 1] = f
        alphas[t] = alpha
    u = u.reshape(k, d)
    losses[-1] = convex_loss(u, masks, X, y)
    return PGDResult(u, losses, alphas, L, mode)


def cone_membership(u_i, mask, X, slack: float = CONE_SLACK) -> bool:
    """Whether ``(2 D - I) X u_i >= -slack``, i.e. ``u_i`` reproduces ``mask`` up to ties."""
    sign = np.where(mask, 1.0, -1.0)
    return bool(np.all(sign * (X @ u_i) >= -slack))


def _decompose_lp(u_i, SX, direction=None):
    """Minimum ``||v||_1 + ||w||_1`` split ``u_i = v - w`` with ``SX v >= 0`` and ``SX w >= 0``."""
    d = u_i.size
    SXu = SX @ u_i
    scale = max(1.0, float(np.abs(SXu).max(initial=0.0)))
    # variables [v (d), t (d), s (d)] with t >= |v|, s >= |v - u|
    I = np.eye(d)
    Z = np.zeros((d, d))
    m = SX.shape[0]
    A_ub = np.vstack([
        np.hstack([-SX, np.zeros((m, 2 * d))]),        # SX v >= margin
        np.hstack([-SX, np.zeros((m, 2 * d))]),        # SX v >= SX u + margin
        np.hstack([I, -I, Z]), np.hstack([-I, -I, Z]),
        np.hstack([I, Z, -I]), np.hstack([-I, Z, -I]),
    ])
    cost = np.concatenate([np.zeros(d), np.ones(2 * d)])
    for margin in (1e-7 * scale, 0.0):
        b_ub = np.concatenate([np.full(m, -margin), -SXu - margin, np.zeros(d), np.zeros(d), u_i, -u_i])
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * d + [(0, None)] * (2 * d),
                      method="highs", options={"primal_feasibility_tolerance": 1e-10})
        if res.status == 0:
            v = res.x[:d]
            w = v - u_i
            if np.all(SX @ v >= -CONE_SLACK) and np.all(SX @ w >= -CONE_SLACK):
                return v, w
    if direction is not None:
        # shift both parts along a direction realizing the mask
        Sg = SX @ direction
        tight = Sg <= 0
        if np.all(Sg >= 0) and np.all(SXu[tight] >= -CONE_SLACK):
            pos = ~tight
            t = float(np.max(-SXu[pos] / Sg[pos], initial=0.0))
            t = max(t, 0.0) * (1.0 + 1e-9) + 1e-12
            v, w = u_i + t * direction, t * direction
            if np.all(SX @ v >= -CONE_SLACK) and np.all(SX @ w >= -CONE_SLACK):
                return v, w
    return None


def cone_decompose(u, gates, X, slack: float = CONE_SLACK) -> ConeDecomposition:
    """Split each ``u_i`` into ``v_i - w_i`` with both parts in the cone of mask ``i``."""
    X = _check_design(X)
    masks = _gate_masks(gates)
    u = _check_u(u, masks, X)
    directions = gates.directions if isinstance(gates, GateSet) else None
    # duplicate rows give identical constraints
    Xu_rows, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    v = np.zeros_like(u)
    w = np.zeros_like(u)
    for i, (u_i, mask) in enumerate(zip(u, masks)):
        if not np.any(u_i):
            continue
        if cone_membership(u_i, mask, X, slack):
            v[i] = u_i
            continue
        if cone_membership(-u_i, mask, X, slack):
            w[i] = -u_i
            continue
        row_mask = np.zeros(Xu_rows.shape[0], dtype=bool)
        row_mask[inverse[mask]] = True
        if np.any(row_mask[inverse] != mask):
            raise SolverError(f"gate {i}: identical rows have different activations; mask is not realizable")
        SX = np.where(row_mask, 1.0, -1.0)[:, None] * Xu_rows
        direction = directions[i] if directions is not None else None
        found = _decompose_lp(u_i, SX, direction)
        if found is None:
            raise SolverError(f"gate {i}: no cone decomposition exists; mask is likely not realizable on X")
        v[i], w[i] = found
    return ConeDecomposition(v, w)


def psi_transform(dec: ConeDecomposition) -> ReluNetwork:
    """Neurons ``(v_i, +1)`` for nonzero ``v_i`` and ``(w_i, -1)`` for nonzero ``w_i``."""
    v = np.asarray(dec.v, dtype=float)
    w = np.asarray(dec.w, dtype=float)
    rows, signs = [], []
    for v_i, w_i in zip(v, w):
        if np.any(v_i):
            rows.append(v_i)
            signs.append(1.0)
        if np.any(w_i):
            rows.append(w_i)
            signs.append(-1.0)
    if not rows:
        return ReluNetwork.empty(v.shape[1])
    return ReluNetwork(np.array(rows), np.array(signs))


def network_forward(net: ReluNetwork, x) -> np.ndarray | float:
    """Evaluate the network on one feature vector or on the rows of a matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.dim:
        raise ValueError(f"input has dimension {X.shape[1]}, network expects {net.dim}")
    out = np.maximum(X @ net.U.T, 0.0) @ net.alpha
    return float(out[0]) if single else out


def nonconvex_loss(net: ReluNetwork, X, y, beta: float = 0.0) -> float:
    """Squared loss of the network plus ``beta (sum ||U_i||^2 + sum alpha_i^2)``."""
    X, y = _check_design(X, y)
    r = network_forward(net, X) - y
    penalty = beta * (float(np.sum(net.U ** 2)) + float(np.sum(net.alpha ** 2))) if beta else 0.0
    return float(r @ r) + penalty


def verify_gate_sufficiency(net_ref: ReluNetwork, gates, X, convex_u=None) -> GateSufficiencyReport:
    """Check which activation masks of a reference network appear among ``gates``.

    Also compares the reference width with the number of neurons a convex
    solution ``convex_u`` needs (nonzero per-gate blocks).
    """
    X = _check_design(X)
    have = GateSet(_gate_masks(gates)).as_set()
    ref_masks = (X @ net_ref.U.T >= 0).T if net_ref.m else np.zeros((0, X.shape[0]), dtype=bool)
    contained = np.array([tuple(bool(b) for b in m) in have for m in ref_masks], dtype=bool)
    missing = [m.astype(int).tolist() for m, ok in zip(ref_masks, contained) if not ok]
    required = 0
    if convex_u is not None:
        required = int(np.count_nonzero(np.any(np.asarray(convex_u) != 0, axis=1)))
    fraction = float(contained.mean()) if contained.size else 1.0
    return GateSufficiencyReport(
        contained=contained,
        containment_fraction=fraction,
        all_contained=bool(contained.all()),
        neurons=net_ref.m,
        required_neurons=required,
        enough_neurons=net_ref.m >= required,
        missing_masks=missing,
    )


class ConvexReluRegressor(RegressorMixin, BaseEstimator):
    """Two-layer ReLU regressor trained through its convex reformulation.

    Parameters
    ----------
    n_gates : int
        Number of Gaussian directions drawn to sample gate masks (duplicates
        are merged, so fewer gates may remain).
    radius : float
        L1 bound on the stacked convex weights; ``np.inf`` disables projection.
    max_iter : int
        Projected gradient steps.
    step_size : {"backtracking", "theory"} or float
    gates : GateSet, optional
        Use these masks instead of sampling.  Masks must match the rows of the
        training matrix.
    random_state : int, Generator or None

    Attributes
    ----------
    gates_ : GateSet
    coef_ : ndarray of shape (n_gates_, n_features)
        Convex weights ``u``.
    network_ : ReluNetwork
    loss_history_ : ndarray
    train_loss_ : float
        Squared loss of ``network_`` on the training data.
    """

    def __init__(self, n_gates=32, radius=1.0, max_iter=1000, step_size="backtracking",
                 gates=None, random_state=None):
        self.n_gates = n_gates
        self.radius = radius
        self.max_iter = max_iter
        self.step_size = step_size
        self.gates = gates
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        X_fit, y_fit = X, y
        if sample_weight is not None:
            # sqrt-weight scaling keeps every activation sign, so masks are unchanged
            sw = np.sqrt(np.asarray(sample_weight, dtype=float).ravel())
            if sw.shape[0] != X.shape[0] or np.any(~np.isfinite(sw)):
                raise ValueError("sample_weight must be finite with one entry per row")
            X_fit, y_fit = X * sw[:, None], y * sw
        if self.gates is not None:
            gates = self.gates
            if gates.n_rows != X.shape[0]:
                raise ValueError("supplied gates do not match the number of training rows")
        else:
            rng = self.random_state
            if not isinstance(rng, np.random.Generator):
                rng = np.random.default_rng(rng)
            gates = sample_gates(X, self.n_gates, rng)
        self.n_features_in_ = X.shape[1]
        result = projected_gradient_descent(X_fit, y_fit, gates, self.radius, self.max_iter, self.step_size)
        self.gates_ = gates
        self.coef_ = result.u
        self.loss_history_ = result.losses
        self.lipschitz_ = result.lipschitz
        dec = cone_decompose(result.u, gates, X)
        self.decomposition_ = dec
        self.network_ = psi_transform(dec)
        self.train_loss_ = nonconvex_loss(self.network_, X_fit, y_fit)
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return network_forward(self.network_, X)
