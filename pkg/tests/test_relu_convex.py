import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from convexfqi.relu_convex import (
    ConeDecomposition,
    ConvexReluRegressor,
    GateSet,
    ReluNetwork,
    SolverError,
    cone_decompose,
    cone_membership,
    convex_grad,
    convex_loss,
    convex_predict,
    enumerate_gates_exact,
    gated_design,
    l1_ball_projection,
    lipschitz_surrogate,
    network_forward,
    nonconvex_loss,
    projected_gradient_descent,
    psi_transform,
    sample_gates,
    verify_gate_sufficiency,
)
from convexfqi.verify import l1_projection_bisection


def instance(seed, n=6, d=3, k=5):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = rng.standard_normal(n)
    return X, y, sample_gates(X, k, rng), rng


class TestGates:
    def test_scalar_sign(self):
        X = np.array([[0.5]])
        for seed in range(6):
            g = np.random.default_rng(seed).standard_normal((1, 1))[0, 0]
            expected = [[True]] if g > 0 else [[False]]
            assert sample_gates(X, 1, np.random.default_rng(seed)).masks.tolist() == expected

    def test_count_one(self):
        X, _, _, rng = instance(0)
        assert sample_gates(X, 1, rng).count == 1

    def test_dedup_and_bound(self):
        X, _, _, rng = instance(1, n=4, d=2)
        g = sample_gates(X, 200, rng)
        assert g.count <= 200 and len(g.as_set()) == g.count

    def test_seeded(self):
        X, _, _, _ = instance(2)
        np.testing.assert_array_equal(sample_gates(X, 16, 5).masks, sample_gates(X, 16, 5).masks)

    @pytest.mark.parametrize("seed", range(5))
    def test_sampled_masks_are_realizable(self, seed):
        X, _, _, rng = instance(seed, n=4, d=2)
        assert sample_gates(X, 64, rng).as_set() <= enumerate_gates_exact(X).as_set()

    def test_axis_rows_all_patterns(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert enumerate_gates_exact(X).as_set() == {(a, b) for a in (False, True) for b in (False, True)}

    def test_identical_rows_share_activation(self):
        X = np.array([[0.3, 0.7], [0.3, 0.7], [0.9, 0.1]])
        for m in enumerate_gates_exact(X).masks:
            assert m[0] == m[1]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 7), st.integers(2, 4), st.integers(0, 2**16))
    def test_count_bound(self, n, d, seed):
        X = np.random.default_rng(seed).random((n, d))
        exact = enumerate_gates_exact(X)
        assert exact.count <= 2 ** n
        assert len(exact.as_set()) == exact.count

    def test_witnesses_realize_masks(self):
        X, _, _, _ = instance(3, n=5, d=3)
        exact = enumerate_gates_exact(X)
        for m, u in zip(exact.masks, exact.directions):
            z = X @ u
            assert np.all(z[m] >= 1 - 1e-7) and np.all(z[~m] <= 1e-7)

    def test_enumeration_refuses_large_n(self):
        with pytest.raises(ValueError):
            enumerate_gates_exact(np.random.default_rng(0).random((13, 2)))


class TestObjective:
    def test_zero_u(self):
        X, y, g, _ = instance(0)
        assert convex_loss(np.zeros((g.count, 3)), g, X, y) == pytest.approx(y @ y)

    def test_interpolation(self):
        rng = np.random.default_rng(1)
        X = rng.random((3, 3))
        y = rng.standard_normal(3)
        u = np.linalg.solve(X, y)[None, :]
        assert convex_loss(u, np.ones((1, 3), bool), X, y) == pytest.approx(0.0, abs=1e-20)

    def test_gated_design_matches_predict(self):
        X, _, g, rng = instance(2)
        u = rng.standard_normal((g.count, 3))
        np.testing.assert_allclose(gated_design(g, X) @ u.ravel(), convex_predict(u, g, X), atol=1e-12)

    def test_shape_mismatch(self):
        X, y, g, _ = instance(3)
        with pytest.raises(ValueError):
            convex_loss(np.zeros((g.count, 2)), g, X, y)
        with pytest.raises(ValueError):
            convex_loss(np.zeros((g.count, 3)), g, X, y[:-1])

    def test_grad_zero(self):
        X, _, g, _ = instance(4)
        assert not np.any(convex_grad(np.zeros((g.count, 3)), g, X, np.zeros(6)))

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_central_difference(self, seed):
        X, y, g, rng = instance(seed)
        u = rng.standard_normal((g.count, 3))
        grad = convex_grad(u, g, X, y)
        h = 1e-6
        for idx in np.ndindex(u.shape):
            e = np.zeros_like(u)
            e[idx] = h
            fd = (convex_loss(u + e, g, X, y) - convex_loss(u - e, g, X, y)) / (2 * h)
            assert abs(grad[idx] - fd) <= 1e-5

    def test_grad_vanishes_at_unconstrained_minimizer(self):
        X, y, g, _ = instance(5, n=8, d=3, k=3)
        A = gated_design(g, X)
        u = np.linalg.lstsq(A, y, rcond=None)[0].reshape(g.count, 3)
        assert np.linalg.norm(convex_grad(u, g, X, y)) <= 1e-8


class TestProjection:
    def test_inside_unchanged(self):
        x = np.array([0.2, -0.3])
        np.testing.assert_array_equal(l1_ball_projection(x, 1.0), x)

    @pytest.mark.parametrize("x, expected", [((2.0, 0.0), (1.0, 0.0)), ((3.0, 1.0), (1.0, 0.0))])
    def test_hand_cases(self, x, expected):
        np.testing.assert_allclose(l1_ball_projection(np.array(x), 1.0), expected, atol=1e-15)

    def test_rejects_bad_radius(self):
        with pytest.raises(ValueError):
            l1_ball_projection(np.ones(2), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-100, 100)),
           st.floats(0.01, 50))
    def test_matches_bisection_and_idempotent(self, x, radius):
        p = l1_ball_projection(x, radius)
        assert np.abs(p).sum() <= radius + 1e-12
        np.testing.assert_allclose(p, l1_projection_bisection(x, radius), atol=1e-9)
        np.testing.assert_allclose(l1_ball_projection(p, radius), p, atol=1e-12)

    def test_closer_than_random_feasible_points(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.standard_normal(8) * 3
            p = l1_ball_projection(x, 1.0)
            z = rng.standard_normal((10_000, 8))
            z *= (rng.random((10_000, 1)) / np.abs(z).sum(axis=1, keepdims=True))
            assert np.linalg.norm(x - p) <= np.min(np.linalg.norm(x - z, axis=1)) + 1e-12


class TestPGD:
    def test_zero_target_fixed_point(self):
        X, _, g, _ = instance(0)
        res = projected_gradient_descent(X, np.zeros(6), g, 1.0, 50)
        assert not np.any(res.u) and res.loss == 0.0

    @pytest.mark.parametrize("mode", ["backtracking", "theory", 0.01])
    def test_iterates_feasible(self, mode):
        X, y, g, _ = instance(1)
        y = y * 10
        seen = []
        import convexfqi.relu_convex as rc
        original = rc.l1_ball_projection

        def spy(x, r):
            out = original(x, r)
            seen.append(np.abs(out).sum())
            return out

        rc.l1_ball_projection = spy
        try:
            res = projected_gradient_descent(X, y, g, 0.7, 200, mode)
        finally:
            rc.l1_ball_projection = original
        assert max(seen) <= 0.7 + 1e-12
        assert np.abs(res.u).sum() <= 0.7 + 1e-12
        assert res.losses.shape == (201,)

    def test_backtracking_monotone(self):
        X, y, g, _ = instance(2, n=8, k=8)
        res = projected_gradient_descent(X, 5 * y, g, 2.0, 500)
        assert np.all(np.diff(res.losses) <= 1e-10 * max(res.losses[0], 1.0))

    def test_theory_step(self):
        X, y, g, _ = instance(3)
        res = projected_gradient_descent(X, y, g, 2.0, 99, "theory")
        L = lipschitz_surrogate(gated_design(g, X), y)
        assert res.lipschitz == pytest.approx(L)
        np.testing.assert_allclose(res.step_sizes, 2.0 / (L * 10.0))

    def test_tiny_instance_reaches_reference(self):
        cvxpy = pytest.importorskip("cvxpy")
        X, y, g, _ = instance(4, n=3, d=2, k=2)
        A = gated_design(g, X)
        z = cvxpy.Variable(A.shape[1])
        prob = cvxpy.Problem(cvxpy.Minimize(cvxpy.sum_squares(A @ z - y)), [cvxpy.norm1(z) <= 0.5])
        prob.solve(solver=cvxpy.CLARABEL)
        res = projected_gradient_descent(X, y, g, 0.5, 5000)
        assert res.loss - prob.value <= 1e-4

    def test_more_gates_never_hurt(self):
        X, y, g, _ = instance(5, n=5, d=2, k=3)
        full = enumerate_gates_exact(X)
        r_sub = projected_gradient_descent(X, y, g, np.inf, 20_000)
        r_full = projected_gradient_descent(X, y, full, np.inf, 20_000)
        A_sub, A_full = gated_design(g, X), gated_design(full, X)
        opt_sub = np.sum((A_sub @ np.linalg.lstsq(A_sub, y, rcond=None)[0] - y) ** 2)
        opt_full = np.sum((A_full @ np.linalg.lstsq(A_full, y, rcond=None)[0] - y) ** 2)
        assert opt_full <= opt_sub + 1e-8
        assert r_full.loss <= r_sub.loss + 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_aborts(self):
        X, y, g, _ = instance(6)
        with pytest.raises(SolverError, match="non-finite"):
            projected_gradient_descent(X, y * 1e200, g, np.inf, 5, 1e10)

    def test_bad_arguments(self):
        X, y, g, _ = instance(7)
        with pytest.raises(ValueError):
            projected_gradient_descent(X, y, g, 1.0, 0)
        with pytest.raises(ValueError):
            projected_gradient_descent(X, y, g, -1.0, 5)
        with pytest.raises(ValueError):
            projected_gradient_descent(X, y, g, 1.0, 5, "newton")


class TestConeAndPsi:
    def test_self_membership(self):
        X, _, _, rng = instance(0)
        u = rng.standard_normal(3)
        mask = X @ u > 0
        dec = cone_decompose(u[None, :], mask[None, :], X)
        np.testing.assert_array_equal(dec.v[0], u)
        assert not np.any(dec.w)

    def test_zero(self):
        X, _, g, _ = instance(1)
        dec = cone_decompose(np.zeros((g.count, 3)), g, X)
        assert not np.any(dec.v) and not np.any(dec.w)

    @pytest.mark.parametrize("seed", range(8))
    def test_general_split(self, seed):
        X, _, g, rng = instance(seed, n=7, d=3, k=8)
        u = rng.standard_normal((g.count, 3))
        dec = cone_decompose(u, g, X)
        np.testing.assert_allclose(dec.v - dec.w, u, atol=1e-9)
        for i, m in enumerate(g.masks):
            assert cone_membership(dec.v[i], m, X) and cone_membership(dec.w[i], m, X)

    def test_unrealizable_mask(self):
        X = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(SolverError):
            cone_decompose(np.array([[1.0, -2.0]]), np.array([[True, False]]), X)

    def test_psi_cases(self):
        v = np.array([[1.0, 2.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        w = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0], [2.0, 0.0]])
        net = psi_transform(ConeDecomposition(v, w))
        np.testing.assert_array_equal(net.U, [[1, 2], [3, 4], [1, 1], [2, 0]])
        np.testing.assert_array_equal(net.alpha, [1, -1, 1, -1])
        assert psi_transform(ConeDecomposition(np.zeros((2, 2)), np.zeros((2, 2)))).m == 0

    def test_forward(self):
        net = ReluNetwork(np.array([[1.0, 0.0]]), np.array([1.0]))
        assert network_forward(net, [0.5, 0.3]) == 0.5
        assert network_forward(ReluNetwork(net.U, [-1.0]), [0.5, 0.3]) == -0.5
        with pytest.raises(ValueError):
            network_forward(net, [0.5, 0.3, 0.1])

    def test_alpha_restricted(self):
        with pytest.raises(ValueError):
            ReluNetwork(np.ones((1, 2)), [0.5])

    @pytest.mark.parametrize("seed", range(5))
    def test_psi_reproduces_convex_predictions(self, seed):
        X, y, g, _ = instance(seed, n=8, d=4, k=8)
        res = projected_gradient_descent(X, y, g, 3.0, 300)
        net = psi_transform(cone_decompose(res.u, g, X))
        np.testing.assert_allclose(network_forward(net, X), convex_predict(res.u, g, X), atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 4), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_loss_equality(self, n, d, k, seed):
        rng = np.random.default_rng(seed)
        X = rng.random((n, d))
        y = rng.standard_normal(n)
        g = sample_gates(X, k, rng)
        u = rng.standard_normal((g.count, d))
        net = psi_transform(cone_decompose(u, g, X))
        assert abs(nonconvex_loss(net, X, y, 0.0) - convex_loss(u, g, X, y)) <= 1e-8

    def test_nonconvex_loss_penalty(self):
        X, y, _, rng = instance(2)
        assert nonconvex_loss(ReluNetwork.empty(3), X, y) == pytest.approx(y @ y)
        net = ReluNetwork(rng.standard_normal((3, 3)), [1.0, -1.0, 1.0])
        extra = nonconvex_loss(net, X, y, 0.25) - nonconvex_loss(net, X, y, 0.0)
        assert extra == pytest.approx(0.25 * (np.sum(net.U ** 2) + 3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**16))
    def test_forward_bound(self, m, d, seed):
        rng = np.random.default_rng(seed)
        net = ReluNetwork(rng.standard_normal((m, d)), rng.choice([-1.0, 0.0, 1.0], m))
        x = rng.random((64, d))
        bound = np.abs(net.U[net.alpha != 0]).sum()
        assert np.all(np.abs(network_forward(net, x)) <= bound + 1e-12)

    def test_radius_bounds_network_output(self):
        X, y, g, rng = instance(3, n=8, d=4, k=8)
        net = psi_transform(cone_decompose(projected_gradient_descent(X, 50 * y, g, 2.0, 300).u, g, X))
        assert np.all(np.abs(network_forward(net, rng.random((500, 4)))) <= 2.0 + 1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 5), st.integers(0, 2**16))
    def test_lipschitz_in_parameters(self, m, d, seed):
        rng = np.random.default_rng(seed)
        U1 = rng.standard_normal((m, d))
        delta = rng.standard_normal((m, d))
        delta *= rng.uniform(0, 0.99) / np.abs(delta).sum()
        alpha = rng.choice([-1.0, 1.0], m)
        x = rng.random((200, d))
        diff = np.abs(network_forward(ReluNetwork(U1, alpha), x) - network_forward(ReluNetwork(U1 + delta, alpha), x))
        assert diff.max() <= np.abs(delta).sum() * d


class TestGateSufficiency:
    def test_full_set_contains_everything(self):
        X, _, _, rng = instance(0, n=5, d=2)
        net = ReluNetwork(rng.standard_normal((6, 2)), np.ones(6))
        rep = verify_gate_sufficiency(net, enumerate_gates_exact(X), X)
        # masks use >= 0, which can differ from strict patterns only on exact ties
        assert rep.all_contained

    def test_empty_network(self):
        X, _, g, _ = instance(1)
        rep = verify_gate_sufficiency(ReluNetwork.empty(3), g, X)
        assert rep.all_contained and rep.containment_fraction == 1.0

    def test_fraction_recount(self):
        X, _, _, rng = instance(2, n=6, d=3)
        g = sample_gates(X, 3, rng)
        net = ReluNetwork(rng.standard_normal((10, 3)), np.ones(10))
        rep = verify_gate_sufficiency(net, g, X)
        have = [tuple(m) for m in g.masks.tolist()]
        manual = np.mean([tuple((X @ u >= 0).tolist()) in have for u in net.U])
        assert rep.containment_fraction == pytest.approx(manual)

    def test_neuron_requirement(self):
        X, _, g, rng = instance(3)
        u = np.zeros((g.count, 3))
        u[0] = 1.0
        rep = verify_gate_sufficiency(ReluNetwork.empty(3), g, X, convex_u=u)
        assert rep.required_neurons == 1 and not rep.enough_neurons


class TestRegressor:
    def test_fit_predict(self):
        rng = np.random.default_rng(0)
        X = rng.random((40, 3))
        y = np.maximum(X @ [1.0, -1.0, 0.5], 0) + 0.2 * X[:, 0]
        est = ConvexReluRegressor(n_gates=32, radius=10.0, max_iter=3000, random_state=0).fit(X, y)
        assert est.score(X, y) > 0.95
        np.testing.assert_allclose(est.predict(X), convex_predict(est.coef_, est.gates_, X), atol=1e-9)
        assert est.train_loss_ == pytest.approx(est.loss_history_[-1], abs=1e-8)

    def test_params_round_trip(self):
        est = ConvexReluRegressor(n_gates=8, radius=2.0)
        assert est.get_params()["radius"] == 2.0
        assert est.set_params(max_iter=5).max_iter == 5

    def test_sample_weight_equals_duplication(self):
        rng = np.random.default_rng(1)
        X = rng.random((6, 2))
        y = rng.random(6)
        g = enumerate_gates_exact(X)
        w = np.array([1, 2, 1, 3, 1, 1])
        a = ConvexReluRegressor(radius=np.inf, max_iter=4000, gates=g).fit(X, y, sample_weight=w)
        Xd, yd = np.repeat(X, w, axis=0), np.repeat(y, w)
        gd = GateSet(np.repeat(g.masks, w, axis=1))
        b = ConvexReluRegressor(radius=np.inf, max_iter=4000, gates=gd).fit(Xd, yd)
        np.testing.assert_allclose(a.predict(X), b.predict(X), atol=1e-5)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ConvexReluRegressor().predict(np.zeros((1, 2)))
