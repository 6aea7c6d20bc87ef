import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import convexfqi.sweep as sweep_mod
from convexfqi.fqi import FqiSchedule
from convexfqi.mdp import TabularMDP, make_feature_map
from convexfqi.sweep import SweepCell, estimate_floor, fit_loglog_slope, sample_complexity_sweep, summarize_cells

GRID = [250, 1000, 4000, 16000]


class TestSlopeFitter:
    def test_injected_half_power(self):
        ns = np.array(GRID)
        slope, intercept, ok, used = fit_loglog_slope(ns, 3.0 * ns ** -0.5)
        assert ok and used == GRID
        assert slope == pytest.approx(-0.5, abs=1e-6)
        assert intercept == pytest.approx(np.log(3.0), abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-2.0, 2.0), st.floats(0.01, 100.0), st.floats(0.0, 1.0))
    def test_recovers_injected_slope_above_floor(self, b, c, floor):
        ns = np.array([100, 400, 1600, 6400, 25600])
        slope, _, ok, _ = fit_loglog_slope(ns, floor + c * ns ** b, floor=floor)
        assert ok and slope == pytest.approx(b, abs=1e-6)

    def test_constant_gaps(self):
        ns = GRID
        floor = estimate_floor(dict(zip(ns, [0.2] * 4)))
        slope, _, ok, used = fit_loglog_slope(ns, [0.2] * 4, floor)
        assert (slope, ok, used) == (0.0, False, [])

    def test_floor_is_largest_budget_median(self):
        assert estimate_floor({250: 0.5, 16000: 0.1, 1000: 0.3}) == 0.1

    def test_summary_drops_floor_point(self):
        cells = [SweepCell(n, s, g) for n, g in zip(GRID, [0.9, 0.5, 0.3, 0.1]) for s in range(5)]
        res = summarize_cells(cells, GRID, range(5))
        assert res.floor == 0.1 and res.fit_points == [250, 1000, 4000]
        expected = np.polyfit(np.log(GRID[:3]), np.log([0.8, 0.4, 0.2]), 1)[0]
        assert res.slope == pytest.approx(expected)
        assert np.isfinite(res.summary()["slope"])


def tiny():
    m = TabularMDP(np.ones((1, 2, 1)), np.array([[0.5, 0.4]]), 0.5, reward_noise=0.3)
    return m, make_feature_map(1, 2)


class TestSweep:
    def test_cardinality(self):
        m, F = tiny()
        res = sample_complexity_sweep(m, F, FqiSchedule.constant(2, 1, 20, gates=4), [4, 8, 16, 64], range(5))
        assert len(res.cells) == 20 and res.success_fraction == 1.0
        assert {(c.n, c.seed) for c in res.cells} == {(n, s) for n in [4, 8, 16, 64] for s in range(5)}
        assert np.isfinite(res.slope)

    def test_failed_cell_recorded(self, monkeypatch):
        m, F = tiny()
        real = sweep_mod.fqi_run

        def flaky(mdp, features, schedule, **kw):
            if schedule.seed == 3 and schedule.samples[0] == 8:
                raise RuntimeError("injected")
            return real(mdp, features, schedule, **kw)

        monkeypatch.setattr(sweep_mod, "fqi_run", flaky)
        res = sample_complexity_sweep(m, F, FqiSchedule.constant(2, 1, 20, gates=4), [4, 8, 16, 64], range(5))
        failed = [c for c in res.cells if not c.ok]
        assert len(failed) == 1 and "injected" in failed[0].error
        assert res.success_fraction == 0.95

    @pytest.mark.parametrize("grid, seeds", [([4, 8, 16], range(5)), ([4, 8, 16, 32], range(5)),
                                             ([4, 8, 16, 64], range(4))])
    def test_grid_requirements(self, grid, seeds):
        m, F = tiny()
        with pytest.raises(ValueError):
            sample_complexity_sweep(m, F, FqiSchedule.constant(1, 1, 5), grid, seeds)

    def test_parallel_matches_serial(self):
        m, F = tiny()
        base = FqiSchedule.constant(2, 1, 20, gates=4)
        a = sample_complexity_sweep(m, F, base, [4, 8, 16, 64], range(5))
        b = sample_complexity_sweep(m, F, base, [4, 8, 16, 64], range(5), jobs=2)
        assert [c.final_gap for c in a.cells] == [c.final_gap for c in b.cells]
