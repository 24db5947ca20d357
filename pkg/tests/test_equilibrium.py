import numpy as np
import pytest

from sfespline.duopoly_ls import CollocationGrid, assemble, solve_family, trim_knots
from sfespline.equilibrium import (
    CAPS_NOT_BINDING,
    NO_EQUILIBRIUM,
    OK,
    clearing_price,
    deviation_audit,
    paste,
    search_t,
    verify,
)
from sfespline.market import CostSpec, DemandSpec, Firm, Market
from sfespline.splines import KnotVector, SplineBasis

from conftest import duopoly_market


class TestSearch:
    def test_example1(self, ex1_market, ex1_setup):
        basis, _, _, fam = ex1_setup
        res = search_t(fam, ex1_market, basis)
        assert res.status == OK
        assert res.binding_firm == 0
        assert 31.4 <= res.p_cap <= 31.9
        s1 = fam.supply(res.t_star, 0)
        assert s1(res.p_cap) == pytest.approx(80.0, rel=1e-6)

    def test_smooth_reach(self, ex1_market, ex1_setup):
        basis, _, _, fam = ex1_setup
        res = search_t(fam, ex1_market, basis)
        p = np.linspace(15, res.p_cap, 2001)
        max_slope = np.max(np.abs(fam.supply(res.t_star, 0)(p, 1)))
        assert abs(fam.supply(res.t_star, 0)(res.p_cap, 1)) < 1e-2 * max_slope

    def test_raising_t_breaks_smooth_reach(self, ex1_market, ex1_setup):
        basis, _, _, fam = ex1_setup
        res = search_t(fam, ex1_market, basis)
        # the kernel adds slope t + 1 at the same point
        assert fam.supply(res.t_star + 1.0, 0)(res.p_cap, 1) > 0

    def test_caps_not_binding(self):
        m = duopoly_market(caps=(1e6, 1e6))
        basis = SplineBasis.natural_cubic(KnotVector.uniform(5, 77, 9))
        fam = solve_family(assemble(m, basis, CollocationGrid.uniform(16, 65, 0.5)), basis=basis, costs=m.c)
        res = search_t(fam, m, basis)
        assert res.status == CAPS_NOT_BINDING
        assert res.binding_firm is None

    def test_unique_from_random_brackets(self, ex1_market, ex1_setup):
        basis, _, _, fam = ex1_setup
        ref = search_t(fam, ex1_market, basis).t_star
        rng = np.random.default_rng(7)
        for _ in range(50):
            lo = rng.uniform(-50, 5)
            hi = lo + rng.uniform(0.01, 60)
            res = search_t(fam, ex1_market, basis, bracket=(lo, hi))
            assert res.status == OK
            assert res.t_star == pytest.approx(ref, abs=1e-9)


class TestPaste:
    def test_monopoly_segment(self, ex1_equilibrium):
        p = np.linspace(10, 15, 51)
        S = ex1_equilibrium.sample(p)
        assert np.array_equal(S[:, 0], 3 * (p - 10))
        assert np.array_equal(S[:, 1], np.zeros_like(p))

    def test_capacity_and_residual_monopoly(self, ex1_equilibrium):
        pc = ex1_equilibrium.p_cap[0]
        p = np.linspace(pc + 1e-6, 40, 200)
        S = ex1_equilibrium.sample(p)
        assert np.all(S[:, 0] == 80.0)
        assert np.allclose(S[:, 1], 3 * (p - 15), rtol=0, atol=1e-12)
        assert ex1_equilibrium.sample([40.0])[0, 1] == 75.0

    def test_zero_price(self, ex1_equilibrium):
        assert np.all(ex1_equilibrium.sample([0.0]) == 0.0)

    def test_monotone_and_bounded(self, ex1_equilibrium):
        p = np.linspace(0, 70, 7001)
        S = ex1_equilibrium.sample(p)
        assert np.all(S >= 0) and np.all(S <= np.array([80.0, 75.0]))
        # spline piece is flattened; only the junction at p_cap can drop
        for i in range(2):
            drop = np.maximum.accumulate(S[:, i]) - S[:, i]
            assert drop.max() < 1e-2 * (80.0, 75.0)[i]

    def test_p_cap_is_first_reach(self, ex1_equilibrium):
        for i, cap in enumerate((80.0, 75.0)):
            pc = ex1_equilibrium.p_cap[i]
            below = np.linspace(0, pc - 1e-3, 5000)
            assert np.all(ex1_equilibrium.supplies[i](below) < cap)
            assert ex1_equilibrium.supplies[i](pc + 1e-9) == pytest.approx(cap)

    def test_jumps_only_at_costs(self, ex1_equilibrium):
        p = np.linspace(0.01, 69.99, 70000)
        S = ex1_equilibrium.sample(p)
        jumps = np.abs(np.diff(S, axis=0))
        big = np.nonzero(jumps.max(axis=1) > 0.1)[0]
        # the only discontinuity is at firm 2's entry price c_2 = 15
        assert big.size == 1
        assert p[big[0]] < 15.0 < p[big[0] + 1]


class TestVerify:
    def test_example1_report(self, ex1_equilibrium, ex1_setup):
        _, grid, _, _ = ex1_setup
        rep = verify(ex1_equilibrium, grid=grid)
        assert rep.d2_jump > 0
        assert rep.d2_jump_observed > 0
        assert rep.ode_residual_sup < 0.2
        assert abs(rep.smooth_reach_slope) < 1e-6
        assert rep.max_relative_improvement < 0.01

    def test_clearing_consistency(self, ex1_equilibrium):
        m = ex1_equilibrium.market
        for eps, p_star, _ in deviation_audit(ex1_equilibrium, n_shocks=20):
            excess = ex1_equilibrium.total(p_star) - m.demand(p_star) - eps
            assert abs(excess) < 1e-8 * max(1.0, eps) + 1e-6

    def test_clearing_price_bisection(self, ex1_equilibrium):
        m = ex1_equilibrium.market
        eps = 150.0
        p = clearing_price(ex1_equilibrium, eps)
        assert ex1_equilibrium.total(p) == pytest.approx(m.demand(p) + eps, abs=1e-7)

    def test_audit_shrinks_under_refinement(self, ex1_market):
        worst = []
        for step, gstep in ((9.0, 0.5), (4.5, 0.25)):
            grid = CollocationGrid.uniform(16, 65, gstep)
            knots = trim_knots(KnotVector.uniform(5, 77, step), grid, "natural_cubic")
            basis = SplineBasis.natural_cubic(knots)
            fam = solve_family(assemble(ex1_market, basis, grid), basis=basis, costs=ex1_market.c)
            eq = paste(fam, search_t(fam, ex1_market, basis), ex1_market, basis, collocation=grid)
            worst.append(verify(eq, grid=grid).max_relative_improvement)
        assert worst[0] < 0.01
        assert worst[1] < worst[0]

    def test_no_equilibrium_cannot_paste(self, ex1_market, ex1_setup):
        from sfespline.equilibrium import SearchResult

        basis, _, _, fam = ex1_setup
        with pytest.raises(ValueError):
            paste(fam, SearchResult(NO_EQUILIBRIUM), ex1_market, basis)
