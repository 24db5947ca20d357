import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfespline.splines import (
    KnotVector,
    Spline,
    SplineBasis,
    SplineDomainError,
    eval_basis,
    fit_coefficients,
    interpolate,
)

BASES = [
    ("bspline", 2),
    ("bspline", 3),
    ("bspline", 4),
    ("bspline", 5),
    ("natural_cubic", 4),
]


def make_basis(kind, order, knots):
    if kind == "natural_cubic":
        return SplineBasis.natural_cubic(knots)
    return SplineBasis.bspline(knots, order=order)


class TestKnotVector:
    def test_uniform_and_mesh_norm(self):
        k = KnotVector.uniform(5, 77, 9)
        assert len(k) == 9
        assert k.mesh_norm == pytest.approx(9.0)

    def test_mesh_norm_is_largest_gap(self):
        k = KnotVector([0.0, 1.0, 3.5, 4.0])
        assert k.mesh_norm == 2.5

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            KnotVector([0.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            KnotVector([0.0])

    def test_uniform_rejects_non_multiple(self):
        with pytest.raises(ValueError):
            KnotVector.uniform(5, 54, 2.0)

    def test_from_spec_joins_pieces(self):
        k = KnotVector.from_spec([[5, 15, 0.05], [15, 40, 5]])
        assert k.lo == 5 and k.hi == 40
        assert len(k) == 201 + 5
        assert k.mesh_norm == pytest.approx(5.0)

    def test_from_spec_requires_contiguous(self):
        with pytest.raises(ValueError):
            KnotVector.from_spec([[0, 1, 0.5], [2, 3, 0.5]])


class TestBasis:
    def test_natural_cubic_dimension_matches_example(self):
        b = SplineBasis.natural_cubic(KnotVector.uniform(5, 77, 9))
        assert b.dimension == 9

    @pytest.mark.parametrize("order", [2, 3, 4, 5])
    def test_bspline_dimension(self, order):
        k = KnotVector.uniform(0, 10, 1)
        assert SplineBasis.bspline(k, order).dimension == 10 + order - 1

    def test_partition_of_unity_random_points(self):
        rng = np.random.default_rng(0)
        k = KnotVector(np.sort(np.concatenate([[0.0, 10.0], rng.uniform(0, 10, 12)])))
        b = SplineBasis.bspline(k, 4)
        p = rng.uniform(0, 10, 1000)
        B = b(p)
        assert np.max(np.abs(B.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(B >= -1e-15)
        assert np.max(np.abs(b(p, 1).sum(axis=1))) < 1e-10

    def test_right_endpoint_left_continuous(self):
        b = SplineBasis.bspline(KnotVector.uniform(0, 4, 1), 3)
        row = b(4.0)
        assert row[-1] == pytest.approx(1.0)
        assert row.sum() == pytest.approx(1.0)

    def test_out_of_span_is_error(self):
        b = SplineBasis.bspline(KnotVector.uniform(0, 4, 1), 3)
        with pytest.raises(SplineDomainError):
            b(4.5)
        with pytest.raises(SplineDomainError):
            SplineBasis.natural_cubic(KnotVector.uniform(0, 4, 1))(-0.1)

    def test_derivative_order_bounds(self):
        b = SplineBasis.bspline(KnotVector.uniform(0, 4, 1), 3)
        with pytest.raises(ValueError):
            eval_basis(b, 1.0, 3)

    def test_natural_cubic_is_cardinal(self):
        k = KnotVector.uniform(5, 77, 9)
        b = SplineBasis.natural_cubic(k)
        assert np.allclose(b(k.breakpoints), np.eye(9), atol=1e-12)
        # zero curvature at both ends
        assert np.allclose(b(np.array([5.0, 77.0]), 2), 0.0, atol=1e-12)

    @pytest.mark.parametrize("kind,order", BASES)
    def test_linear_reproduction(self, kind, order):
        k = KnotVector([0.0, 0.7, 2.0, 2.5, 4.0, 6.0])
        b = make_basis(kind, order, k)
        p = np.linspace(0, 6, 401)
        for target in (np.ones_like(p), p, 3.0 - 2.0 * p):
            coef = fit_coefficients(b, p, target)
            assert np.max(np.abs(b(p) @ coef - target)) < 1e-9

    def test_finite_difference_derivatives(self):
        k = KnotVector([0.0, 1.0, 2.5, 3.0, 5.0])
        rng = np.random.default_rng(3)
        for b in (SplineBasis.bspline(k, 4), SplineBasis.natural_cubic(k)):
            s = Spline(b, rng.normal(size=b.dimension))
            p = np.array([0.4, 1.7, 2.8, 4.1])
            h = 1e-6
            fd1 = (s(p + h) - s(p - h)) / (2 * h)
            fd2 = (s(p + h, 1) - s(p - h, 1)) / (2 * h)
            assert np.allclose(s(p, 1), fd1, atol=1e-6)
            assert np.allclose(s(p, 2), fd2, atol=1e-5)


class TestSpline:
    def test_zero_coefficients(self):
        b = SplineBasis.bspline(KnotVector.uniform(5, 77, 9), 4)
        s = Spline(b, np.zeros(b.dimension))
        assert np.all(s(np.linspace(5, 77, 50)) == 0.0)

    @pytest.mark.parametrize("kind,order", BASES)
    def test_linear_function_value(self, kind, order):
        k = KnotVector.uniform(5, 77, 9)
        b = make_basis(kind, order, k)
        p = np.linspace(5, 77, 200)
        s = Spline(b, fit_coefficients(b, p, p - 10))
        assert s(31.65) == pytest.approx(21.65, abs=1e-9)

    def test_quadratic_derivative(self):
        b = SplineBasis.bspline(KnotVector.uniform(5, 77, 9), 4)
        p = np.linspace(5, 77, 300)
        s = Spline(b, fit_coefficients(b, p, p**2))
        assert s(20.0, 1) == pytest.approx(40.0, abs=1e-8)

    def test_wrong_coefficient_count(self):
        b = SplineBasis.bspline(KnotVector.uniform(0, 4, 1), 3)
        with pytest.raises(ValueError):
            Spline(b, np.zeros(3))


class TestInterpolate:
    def test_complete_cubic_reproduces_cubic(self):
        k = KnotVector([0.0, 0.5, 1.7, 2.0, 3.1, 4.0])
        bp = k.breakpoints
        s = interpolate("complete_cubic", bp, bp**3, k, slopes=(3 * bp[0] ** 2, 3 * bp[-1] ** 2))
        p = np.linspace(0, 4, 801)
        assert np.max(np.abs(s(p) - p**3)) < 1e-9

    def test_complete_cubic_sin_rate(self):
        errs = []
        for n in (8, 16, 32, 64):
            k = KnotVector(np.linspace(0, np.pi, n + 1))
            bp = k.breakpoints
            s = interpolate("complete_cubic", bp, np.sin(bp), k, slopes=(1.0, -1.0))
            p = np.linspace(0, np.pi, 4001)
            errs.append(np.max(np.abs(s(p) - np.sin(p))))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios[1:] >= 8.0)

    def test_quadratic_midpoint_reproduces_quadratic(self):
        k = KnotVector([0.0, 1.0, 1.5, 3.0, 4.0])
        x = np.concatenate([[0.0], k.midpoints, [4.0]])
        s = interpolate("quadratic_midpoint", x, 2 * x**2 - x + 1, k)
        p = np.linspace(0, 4, 401)
        assert np.max(np.abs(s(p) - (2 * p**2 - p + 1))) < 1e-9

    def test_cubic_hermite_reproduces_member(self):
        k = KnotVector([0.0, 1.0, 2.2, 3.0])
        bp = k.breakpoints
        f = lambda x: x**3 - 2 * x
        df = lambda x: 3 * x**2 - 2
        s = interpolate("cubic_hermite", bp, f(bp), k, slopes=df(bp))
        p = np.linspace(0, 3, 301)
        assert np.max(np.abs(s(p) - f(p))) < 1e-9

    def test_own_space_reproduction(self):
        rng = np.random.default_rng(5)
        k = KnotVector([0.0, 1.0, 2.0, 3.5, 5.0])
        b = SplineBasis.bspline(k, 3)
        s = Spline(b, rng.normal(size=b.dimension))
        x = np.concatenate([[0.0], k.midpoints, [5.0]])
        t = interpolate("quadratic_midpoint", x, s(x), k)
        assert np.allclose(t.coefficients, s.coefficients, atol=1e-10)

    def test_rejects_unknown_kind_and_mismatch(self):
        k = KnotVector.uniform(0, 2, 1)
        with pytest.raises(ValueError):
            interpolate("linear", [0, 1, 2], [0, 1, 2], k)
        with pytest.raises(ValueError):
            interpolate("complete_cubic", [0, 1], [0, 1], k, slopes=(0, 0))


def _nondecreasing(v, tol=1e-12):
    return bool(np.all(np.diff(v) >= -tol))


class TestQuadraticMonotoneEquivalence:
    """For quadratic B-splines, non-decreasing coefficients <=> non-decreasing spline."""

    knots = KnotVector([0.0, 1.0, 1.5, 3.0, 4.0, 6.0, 6.5, 8.0])

    def _check(self, coef):
        b = SplineBasis.bspline(self.knots, 3)
        s = Spline(b, coef)
        # a quadratic piece is monotone iff its derivative is at both ends,
        # so sampling derivatives at the breakpoints decides exactly
        bp = self.knots.breakpoints
        d = np.concatenate([s(bp[:-1] + 1e-12, 1), s(bp[1:], 1)])
        spline_up = bool(np.all(d >= -1e-9))
        assert spline_up == _nondecreasing(coef, 1e-9)
        dense = s(np.linspace(0, 8, 4001))
        if spline_up:
            assert _nondecreasing(dense, 1e-9)

    def test_random_coefficients(self):
        rng = np.random.default_rng(11)
        dim = SplineBasis.bspline(self.knots, 3).dimension
        for k in range(100):
            if k % 2:
                coef = np.cumsum(rng.uniform(0, 1, dim))
            else:
                coef = np.cumsum(rng.uniform(0, 1, dim))
                j = rng.integers(1, dim)
                coef[j] = coef[j - 1] - rng.uniform(0.01, 1.0)
            self._check(coef)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=9, max_size=9))
    def test_property(self, values):
        self._check(np.array(values))
