"""Knot vectors, spline bases and interpolation operators.

Two basis families are supported:

* ``bspline``: clamped B-splines of order ``M`` (degree ``M - 1``), evaluated
  with the Cox-de Boor recurrence. Interior breakpoints may be repeated
  (``multiplicity``) to lower the continuity, which is how the piecewise cubic
  Hermite space is built.
* ``natural_cubic``: the cardinal basis of natural cubic splines, i.e. the
  column ``t`` is the natural interpolant of the unit vector ``e_t``. The
  dimension equals the number of breakpoints.

All objects are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "KnotVector",
    "SplineBasis",
    "Spline",
    "SplineDomainError",
    "eval_basis",
    "eval_spline",
    "interpolate",
]


class SplineDomainError(ValueError):
    """Raised when a spline is evaluated outside its knot span."""


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Strictly increasing breakpoints ``tau_0 < ... < tau_n``."""

    breakpoints: np.ndarray

    def __post_init__(self):
        bp = np.array(self.breakpoints, dtype=float).ravel()
        if bp.size < 2:
            raise ValueError("a knot vector needs at least 2 breakpoints")
        if not np.all(np.isfinite(bp)):
            raise ValueError("breakpoints must be finite")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        bp.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)

    @classmethod
    def uniform(cls, lo: float, hi: float, step: float) -> "KnotVector":
        """Breakpoints ``lo, lo + step, ..., hi`` (``hi`` included)."""
        if step <= 0:
            raise ValueError("step must be positive")
        n = int(round((hi - lo) / step))
        if n < 1 or abs(lo + n * step - hi) > 1e-9 * max(1.0, abs(hi)):
            raise ValueError(f"({hi} - {lo}) is not a multiple of {step}")
        return cls(np.linspace(lo, hi, n + 1))

    @classmethod
    def from_spec(cls, spec: Sequence[Sequence[float]]) -> "KnotVector":
        """Concatenate uniform pieces given as ``[[lo, hi, step], ...]``.

        Pieces must be contiguous; shared endpoints are merged.
        """
        pieces = []
        for lo, hi, step in spec:
            bp = cls.uniform(lo, hi, step).breakpoints
            if pieces:
                if abs(pieces[-1][-1] - bp[0]) > 1e-9 * max(1.0, abs(bp[0])):
                    raise ValueError("knot_spec pieces must be contiguous")
                bp = bp[1:]
            pieces.append(bp)
        if not pieces:
            raise ValueError("empty knot_spec")
        return cls(np.concatenate(pieces))

    @property
    def lo(self) -> float:
        return float(self.breakpoints[0])

    @property
    def hi(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def mesh_norm(self) -> float:
        return float(np.max(np.diff(self.breakpoints)))

    @property
    def midpoints(self) -> np.ndarray:
        bp = self.breakpoints
        return 0.5 * (bp[:-1] + bp[1:])

    def __len__(self):
        return self.breakpoints.size


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """A basis ``B_1, ..., B_K`` of a spline space on ``knots``.

    Parameters
    ----------
    knots : KnotVector
    kind : {"bspline", "natural_cubic"}
    order : int
        Polynomial order ``M`` (degree + 1). Fixed to 4 for natural cubic.
    multiplicity : int
        Multiplicity of the interior breakpoints in the B-spline knot
        sequence. The space is ``C^(M - 1 - multiplicity)`` at them.
    """

    knots: KnotVector
    kind: str = "bspline"
    order: int = 4
    multiplicity: int = 1
    _t: np.ndarray = field(init=False, repr=False)
    _moments: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.knots, KnotVector):
            object.__setattr__(self, "knots", KnotVector(self.knots))
        if self.kind == "bspline":
            if self.order < 2:
                raise ValueError("B-spline order must be >= 2")
            if not 1 <= self.multiplicity < self.order:
                raise ValueError("multiplicity must be in [1, order)")
            bp = self.knots.breakpoints
            t = np.concatenate(
                [
                    np.full(self.order, bp[0]),
                    np.repeat(bp[1:-1], self.multiplicity),
                    np.full(self.order, bp[-1]),
                ]
            )
            t.setflags(write=False)
            object.__setattr__(self, "_t", t)
            object.__setattr__(self, "_moments", None)
        elif self.kind == "natural_cubic":
            if self.order != 4:
                raise ValueError("natural cubic splines have order 4")
            if self.multiplicity != 1:
                raise ValueError("natural cubic splines use simple knots")
            object.__setattr__(self, "_t", None)
            object.__setattr__(self, "_moments", _natural_moment_matrix(self.knots.breakpoints))
        else:
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @classmethod
    def bspline(cls, knots, order=4, multiplicity=1) -> "SplineBasis":
        return cls(knots if isinstance(knots, KnotVector) else KnotVector(knots), "bspline", order, multiplicity)

    @classmethod
    def natural_cubic(cls, knots) -> "SplineBasis":
        return cls(knots if isinstance(knots, KnotVector) else KnotVector(knots), "natural_cubic", 4)

    @property
    def dimension(self) -> int:
        if self.kind == "natural_cubic":
            return len(self.knots)
        return self._t.size - self.order

    @property
    def knot_sequence(self) -> np.ndarray:
        """Full (clamped) B-spline knot sequence."""
        if self._t is None:
            raise AttributeError("natural cubic bases have no B-spline knot sequence")
        return self._t

    def greville(self) -> np.ndarray:
        """Knot averages; only defined for B-spline bases."""
        t = self.knot_sequence
        k = self.order - 1
        return np.array([t[j + 1 : j + 1 + k].mean() for j in range(self.dimension)])

    def __call__(self, p, derivative_order: int = 0) -> np.ndarray:
        return eval_basis(self, p, derivative_order)


def eval_basis(basis: SplineBasis, p, derivative_order: int = 0) -> np.ndarray:
    """Values of ``B_t^(d)(p)`` for all ``t``.

    Returns shape ``(K,)`` for scalar ``p`` and ``(n, K)`` for an array.
    The right endpoint is handled by left continuity.
    """
    scalar = np.ndim(p) == 0
    x = np.atleast_1d(np.asarray(p, dtype=float))
    d = int(derivative_order)
    if d < 0 or d > basis.order - 1:
        raise ValueError(f"derivative_order must be in [0, {basis.order - 1}]")
    lo, hi = basis.knots.lo, basis.knots.hi
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if np.any(x < lo - tol) or np.any(x > hi + tol) or np.any(~np.isfinite(x)):
        raise SplineDomainError(f"price outside knot span [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    if basis.kind == "bspline":
        out = _bspline_matrix(basis._t, basis.order, x, d)
    else:
        out = _natural_matrix(basis.knots.breakpoints, basis._moments, x, d)
    return out[0] if scalar else out


def _bspline_matrix(t: np.ndarray, order: int, x: np.ndarray, d: int) -> np.ndarray:
    if d > 0:
        low = _bspline_matrix(t, order - 1, x, d - 1)
        k = order - 1
        n = t.size - order
        out = np.zeros((x.size, n))
        for j in range(n):
            den1 = t[j + k] - t[j]
            den2 = t[j + k + 1] - t[j + 1]
            if den1 > 0:
                out[:, j] += k * low[:, j] / den1
            if den2 > 0:
                out[:, j] -= k * low[:, j + 1] / den2
        return out
    # order-1 indicators on [t_j, t_{j+1}); the last non-empty span is closed
    nspan = t.size - 1
    B = np.zeros((x.size, nspan))
    last = np.max(np.nonzero(t[1:] > t[:-1])[0])
    idx = np.searchsorted(t, x, side="right") - 1
    idx = np.minimum(idx, last)
    B[np.arange(x.size), idx] = 1.0
    for k in range(1, order):
        nb = t.size - 1 - k
        Bn = np.zeros((x.size, nb))
        for j in range(nb):
            den1 = t[j + k] - t[j]
            den2 = t[j + k + 1] - t[j + 1]
            if den1 > 0:
                Bn[:, j] += (x - t[j]) / den1 * B[:, j]
            if den2 > 0:
                Bn[:, j] += (t[j + k + 1] - x) / den2 * B[:, j + 1]
        B = Bn
    return B


def _natural_moment_matrix(x: np.ndarray) -> np.ndarray:
    """Map from data values to second derivatives of the natural interpolant."""
    n = x.size
    if n < 3:
        # only the straight line is available; moments vanish
        return np.zeros((n, n))
    h = np.diff(x)
    m = n - 2
    ab = np.zeros((3, m))
    ab[0, 1:] = h[1:-1] / 6.0
    ab[1, :] = (h[:-1] + h[1:]) / 3.0
    ab[2, :-1] = h[1:-1] / 6.0
    R = np.zeros((m, n))
    for r in range(m):
        R[r, r] = 1.0 / h[r]
        R[r, r + 1] = -1.0 / h[r] - 1.0 / h[r + 1]
        R[r, r + 2] = 1.0 / h[r + 1]
    M = np.zeros((n, n))
    M[1:-1] = solve_banded((1, 1), ab, R)
    M.setflags(write=False)
    return M


def _natural_matrix(xk: np.ndarray, M: np.ndarray, x: np.ndarray, d: int) -> np.ndarray:
    n = xk.size
    j = np.clip(np.searchsorted(xk, x, side="right") - 1, 0, n - 2)
    h = xk[j + 1] - xk[j]
    A = (xk[j + 1] - x) / h
    B = 1.0 - A
    rows = np.arange(x.size)
    out = np.zeros((x.size, n))
    Mj, Mj1 = M[j], M[j + 1]
    if d == 0:
        out[rows, j] += A
        out[rows, j + 1] += B
        out += ((A**3 - A) * h**2 / 6.0)[:, None] * Mj + ((B**3 - B) * h**2 / 6.0)[:, None] * Mj1
    elif d == 1:
        out[rows, j] -= 1.0 / h
        out[rows, j + 1] += 1.0 / h
        out += (-(3 * A**2 - 1) * h / 6.0)[:, None] * Mj + ((3 * B**2 - 1) * h / 6.0)[:, None] * Mj1
    elif d == 2:
        out += A[:, None] * Mj + B[:, None] * Mj1
    else:
        out += (-1.0 / h)[:, None] * Mj + (1.0 / h)[:, None] * Mj1
    return out


@dataclass(frozen=True, eq=False)
class Spline:
    """``s(p) = B(p)^T coefficients``."""

    basis: SplineBasis
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.size != self.basis.dimension:
            raise ValueError(f"expected {self.basis.dimension} coefficients, got {c.size}")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    def __call__(self, p, derivative_order: int = 0):
        return eval_spline(self, p, derivative_order)

    def derivative(self, p, order: int = 1):
        return eval_spline(self, p, order)


def eval_spline(s: Spline, p, derivative_order: int = 0):
    """Evaluate ``sum_t b_t B_t^(d)(p)``."""
    out = eval_basis(s.basis, p, derivative_order) @ s.coefficients
    return float(out) if np.ndim(out) == 0 else out


def fit_coefficients(basis: SplineBasis, p, values) -> np.ndarray:
    """Least-squares coefficients of ``basis`` for samples ``(p, values)``."""
    A = eval_basis(basis, np.asarray(p, dtype=float))
    coef, *_ = np.linalg.lstsq(A, np.asarray(values, dtype=float), rcond=None)
    return coef


_INTERPOLANTS = ("complete_cubic", "quadratic_midpoint", "cubic_hermite")


def interpolate(kind: str, x, y, knots: KnotVector, slopes=None) -> Spline:
    """Interpolate samples in a spline space on ``knots``.

    Parameters
    ----------
    kind : {"complete_cubic", "quadratic_midpoint", "cubic_hermite"}
        ``complete_cubic``: cubic spline through values at every breakpoint
        with prescribed end slopes ``slopes = (s_lo, s_hi)``.
        ``quadratic_midpoint``: quadratic spline through the two end values
        and the values at every interval midpoint; ``x`` is
        ``[tau_0, mid_1, ..., mid_N, tau_N]``.
        ``cubic_hermite``: C^1 piecewise cubic matching values and
        ``slopes`` at every breakpoint.
    x, y : array_like
        Sample abscissae and values.
    knots : KnotVector
    slopes : array_like, optional
    """
    if kind not in _INTERPOLANTS:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    if not isinstance(knots, KnotVector):
        knots = KnotVector(knots)
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and y must have the same length")
    if np.unique(x).size != x.size:
        raise ValueError("duplicate abscissae")
    order = np.argsort(x)
    x, y = x[order], y[order]
    bp = knots.breakpoints
    scale = 1e-10 * max(1.0, np.max(np.abs(bp)))

    if kind == "complete_cubic":
        _expect(x, bp, scale, "complete cubic interpolation samples every breakpoint")
        s = np.asarray(slopes, dtype=float).ravel() if slopes is not None else np.array([])
        if s.size == bp.size:
            s = s[order][[0, -1]]
        if s.size != 2:
            raise ValueError("complete cubic interpolation needs the two end slopes")
        basis = SplineBasis.bspline(knots, order=4)
        A = np.vstack([basis(bp), basis(bp[[0, -1]], 1)])
        rhs = np.concatenate([y, s])
    elif kind == "quadratic_midpoint":
        target = np.concatenate([[bp[0]], knots.midpoints, [bp[-1]]])
        _expect(x, target, scale, "quadratic midpoint interpolation samples [tau_0, midpoints, tau_N]")
        basis = SplineBasis.bspline(knots, order=3)
        A = basis(target)
        rhs = y
    else:
        _expect(x, bp, scale, "Hermite interpolation samples every breakpoint")
        if slopes is None or np.size(slopes) != bp.size:
            raise ValueError("Hermite interpolation needs a slope at every breakpoint")
        basis = SplineBasis.bspline(knots, order=4, multiplicity=2)
        A = np.vstack([basis(bp), basis(bp, 1)])
        rhs = np.concatenate([y, np.asarray(slopes, dtype=float).ravel()[order]])
    return Spline(basis, np.linalg.solve(A, rhs))


def _expect(x, target, scale, msg):
    if x.size != target.size:
        raise ValueError(f"{msg}: expected {target.size} samples, got {x.size}")
    if np.max(np.abs(np.sort(x) - target)) > scale:
        raise ValueError(f"{msg}: abscissae do not match")
