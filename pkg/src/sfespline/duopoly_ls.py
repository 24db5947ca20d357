"""Least-squares spline collocation of the first-order conditions.

For constant marginal costs the first-order system

    sum_{i != j} s_i'(p) - s_j(p) / (p - c_j) = D'(p),   j = 1..m

is linear in the spline coefficients. Stacking it at collocation prices gives
``Bmat @ beta = d``. For a duopoly ``Bmat`` has a one-dimensional kernel
spanned by the coefficients of ``(p - c_1, p - c_2)``, so every least-squares
solution is ``beta0 + t * v``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .market import Market
from .splines import KnotVector, Spline, SplineBasis

__all__ = [
    "CollocationGrid",
    "LinearSystem",
    "SolutionFamily",
    "IllPosedSystemError",
    "assemble",
    "solve_family",
    "family_supply",
    "ode_residuals",
    "trim_knots",
    "RANK_RTOL",
]

RANK_RTOL = 1e-10


class IllPosedSystemError(RuntimeError):
    """The collocation system does not have the structure the method needs."""


@dataclass(frozen=True, eq=False)
class CollocationGrid:
    prices: np.ndarray

    def __post_init__(self):
        p = np.array(self.prices, dtype=float).ravel()
        if p.size < 1:
            raise ValueError("empty collocation grid")
        if np.any(np.diff(p) <= 0):
            raise ValueError("collocation prices must be strictly increasing")
        p.setflags(write=False)
        object.__setattr__(self, "prices", p)

    @classmethod
    def uniform(cls, lo: float, hi: float, step: float) -> "CollocationGrid":
        n = int(round((hi - lo) / step))
        return cls(lo + step * np.arange(n + 1))

    def __len__(self):
        return self.prices.size


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``matrix`` rows are ordered (price k, firm j) with j varying fastest."""

    matrix: np.ndarray
    rhs: np.ndarray
    m: int
    degenerate_columns: tuple = ()


@dataclass(frozen=True, eq=False)
class SolutionFamily:
    """All least-squares solutions ``beta0 + t * null_vector``.

    ``null_vector`` is scaled so that its firm-1 spline equals ``p - c_1``
    (and then its firm-2 spline equals ``p - c_2``); it is ``None`` when the
    system has full column rank.
    """

    beta0: np.ndarray
    null_vector: Optional[np.ndarray]
    singular_values: np.ndarray
    numeric_rank: int
    residual_norm: float
    m: int
    K: int
    basis: Optional[SplineBasis] = None
    costs: Optional[np.ndarray] = None

    def coefficients(self, t: float = 0.0) -> np.ndarray:
        if self.null_vector is None:
            if t != 0.0:
                raise ValueError("full-rank family has no free parameter")
            return self.beta0.copy()
        return self.beta0 + t * self.null_vector

    def block(self, vec: np.ndarray, i: int) -> np.ndarray:
        return vec[i * self.K : (i + 1) * self.K]

    def supply(self, t: float, i: int, basis: Optional[SplineBasis] = None) -> Spline:
        return family_supply(self, basis if basis is not None else self.basis, t, i)


def assemble(m: Market, basis: SplineBasis, grid: CollocationGrid) -> LinearSystem:
    """Stack the spline first-order conditions at every collocation price."""
    if any(f.cost.a != 0 for f in m.firms):
        raise ValueError("least-squares collocation needs constant marginal costs (a_i = 0)")
    p = grid.prices
    c = m.c
    if np.any(p[:, None] - c[None, :] <= 0):
        raise ValueError(
            f"collocation prices must exceed every marginal cost (max c = {c.max()}); "
            "p - c_j would be singular"
        )
    B = basis(p)
    dB = basis(p, 1)
    K = basis.dimension
    N = p.size
    mm = m.m
    A = np.empty((N, mm, mm * K))
    for j in range(mm):
        for i in range(mm):
            if i == j:
                A[:, j, i * K : (i + 1) * K] = -B / (p - c[j])[:, None]
            else:
                A[:, j, i * K : (i + 1) * K] = dB
    A = A.reshape(N * mm, mm * K)
    rhs = np.repeat(m.demand.derivative(p), mm)
    norms = np.linalg.norm(A, axis=0)
    degenerate = tuple(int(k) for k in np.nonzero(norms <= 1e-12 * norms.max())[0])
    if degenerate:
        warnings.warn(
            f"collocation system has {len(degenerate)} zero column(s); "
            "some knot interval contains no collocation price",
            RuntimeWarning,
            stacklevel=2,
        )
    return LinearSystem(A, rhs, mm, degenerate)


def solve_family(
    sys: LinearSystem,
    m: int | None = None,
    basis: SplineBasis | None = None,
    costs=None,
    rtol: float = RANK_RTOL,
) -> SolutionFamily:
    """Minimum-norm least-squares solution and, for duopolies, the kernel direction.

    Parameters
    ----------
    sys : LinearSystem
    m : int, optional
        Number of firms; defaults to ``sys.m``.
    basis, costs : optional
        Needed to scale the null vector to the ``p - c_1`` normalization.
        Without them the null vector is returned with unit Euclidean norm
        and positive firm-1 slope is not enforced.
    rtol : float
        Singular values below ``rtol * sigma_max`` count as zero.
    """
    m = sys.m if m is None else m
    if sys.degenerate_columns:
        raise IllPosedSystemError(f"zero columns {list(sys.degenerate_columns)}")
    A, d = sys.matrix, sys.rhs
    n_cols = A.shape[1]
    if n_cols % m:
        raise ValueError("column count is not a multiple of the firm count")
    K = n_cols // m
    if A.shape[0] < n_cols:
        raise IllPosedSystemError("fewer collocation rows than coefficients")
    U, sv, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(sv > rtol * sv[0]))
    inv = np.zeros_like(sv)
    inv[:rank] = 1.0 / sv[:rank]
    beta0 = Vt.T @ (inv * (U.T @ d))
    resid = float(np.linalg.norm(A @ beta0 - d))

    null = None
    if m == 2:
        if rank < n_cols - 1:
            raise IllPosedSystemError(
                f"rank {rank} < 2K - 1 = {n_cols - 1}: kernel has dimension {n_cols - rank}"
            )
        if rank == n_cols:
            # the rank law rules this out for a sound grid; treat the
            # smallest singular direction as the kernel anyway
            warnings.warn("duopoly system numerically full rank", RuntimeWarning, stacklevel=2)
        if sv[-2] < 1e-6 * sv[0]:
            warnings.warn(
                "two near-zero singular values; the second homogeneous solution "
                "is nearly representable on this grid",
                RuntimeWarning,
                stacklevel=2,
            )
        null = Vt[-1].copy()
        if basis is not None and costs is not None:
            null = _normalize_null(null, basis, np.asarray(costs, dtype=float), K)
        elif null[:K].sum() < 0:
            null = -null
    return SolutionFamily(
        beta0=beta0,
        null_vector=null,
        singular_values=sv,
        numeric_rank=rank,
        residual_norm=resid,
        m=m,
        K=K,
        basis=basis,
        costs=None if costs is None else np.asarray(costs, dtype=float),
    )


def _normalize_null(v, basis, c, K):
    """Scale ``v`` so that its firm-1 spline is ``p - c_1`` in the least-squares sense."""
    p = np.linspace(basis.knots.lo, basis.knots.hi, 4 * K + 1)
    f = basis(p) @ v[:K]
    target = p - c[0]
    return v * (f @ target) / (f @ f)


def family_supply(fam: SolutionFamily, basis: SplineBasis, t: float, firm_index: int) -> Spline:
    """Spline of firm ``firm_index`` for the family member ``beta0 + t v``."""
    if not 0 <= firm_index < fam.m:
        raise IndexError(f"firm_index {firm_index} out of range for {fam.m} firms")
    if basis is None:
        raise ValueError("a basis is required")
    return Spline(basis, fam.block(fam.coefficients(t), firm_index))


def ode_residuals(supplies, c, dD, p) -> np.ndarray:
    """First-order residuals ``sum_{i != j} s_i' - s_j / (p - c_j) - D'`` per firm.

    ``supplies`` are callables ``s(p, d)``; returns shape ``(m, len(p))``.
    """
    p = np.asarray(p, dtype=float)
    vals = np.array([s(p, 0) for s in supplies])
    ders = np.array([s(p, 1) for s in supplies])
    total_der = ders.sum(axis=0)
    c = np.asarray(c, dtype=float)
    out = np.empty_like(vals)
    for j in range(vals.shape[0]):
        out[j] = (total_der - ders[j]) - vals[j] / (p - c[j]) - dD(p)
    return out


def trim_knots(knots: KnotVector, grid: CollocationGrid, kind: str) -> KnotVector:
    """Drop outer knot intervals that contain no collocation price.

    Empty intervals leave coefficients determined only through continuity,
    which makes the least-squares system nearly rank deficient as the mesh
    shrinks. Natural cubic splines keep one empty interval at each end (the
    end conditions act there); B-splines keep none.
    """
    bp = knots.breakpoints
    p = grid.prices
    first = int(np.searchsorted(bp, p[0], side="right")) - 1
    last = int(np.searchsorted(bp, p[-1], side="left"))
    first = max(first, 0)
    last = min(last, bp.size - 1)
    if kind == "natural_cubic":
        first = max(first - 1, 0)
        last = min(last + 1, bp.size - 1)
    return KnotVector(bp[first : last + 1])
