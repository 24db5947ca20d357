"""Capacity pasting for duopoly equilibria built from a least-squares family.

The family ``beta0 + t v`` adds ``t (p - c_i)`` to both supplies. ``search_t``
picks the ``t`` at which one supply attains its capacity at an interior
stationary point, ``paste`` glues monopoly, spline, capacity and residual
monopoly segments over ``[0, p_max]``, and ``verify`` audits the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .duopoly_ls import SolutionFamily, ode_residuals
from .market import Market, derive_price_window
from .splines import Spline, SplineBasis

__all__ = [
    "Segment",
    "PiecewiseSupply",
    "SearchResult",
    "Equilibrium",
    "DiagnosticsReport",
    "PastingError",
    "search_t",
    "paste",
    "verify",
    "deviation_audit",
    "clearing_price",
]

OK = "ok"
CAPS_NOT_BINDING = "caps_not_binding"
NO_EQUILIBRIUM = "no_equilibrium"


class PastingError(RuntimeError):
    def __init__(self, message, worst_violation):
        super().__init__(message)
        self.worst_violation = worst_violation


# --------------------------------------------------------------------------
# piecewise supply curves


@dataclass(frozen=True)
class Segment:
    """One piece of a supply curve on ``(lo, hi]`` (``[lo, hi]`` for the first).

    ``kind`` is one of ``zero``, ``monopoly``, ``spline``, ``constant`` or
    ``residual_monopoly``. Monopoly pieces use ``q = -D'(p) (p - c)``
    clipped to ``[0, cap]``.
    """

    lo: float
    hi: float
    kind: str
    spline: Optional[Spline] = None
    c: float = 0.0
    slope: float = 0.0
    cap: float = math.inf
    running_max: bool = False

    def value(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(p)
        if self.kind == "constant":
            return np.full_like(p, self.cap)
        if self.kind in ("monopoly", "residual_monopoly"):
            return np.clip(self.slope * (p - self.c), 0.0, self.cap)
        v = self.spline(p)
        if self.running_max:
            v = np.maximum(v, self._prefix_max(p))
        return v

    def derivative(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind in ("zero", "constant"):
            return np.zeros_like(p)
        if self.kind in ("monopoly", "residual_monopoly"):
            raw = self.slope * (p - self.c)
            return np.where((raw > 0) & (raw < self.cap), self.slope, 0.0)
        return self.spline(p, 1)

    def _prefix_max(self, p):
        # running maximum of the spline from the segment start
        grid = np.linspace(self.lo, self.hi, 2001)
        run = np.maximum.accumulate(self.spline(grid))
        idx = np.clip(np.searchsorted(grid, p, side="right") - 1, 0, grid.size - 1)
        return run[idx]


@dataclass(frozen=True)
class PiecewiseSupply:
    segments: tuple

    def _locate(self, p):
        his = np.array([s.hi for s in self.segments])
        idx = np.searchsorted(his, p, side="left")
        return np.clip(idx, 0, len(self.segments) - 1)

    def __call__(self, p, d: int = 0):
        scalar = np.ndim(p) == 0
        p = np.atleast_1d(np.asarray(p, dtype=float))
        out = np.empty_like(p)
        idx = self._locate(p)
        for k, seg in enumerate(self.segments):
            sel = idx == k
            if np.any(sel):
                out[sel] = seg.value(p[sel]) if d == 0 else seg.derivative(p[sel])
        return float(out[0]) if scalar else out

    @property
    def domain(self):
        return self.segments[0].lo, self.segments[-1].hi

    def segment_at(self, p: float) -> Segment:
        return self.segments[int(self._locate(np.array([p]))[0])]


# --------------------------------------------------------------------------
# t search


@dataclass(frozen=True)
class SearchResult:
    status: str
    t_star: Optional[float] = None
    binding_firm: Optional[int] = None
    p_cap: Optional[float] = None
    tie: bool = False
    notes: tuple = ()

    @property
    def ok(self) -> bool:
        return self.status == OK


def _scan_grid(basis: SplineBasis, lo: float, hi: float, per_interval: int = 16):
    bp = basis.knots.breakpoints
    inner = bp[(bp > lo) & (bp < hi)]
    nodes = np.concatenate([[lo], inner, [hi]])
    pieces = [np.linspace(a, b, per_interval + 1)[:-1] for a, b in zip(nodes[:-1], nodes[1:])]
    return np.concatenate(pieces + [[hi]])


def _first_peak(s: Spline, grid: np.ndarray, slope_floor: float):
    """First interior local maximum of ``s`` on ``grid``.

    Returns ``("decreasing", p, v)`` when ``s`` starts out decreasing,
    ``("peak", p, v)`` for an interior stationary maximum and
    ``("monotone", hi, s(hi))`` otherwise.
    """
    d = s(grid, 1)
    if d[0] < -slope_floor:
        return "decreasing", grid[0], float(s(grid[0]))
    change = np.nonzero((d[:-1] > 0) & (d[1:] <= 0))[0]
    if change.size == 0:
        return "monotone", grid[-1], float(s(grid[-1]))
    k = change[0]
    a, b = grid[k], grid[k + 1]
    if d[k + 1] == 0:
        p = b
    else:
        p = brentq(lambda x: s(x, 1), a, b, xtol=1e-13, rtol=4 * np.finfo(float).eps)
    return "peak", float(p), float(s(p))


def _window(m: Market, basis: SplineBasis):
    p_min, p_max = derive_price_window(m)
    lo = max(p_min, basis.knots.lo)
    hi = min(p_max, basis.knots.hi)
    return lo, hi


def search_t(
    fam: SolutionFamily,
    m: Market,
    basis: SplineBasis | None = None,
    bracket: Sequence[float] = (-1.0, 1.0),
    value_rtol: float = 1e-6,
    mono_rtol: float = 1e-2,
) -> SearchResult:
    """Select ``t`` so that one supply reaches its capacity with zero slope.

    Both firms are tried as the binding one. A candidate is accepted when the
    other firm's spline is non-decreasing on ``(p_min, p_cap]`` (up to
    ``mono_rtol * Cap``) and below its capacity at ``p_cap``.
    """
    basis = basis if basis is not None else fam.basis
    if fam.null_vector is None or fam.m != 2:
        raise ValueError("search_t needs a duopoly family with a null vector")
    lo, hi = _window(m, basis)
    grid = _scan_grid(basis, lo, hi)
    caps = m.capacities
    span = hi - lo
    slope_floor = 1e-9 * max(caps) / span

    candidates = []
    notes = []
    for b in (0, 1):
        o = 1 - b

        def g(t, b=b):
            kind, p, v = _first_peak(fam.supply(t, b, basis), grid, slope_floor)
            if kind == "decreasing":
                return -caps[b]
            return v - caps[b]

        t_lo, t_hi = float(bracket[0]), float(bracket[1])
        if t_lo >= t_hi:
            raise ValueError("bracket must satisfy lo < hi")
        g_lo, g_hi = g(t_lo), g(t_hi)
        width = t_hi - t_lo
        for _ in range(80):
            if g_lo < 0 < g_hi:
                break
            if g_lo >= 0:
                t_lo -= width
                g_lo = g(t_lo)
            if g_hi <= 0:
                t_hi += width
                g_hi = g(t_hi)
            width *= 2
        else:
            notes.append(f"firm {b + 1}: no bracket")
            continue
        # bisection: g may jump where the peak leaves the window
        for _ in range(200):
            t_mid = 0.5 * (t_lo + t_hi)
            g_mid = g(t_mid)
            if g_mid < 0:
                t_lo = t_mid
            else:
                t_hi = t_mid
            if t_hi - t_lo <= 1e-13 * max(1.0, abs(t_mid)):
                break
        t_star = 0.5 * (t_lo + t_hi)
        sb = fam.supply(t_star, b, basis)
        kind, p_cap, v = _first_peak(sb, grid, slope_floor)
        if kind != "peak" or abs(v - caps[b]) > value_rtol * caps[b]:
            notes.append(f"firm {b + 1}: capacity not reached smoothly inside the window")
            continue
        so = fam.supply(t_star, o, basis)
        seg = np.linspace(lo, p_cap, 2001)
        vals = so(seg)
        drop = float(np.max(np.maximum.accumulate(vals) - vals))
        if drop > mono_rtol * caps[o]:
            notes.append(f"firm {b + 1}: other supply decreases by {drop:.3g}")
            continue
        if vals[-1] >= caps[o]:
            notes.append(f"firm {b + 1}: other supply already at capacity")
            continue
        if vals[-1] <= 0:
            notes.append(f"firm {b + 1}: other supply is not positive at p_cap")
        candidates.append((p_cap, t_star, b))

    if candidates:
        candidates.sort()
        p_cap, t_star, b = candidates[0]
        tie = len(candidates) > 1 and abs(candidates[1][0] - p_cap) < 1e-6 * span
        return SearchResult(OK, float(t_star), b, float(p_cap), tie, tuple(notes))

    # no smooth reach: check whether some monotone member stays below capacity
    t_mono = _monotone_threshold(fam, basis, grid)
    t_caps = [
        (caps[i] - fam.supply(0.0, i, basis)(hi)) / (hi - m.c[i]) for i in range(2)
    ]
    if t_mono < min(t_caps):
        return SearchResult(CAPS_NOT_BINDING, float(t_mono), None, None, False, tuple(notes))
    return SearchResult(NO_EQUILIBRIUM, None, None, None, False, tuple(notes))


def _monotone_threshold(fam, basis, grid):
    """Smallest ``t`` making both family splines non-decreasing on ``grid``.

    The kernel adds slope ``t`` to both supplies, so the threshold is the
    largest negative slope of the ``t = 0`` member.
    """
    worst = max(float(np.max(-fam.supply(0.0, i, basis)(grid, 1))) for i in range(2))
    return max(worst, -math.inf)


# --------------------------------------------------------------------------
# pasting


@dataclass
class DiagnosticsReport:
    ode_residual_sup: float
    monotonicity_violation: float
    smooth_reach_slope: float
    d2_jump: float
    d2_jump_observed: float
    deviation_audit: list
    max_relative_improvement: float

    def to_dict(self) -> dict:
        return {
            "ode_residual_sup": self.ode_residual_sup,
            "monotonicity_violation": self.monotonicity_violation,
            "smooth_reach_slope": self.smooth_reach_slope,
            "d2_jump": self.d2_jump,
            "d2_jump_observed": self.d2_jump_observed,
            "max_relative_improvement": self.max_relative_improvement,
            "deviation_audit": [
                {"eps": e, "price": p, "relative_improvement": list(r)} for e, p, r in self.deviation_audit
            ],
        }


@dataclass
class Equilibrium:
    supplies: list
    t_star: Optional[float]
    p_cap: list
    binding_firm: Optional[int]
    status: str
    market: Market
    family: Optional[SolutionFamily] = None
    basis: Optional[SplineBasis] = None
    spline_window: tuple = ()
    tie: bool = False
    collocation: object = None
    diagnostics: Optional[DiagnosticsReport] = None

    def sample(self, p) -> np.ndarray:
        """Supplies at prices ``p``, shape ``(len(p), m)``."""
        return np.column_stack([s(np.asarray(p, dtype=float)) for s in self.supplies])

    def total(self, p):
        return sum(s(p) for s in self.supplies)


def paste(
    fam: SolutionFamily,
    result: SearchResult,
    m: Market,
    basis: SplineBasis | None = None,
    mono_rtol: float = 1e-2,
    collocation=None,
) -> Equilibrium:
    """Glue the full equilibrium over ``[0, p_max]``.

    Below ``p_min`` each firm supplies its monopoly quantity; between
    ``p_min`` and the binding price the family splines are used; above it the
    binding firm stays at capacity and the other firm serves the residual
    demand at its monopoly rate until its own capacity.

    Decreases of the spline pieces smaller than ``mono_rtol * Cap`` are
    flattened by a running maximum; larger ones raise ``PastingError``.
    """
    basis = basis if basis is not None else fam.basis
    if result.status not in (OK, CAPS_NOT_BINDING):
        raise ValueError(f"cannot paste a {result.status} search result")
    p_min, p_max = derive_price_window(m)
    lo, hi = _window(m, basis)
    gamma = -float(m.demand.derivative(p_min))
    caps = m.capacities
    c = m.c
    t = result.t_star
    top = result.p_cap if result.status == OK else hi

    supplies = []
    worst = 0.0
    for i in range(2):
        s = fam.supply(t, i, basis)
        grid = np.linspace(lo, top, 2001)
        vals = s(grid)
        drop = float(np.max(np.maximum.accumulate(vals) - vals))
        worst = max(worst, drop)
        if drop > mono_rtol * caps[i]:
            raise PastingError(f"firm {i + 1} spline decreases by {drop:.4g}", drop)
        segs = [Segment(0.0, p_min, "monopoly", c=c[i], slope=gamma, cap=caps[i])]
        segs.append(Segment(p_min, top, "spline", spline=s, cap=caps[i], running_max=drop > 0))
        if result.status == OK and top < p_max:
            if i == result.binding_firm:
                segs.append(Segment(top, p_max, "constant", cap=caps[i]))
            else:
                segs.append(Segment(top, p_max, "residual_monopoly", c=c[i], slope=gamma, cap=caps[i]))
        elif top < p_max:
            segs.append(Segment(top, p_max, "residual_monopoly", c=c[i], slope=gamma, cap=caps[i]))
        supplies.append(PiecewiseSupply(tuple(segs)))

    p_cap = []
    for i in range(2):
        if result.status == OK and i == result.binding_firm:
            p_cap.append(result.p_cap)
        else:
            p_cap.append(_first_reach(supplies[i], caps[i], 0.0, p_max))
    return Equilibrium(
        supplies=supplies,
        t_star=t,
        p_cap=p_cap,
        binding_firm=result.binding_firm,
        status=result.status,
        market=m,
        family=fam,
        basis=basis,
        spline_window=(p_min, top),
        tie=result.tie,
        collocation=collocation,
    )


def _first_reach(s: PiecewiseSupply, cap: float, lo: float, hi: float, n: int = 20001):
    grid = np.linspace(lo, hi, n)
    v = s(grid)
    hit = np.nonzero(v >= cap * (1 - 1e-12))[0]
    if hit.size == 0:
        return None
    k = hit[0]
    if k == 0:
        return float(grid[0])
    a, b = grid[k - 1], grid[k]
    level = cap * (1 - 1e-12)
    # the pasted curve is clipped at cap, so aim just below it
    if s(a) < level < s(b):
        try:
            return float(brentq(lambda x: s(x) - level, a, b, xtol=1e-12))
        except ValueError:
            pass
    return float(b)


# --------------------------------------------------------------------------
# verification


def clearing_price(eq: Equilibrium, eps: float, lo: float = 0.0, hi: float | None = None, xtol=1e-12):
    """Price where total pasted supply meets ``D(p) + eps`` (bisection)."""
    m = eq.market
    hi = derive_price_window(m)[1] if hi is None else hi

    def excess(p):
        return eq.total(p) - m.demand(p) - eps

    a, b = lo, hi
    fa, fb = excess(a), excess(b)
    if fa >= 0:
        return a
    if fb <= 0:
        return b
    for _ in range(200):
        mid = 0.5 * (a + b)
        if excess(mid) < 0:
            a = mid
        else:
            b = mid
        if b - a <= xtol:
            break
    return 0.5 * (a + b)


def deviation_audit(eq: Equilibrium, n_shocks: int = 20, n_grid: int = 20001, margin: float = 0.02,
                    window=None):
    """Best-response check at shocks whose clearing prices span the window.

    For every shock and firm the profit of the equilibrium clearing point is
    compared with the best profit over a dense price grid against the
    other firms' supplies. ``eq`` only needs ``market``, ``supplies``,
    ``sample`` and ``total``. ``window`` overrides the market's
    ``(p_min, p_max)``. Returns a list of
    ``(eps, clearing price, relative improvements per firm)``.
    """
    m = eq.market
    p_min, p_max = derive_price_window(m) if window is None else window
    width = p_max - p_min
    targets = np.linspace(p_min + margin * width, p_max - margin * width, n_shocks)
    grid = np.linspace(0.0, p_max, n_grid)
    own = eq.sample(grid)
    total = own.sum(axis=1)
    out = []
    for pt in targets:
        eps = float(eq.total(pt) - m.demand(pt))
        p_star = clearing_price(eq, eps, hi=p_max)
        q_star = np.array([s(p_star) for s in eq.supplies])
        rel = []
        for j in range(m.m):
            others = total - own[:, j]
            q = m.demand(grid) + eps - others
            feasible = (q >= 0) & (q <= m.capacities[j])
            profit = grid * q - m.firms[j].cost.cost(q)
            best = float(np.max(np.where(feasible, profit, -np.inf)))
            base = float(p_star * q_star[j] - m.firms[j].cost.cost(q_star[j]))
            scale = max(abs(base), 1e-9 * p_max * m.capacities[j])
            rel.append(max(0.0, best - base) / scale)
        out.append((eps, float(p_star), tuple(rel)))
    return out


def verify(eq: Equilibrium, m: Market | None = None, dense_factor: int = 10,
           grid=None, n_shocks: int = 20) -> DiagnosticsReport:
    """Residual, monotonicity, smooth-reach, derivative-jump and best-response audit.

    The first-order residual is sampled ``dense_factor`` times finer than the
    collocation ``grid`` on the part of the spline segment it covers.
    """
    m = eq.market if m is None else m
    p_min, p_max = derive_price_window(m)
    lo, top = eq.spline_window
    splines = [s.segment_at(0.5 * (lo + top)).spline for s in eq.supplies]
    if grid is None:
        grid = eq.collocation
    prices = np.asarray(grid.prices if hasattr(grid, "prices") else grid, dtype=float)
    step = float(np.min(np.diff(prices))) / dense_factor if prices.size > 1 else (top - lo) / 100
    a = max(lo, prices[0])
    b = min(top, prices[-1])
    dense = np.arange(a, b + 0.5 * step, step)
    dense = dense[(dense > lo) & (dense <= top)]
    if dense.size:
        res = ode_residuals(splines, m.c, m.demand.derivative, dense)
        ode_sup = float(np.max(np.abs(res)))
    else:
        ode_sup = 0.0

    grid = np.linspace(0.0, p_max, 20001)
    vals = eq.sample(grid)
    mono = float(max(np.max(np.maximum.accumulate(vals[:, i]) - vals[:, i]) for i in range(m.m)))

    slope = jump = jump_obs = 0.0
    if eq.status == OK:
        b = eq.binding_firm
        o = 1 - b
        pc = eq.p_cap[b]
        slope = float(splines[b](pc, 1))
        s2 = float(splines[b](pc, 2))
        jump = float(-(pc - m.c[o]) * s2)
        h = 1e-7 * max(1.0, pc)
        right = float(eq.supplies[o](pc + h, 1))
        left = float(splines[o](pc, 1))
        jump_obs = right - left

    audit = deviation_audit(eq, n_shocks=n_shocks)
    worst = max((max(r) for _, _, r in audit), default=0.0)
    report = DiagnosticsReport(ode_sup, mono, slope, jump, jump_obs, audit, float(worst))
    eq.diagnostics = report
    return report


