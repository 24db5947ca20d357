"""Spline formulation of the relaxed KKT system for m-firm markets.

Decision vector layout (``NlpFormulation.layout``)::

    x = [beta_1, ..., beta_m, lambda (m x N, row-major), mu (m x N), rho]

For every firm ``i`` and controlled price ``p_k`` the relaxed constraints are

    |s_i + (p_k - C_i'(s_i) - lam_ik + mu_ik) (D'(p_k) - sum_{j != i} s_j')| <= rho
    lam_ik (Cap_i - s_i) <= rho,   mu_ik s_i <= rho,   lam, mu, rho >= 0

plus monotonicity and the end bounds ``s_i(p_min) >= 0``, ``s_i(p_max) <= Cap_i``.

For fixed spline coefficients the best multipliers are available in closed
form, so the smallest feasible ``rho`` is an explicit function
``rho(beta) = max_ik r_ik(beta)``. ``solve`` minimizes that max function
with a trust-region sequential quadratic programming method (HiGHS for the
first, linear, subproblem and Clarabel for the convex quadratic ones) and
then reconstructs the smallest multipliers that keep every band within
``rho``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .market import Market
from .splines import KnotVector, Spline, SplineBasis

__all__ = [
    "NlpFormulation",
    "SolveOptions",
    "NlpReport",
    "formulate",
    "solve",
    "kkt_residuals",
    "jump_diagnostics",
    "jump_table",
    "pointwise_bound",
    "initial_coefficients",
]

log = logging.getLogger(__name__)

POINTWISE = "pointwise"
FULL = "full"
_MODE_ALIASES = {"pointwise": POINTWISE, "full": FULL, "full_coefficient": FULL}


@dataclass(frozen=True, eq=False)
class NlpFormulation:
    market: Market
    basis: SplineBasis
    prices: np.ndarray
    mode: str
    B: sp.csr_matrix
    dB: sp.csr_matrix
    A_lin: sp.csr_matrix
    b_lin: np.ndarray

    @property
    def m(self) -> int:
        return self.market.m

    @property
    def K(self) -> int:
        return self.basis.dimension

    @property
    def N(self) -> int:
        return self.prices.size

    @property
    def p_min(self) -> float:
        return self.basis.knots.lo

    @property
    def p_max(self) -> float:
        return self.basis.knots.hi

    @property
    def n_beta(self) -> int:
        return self.m * self.K

    @property
    def n_decision(self) -> int:
        return self.m * self.K + 2 * self.m * self.N + 1

    @property
    def layout(self) -> dict:
        nb, mn = self.n_beta, self.m * self.N
        return {
            "beta": slice(0, nb),
            "lambda": slice(nb, nb + mn),
            "mu": slice(nb + mn, nb + 2 * mn),
            "rho": slice(nb + 2 * mn, nb + 2 * mn + 1),
        }

    def pack(self, beta, lam, mu, rho) -> np.ndarray:
        return np.concatenate([np.ravel(beta), np.ravel(lam), np.ravel(mu), [rho]])

    def unpack(self, x):
        L = self.layout
        return (
            x[L["beta"]].reshape(self.m, self.K),
            x[L["lambda"]].reshape(self.m, self.N),
            x[L["mu"]].reshape(self.m, self.N),
            float(x[L["rho"]][0]),
        )

    # -- evaluation ---------------------------------------------------------

    def supplies(self, beta):
        """Values and slopes at the controlled prices, each shape ``(m, N)``."""
        beta = np.asarray(beta).reshape(self.m, self.K)
        s = (self.B @ beta.T).T
        ds = (self.dB @ beta.T).T
        return s, ds

    def foc_parts(self, beta):
        """``a = s + (p - C'(s)) g`` and ``g = D' - sum_{j != i} s_j'`` at every (i, k)."""
        s, ds = self.supplies(beta)
        mk = self.market
        dD = mk.demand.derivative(self.prices)
        g = dD[None, :] - (ds.sum(axis=0)[None, :] - ds)
        mc = mk.c[:, None] + 2.0 * mk.a[:, None] * s
        a = s + (self.prices[None, :] - mc) * g
        return s, ds, g, a

    def constraint_violations(self, x) -> dict:
        """Largest violation of each constraint group at the full decision vector."""
        beta, lam, mu, rho = self.unpack(x)
        s, ds, g, a = self.foc_parts(beta)
        caps = self.market.capacities[:, None]
        foc = a + (mu - lam) * g
        lin = self.A_lin @ beta.ravel() - self.b_lin
        out = {
            "foc": float(np.max(np.abs(foc) - rho)),
            "lambda_comp": float(np.max(lam * (caps - s) - rho)),
            "mu_comp": float(np.max(mu * s - rho)),
            "sign": float(max(np.max(-lam), np.max(-mu), -rho)),
            "linear": float(np.max(lin)) if lin.size else -math.inf,
        }
        return {k: max(v, 0.0) for k, v in out.items()}

    def implied_shocks(self, beta) -> np.ndarray:
        """``eps_k = sum_j s_j(p_k) - D(p_k)``."""
        s, _ = self.supplies(beta)
        return s.sum(axis=0) - self.market.demand(self.prices)

    def splines(self, beta) -> list:
        beta = np.asarray(beta).reshape(self.m, self.K)
        return [Spline(self.basis, beta[i]) for i in range(self.m)]


def formulate(
    market: Market,
    basis: SplineBasis | None = None,
    knots: KnotVector | None = None,
    mode: str = FULL,
    order: int = 3,
    prices=None,
) -> NlpFormulation:
    """Build the relaxed-KKT formulation on a B-spline space.

    ``prices`` defaults to the knot-interval midpoints, one per interval.
    """
    if basis is None:
        if knots is None:
            raise ValueError("either a basis or knots is required")
        basis = SplineBasis.bspline(knots, order=order)
    if basis.kind != "bspline" or basis.order not in (3, 4):
        raise ValueError("the general method uses quadratic or cubic B-splines")
    if len(basis.knots) < 3:
        raise ValueError("at least 3 knots are required")
    if mode not in _MODE_ALIASES:
        raise ValueError(f"unknown monotonicity mode {mode!r}")
    mode = _MODE_ALIASES[mode]
    if mode == FULL and basis.order == 4:
        # non-decreasing coefficients still imply a non-decreasing cubic,
        # they just exclude some non-decreasing cubics
        log.info("full-coefficient monotonicity with cubic splines is sufficient but not necessary")
    p = basis.knots.midpoints if prices is None else np.asarray(prices, dtype=float)
    if np.any(np.diff(p) <= 0):
        raise ValueError("controlled prices must be strictly increasing")
    B = sp.csr_matrix(basis(p))
    dB = sp.csr_matrix(basis(p, 1))
    m, K, N = market.m, basis.dimension, p.size

    blocks = []
    rhs = []
    ends = basis(np.array([basis.knots.lo, basis.knots.hi]))
    for i in range(m):
        if mode == FULL:
            mono = sp.diags([np.ones(K - 1), -np.ones(K - 1)], [0, 1], shape=(K - 1, K))
        else:
            mono = B[:-1] - B[1:]
        rows = sp.vstack([mono, sp.csr_matrix(-ends[0][None, :]), sp.csr_matrix(ends[1][None, :])])
        blocks.append(rows)
        rhs.append(np.concatenate([np.zeros(mono.shape[0]), [0.0, market.capacities[i]]]))
    A_lin = sp.block_diag(blocks, format="csr")
    b_lin = np.concatenate(rhs)
    return NlpFormulation(market, basis, p, mode, B, dB, A_lin, b_lin)


# --------------------------------------------------------------------------
# closed-form multipliers and the reduced max function


def _pieces(f: NlpFormulation, beta) -> dict:
    """Smallest attainable violation per (i, k), split into two smooth branches.

    Branch 0 uses the multiplier that lowers the FOC (useful when ``a > 0``),
    branch 1 the one that raises it. With the multiplier's complementarity
    weight ``w`` (``s`` or ``Cap - s``) balancing ``|a| - y|g|`` against
    ``y w`` gives ``r = |a| w / (|g| + w)``; each branch is
    ``sigma a phi(w, h)`` with ``phi = w / (h + w)`` and ``h = |g|``.
    Arrays have shape ``(2, m, N)``.
    """
    s, ds, g, a = f.foc_parts(beta)
    return _branches(f.market, s, g, a)


def _branches(mk: Market, s, g, a) -> dict:
    caps = mk.capacities[:, None]
    h = np.abs(g)
    neg = g < 0
    # lowering uses mu (weight s) when g < 0 and lambda (weight Cap - s) otherwise
    w = np.stack([np.where(neg, s, caps - s), np.where(neg, caps - s, s)])
    dsign = np.stack([np.where(neg, 1.0, -1.0), np.where(neg, -1.0, 1.0)])
    sigma = np.array([1.0, -1.0])[:, None, None]
    wp = np.maximum(w, 0.0)
    den = np.maximum(h[None] + wp, 1e-300)
    phi = wp / den
    r = sigma * a[None] * phi
    return {"s": s, "g": g, "a": a, "h": h, "w": w, "wp": wp, "den": den,
            "phi": phi, "dsign": dsign, "sigma": sigma, "r": r}


def _block_rows(f: NlpFormulation, own, oth) -> sp.csr_matrix:
    """Rows ``(i, k)`` equal to ``own[i, k] B[k]`` in block ``i`` and ``oth[i, k] dB[k]`` elsewhere."""
    rows = []
    for i in range(f.m):
        cols = []
        for j in range(f.m):
            if i == j:
                cols.append(sp.diags(own[i]) @ f.B)
            else:
                cols.append(sp.diags(oth[i]) @ f.dB)
        rows.append(sp.hstack(cols))
    return sp.vstack(rows, format="csr")


def _gradients(f: NlpFormulation, d: dict):
    """Gradient rows of ``a``, ``s_i`` and ``h`` at every (i, k), each ``(m N, n_beta)``."""
    mk = f.market
    zero = np.zeros_like(d["a"])
    dmc = 2.0 * mk.a[:, None]
    # a = s_i + (p - C_i'(s_i)) g, g = D' - sum_{j != i} s_j'
    GA = _block_rows(f, 1.0 - dmc * d["g"], -(f.prices[None, :] - (mk.c[:, None] + dmc * d["s"])))
    GS = _block_rows(f, np.ones_like(zero), zero)
    GH = _block_rows(f, zero, -np.sign(d["g"]))
    return GA, GS, GH


def _phi_derivatives(d: dict):
    """First and second partials of ``phi(w, h)``; the one-sided form is used at ``w = 0``."""
    h = d["h"][None]
    wp, den = d["wp"], d["den"]
    act = (d["w"] >= 0).astype(float)
    phi_w = act * h / den**2
    phi_h = -wp / den**2
    phi_ww = -2.0 * act * h / den**3
    phi_hh = 2.0 * wp / den**3
    phi_wh = act * (wp - h) / den**3
    return phi_w, phi_h, phi_ww, phi_hh, phi_wh


def _jacobian(f: NlpFormulation, d: dict, grads=None) -> sp.csr_matrix:
    """Jacobian of both branches stacked, shape ``(2 m N, n_beta)``."""
    GA, GS, GH = grads if grads is not None else _gradients(f, d)
    phi_w, phi_h, *_ = _phi_derivatives(d)
    a, sig = d["a"][None], d["sigma"]
    cA = (sig * d["phi"]).reshape(2, -1)
    cS = (sig * a * phi_w * d["dsign"]).reshape(2, -1)
    cH = (sig * a * phi_h).reshape(2, -1)
    out = [sp.diags(cA[b]) @ GA + sp.diags(cS[b]) @ GS + sp.diags(cH[b]) @ GH for b in range(2)]
    return sp.vstack(out, format="csr")


def _curvature_factor(f: NlpFormulation, d: dict, u, grads=None, u_tol: float = 1e-12):
    """Sparse ``F`` with ``F F^T`` the PSD part of ``sum_j u_j Hess r_j``.

    Each piece's Hessian is ``V M V^T`` with ``V = [grad a, grad w, grad h]``;
    ``M`` (3 x 3) is clipped to its positive semidefinite part.
    """
    GA, GS, GH = grads if grads is not None else _gradients(f, d)
    u = np.asarray(u).reshape(2, -1)
    sel = np.nonzero(u > u_tol)
    if sel[0].size == 0:
        return None
    br, idx = sel
    phi_w, phi_h, phi_ww, phi_hh, phi_wh = (x.reshape(2, -1)[br, idx] for x in _phi_derivatives(d))
    sig = d["sigma"].reshape(2)[br]
    a = d["a"].ravel()[idx]
    phi = d["phi"].reshape(2, -1)[br, idx]
    dsign = d["dsign"].reshape(2, -1)[br, idx]
    gsign = np.sign(d["g"]).ravel()[idx]
    alpha = np.repeat(f.market.a, f.N)[idx]
    M = np.zeros((idx.size, 3, 3))
    M[:, 0, 1] = M[:, 1, 0] = sig * phi_w
    M[:, 0, 2] = M[:, 2, 0] = sig * phi_h
    M[:, 1, 1] = sig * a * phi_ww
    M[:, 2, 2] = sig * a * phi_hh
    # quadratic costs make a bilinear in (s_i, g)
    M[:, 1, 2] = M[:, 2, 1] = sig * (a * phi_wh - 2.0 * alpha * phi * dsign * gsign)
    M *= u[br, idx][:, None, None]
    ev, Q = np.linalg.eigh(M)
    L = Q * np.sqrt(np.maximum(ev, 0.0))[:, None, :]
    GW = sp.diags(dsign) @ GS[idx]
    GAs, GHs = GA[idx], GH[idx]
    cols = []
    for c in range(3):
        cols.append(sp.diags(L[:, 0, c]) @ GAs + sp.diags(L[:, 1, c]) @ GW + sp.diags(L[:, 2, c]) @ GHs)
    Ft = sp.vstack(cols, format="csr")
    keep = np.asarray(abs(Ft).sum(axis=1)).ravel() > 0
    return Ft[keep].T.tocsc()


def pointwise_bound(mk: Market, p, s, ds) -> np.ndarray:
    """Smallest relaxation bound at each price for given curve values and slopes.

    ``s`` and ``ds`` have shape ``(m, len(p))``; the result is the per-firm
    bound ``max(r_branch0, r_branch1)`` with optimal multipliers.
    """
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    ds = np.asarray(ds, dtype=float)
    g = mk.demand.derivative(p)[None, :] - (ds.sum(axis=0)[None, :] - ds)
    mc = mk.c[:, None] + 2.0 * mk.a[:, None] * s
    a = s + (p[None, :] - mc) * g
    return np.maximum(np.max(_branches(mk, s, g, a)["r"], axis=0), 0.0)


def reduced_rho(f: NlpFormulation, beta) -> float:
    return float(max(np.max(_pieces(f, beta)["r"]), 0.0))


def multipliers(f: NlpFormulation, beta, rho: float):
    """Smallest multipliers keeping every relaxed constraint within ``rho``.

    Multipliers are zero wherever ``|a_ik| <= rho``.
    """
    d = _pieces(f, beta)
    g, a, h = d["g"], d["a"], d["h"]
    excess = np.maximum(np.abs(a) - rho, 0.0)
    y = np.where(h > 0, excess / np.where(h > 0, h, 1.0), 0.0)
    neg = g < 0
    lowers = a > 0  # need the multiplier that lowers the FOC
    # lowering uses mu when g < 0, lambda when g > 0
    use_mu = (lowers & neg) | (~lowers & ~neg)
    mu = np.where(use_mu, y, 0.0)
    lam = np.where(use_mu, 0.0, y)
    return lam, mu


# --------------------------------------------------------------------------
# solver


@dataclass
class SolveOptions:
    """Trust-region SQP settings.

    The run stops when the model predicts a relative decrease below ``rtol``,
    or when ``rho`` has improved by less than ``stall_rtol`` (relative) over
    the last ``stall_window`` iterations. ``second_order=False`` drops the
    curvature term and gives a plain sequential LP.
    """

    max_iter: int = 300
    feas_tol: float = 1e-9
    seed: int = 0
    radius: Optional[float] = None
    min_radius: float = 1e-12
    rtol: float = 1e-10
    stall_window: int = 15
    stall_rtol: float = 1e-4
    second_order: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SolveOptions":
        names = ("max_iter", "feas_tol", "seed", "radius", "rtol", "stall_window",
                 "stall_rtol", "second_order")
        known = {k: d[k] for k in names if k in d}
        return cls(**known)


@dataclass
class NlpReport:
    formulation: NlpFormulation
    rho_star: float
    beta: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    iterations: int
    max_constraint_violation: float
    implied_shocks: np.ndarray
    converged: bool
    status: str
    termination: str = ""
    history: list = field(default_factory=list)

    @property
    def splines(self):
        return self.formulation.splines(self.beta)

    @property
    def shock_flags(self):
        """Controlled prices whose implied shock falls outside ``[eps_min, eps_max]``."""
        mk = self.formulation.market
        eps = self.implied_shocks
        return {
            "below": self.formulation.prices[eps < mk.eps_min].tolist(),
            "above": self.formulation.prices[eps > mk.eps_max].tolist(),
        }

    def sample(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.column_stack([s(p) for s in self.splines])


def initial_coefficients(f: NlpFormulation) -> np.ndarray:
    """Coefficients of the clipped competitive curves ``min(max(-D'(p)(p - c_i), 0), Cap_i)``.

    Coefficients are sampled at the Greville abscissae, which preserves
    monotonicity and bounds.
    """
    mk = f.market
    xi = f.basis.greville()
    slope = -mk.demand.derivative(xi)
    beta = np.empty((f.m, f.K))
    for i in range(f.m):
        beta[i] = np.clip(slope * (xi - mk.c[i]), 0.0, mk.capacities[i])
    return beta


def _lp_step(J, r, A_lin, b_res, radius):
    """Linear model step; returns ``(d, model_value, piece_duals)`` or ``None``."""
    n = J.shape[1]
    A_ub = sp.vstack(
        [sp.hstack([J, sp.csr_matrix(-np.ones((J.shape[0], 1)))]),
         sp.hstack([A_lin, sp.csr_matrix((A_lin.shape[0], 1))])],
        format="csr",
    )
    c = np.zeros(n + 1)
    c[-1] = 1.0
    bounds = [(-radius, radius)] * n + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=np.concatenate([-r, b_res]), bounds=bounds, method="highs")
    if res.status != 0:
        return None
    u = -res.ineqlin.marginals[: J.shape[0]]
    return res.x[:n], float(res.x[-1]), u


def _qp_step(J, r, A_lin, b_res, radius, F):
    """Step for ``max_j (r_j + J_j d) + 0.5 |F^T d|^2`` inside the box.

    Solved as a convex QP in ``(d, z, y)`` with ``y = F^T d``.
    """

    n, q, nr = J.shape[1], F.shape[1], J.shape[0]
    nl = A_lin.shape[0]
    nx = n + 1 + q
    P = sp.block_diag([sp.csc_matrix((n + 1, n + 1)), sp.identity(q)], format="csc")
    cost = np.zeros(nx)
    cost[n] = 1.0
    eye = sp.identity(n, format="csr")
    rows = [
        sp.hstack([F.T, sp.csr_matrix((q, 1)), -sp.identity(q)]),
        sp.hstack([J, sp.csr_matrix(-np.ones((nr, 1))), sp.csr_matrix((nr, q))]),
        sp.hstack([A_lin, sp.csr_matrix((nl, 1 + q))]),
        sp.hstack([eye, sp.csr_matrix((n, 1 + q))]),
        sp.hstack([-eye, sp.csr_matrix((n, 1 + q))]),
        sp.hstack([sp.csr_matrix((1, n)), sp.csr_matrix(-np.ones((1, 1))), sp.csr_matrix((1, q))]),
    ]
    A = sp.vstack(rows, format="csc")
    b = np.concatenate([np.zeros(q), -r, b_res, np.full(2 * n, radius), [0.0]])
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    cones = [clarabel.ZeroConeT(q), clarabel.NonnegativeConeT(nr + nl + 2 * n + 1)]
    sol = clarabel.DefaultSolver(P, cost, A, b, cones, settings).solve()
    if str(sol.status) not in ("Solved", "AlmostSolved"):
        return None
    x = np.asarray(sol.x)
    y = x[n + 1 :]
    u = np.asarray(sol.z)[q : q + nr]
    return x[:n], float(x[n] + 0.5 * y @ y), np.maximum(u, 0.0)


def solve(f: NlpFormulation, options: SolveOptions | None = None, beta0=None) -> NlpReport:
    """Minimize ``rho`` over the spline coefficients.

    Each iteration minimizes the model

        max_j (r_j + J_j d) + 0.5 d^T H d   s.t.  A_lin (beta + d) <= b_lin,  |d| <= radius

    over both branches of every (i, k) piece, where ``H`` is the positive
    semidefinite part of the dual-weighted piece Hessians (zero on the first
    iteration, which is a plain LP). Steps are accepted or rejected on the
    actual decrease of ``rho(beta)``.
    """
    opt = options or SolveOptions()
    beta = initial_coefficients(f) if beta0 is None else np.array(beta0, dtype=float).reshape(f.m, f.K)
    beta = _project_feasible(f, beta)
    n = f.n_beta
    scale = float(np.max(f.market.capacities))
    radius = opt.radius if opt.radius is not None else 0.05 * scale
    rho = reduced_rho(f, beta)
    history = [rho]
    reason = "max_iter"
    it = 0
    A_lin = f.A_lin
    u = None
    for it in range(1, opt.max_iter + 1):
        d = _pieces(f, beta)
        grads = _gradients(f, d)
        J = _jacobian(f, d, grads)
        r = d["r"].ravel()
        b_res = f.b_lin - A_lin @ beta.ravel()
        F = None
        if opt.second_order and u is not None:
            F = _curvature_factor(f, d, u, grads)
        step_out = _qp_step(J, r, A_lin, b_res, radius, F) if F is not None else None
        if step_out is None:
            step_out = _lp_step(J, r, A_lin, b_res, radius)
        if step_out is None:
            radius *= 0.25
            if radius < opt.min_radius * scale:
                reason = "lp_failure"
                break
            continue
        dx, model, u = step_out
        pred = rho - model
        if pred <= opt.rtol * max(rho, opt.feas_tol) or pred <= 1e-15:
            reason = "first_order"
            break
        trial = beta + dx.reshape(f.m, f.K)
        rho_trial = reduced_rho(f, trial)
        ratio = (rho - rho_trial) / pred
        step = float(np.max(np.abs(dx)))
        if ratio > 1e-4:
            beta = trial
            rho = rho_trial
            if ratio > 0.75 and step > 0.9 * radius:
                radius *= 2.0
            elif ratio < 0.25:
                radius = max(0.25 * step, radius * 0.25)
        else:
            radius = 0.25 * min(radius, step)
        history.append(rho)
        log.debug("iter %d rho %.3e radius %.2e ratio %.3f pred %.2e step %.2e", it, rho, radius, ratio, pred, step)
        if rho <= opt.feas_tol:
            reason = "feasible"
            break
        w = opt.stall_window
        if len(history) > w and history[-w - 1] - rho <= opt.stall_rtol * history[-w - 1]:
            reason = "no_progress"
            break
        if radius < opt.min_radius * scale:
            reason = "radius_collapse"
            break
    lam, mu = multipliers(f, beta, rho)
    x = f.pack(beta, lam, mu, rho)
    viol = f.constraint_violations(x)
    max_viol = float(max(viol.values()))
    converged = reason in ("first_order", "feasible", "no_progress")
    return NlpReport(
        formulation=f,
        rho_star=rho,
        beta=beta,
        lam=lam,
        mu=mu,
        iterations=it,
        max_constraint_violation=max_viol,
        implied_shocks=f.implied_shocks(beta),
        converged=converged,
        status="converged" if converged else "not_converged",
        termination=reason,
        history=history,
    )


def _project_feasible(f: NlpFormulation, beta):
    """Make the starting coefficients satisfy the linear constraints."""
    beta = np.array(beta, dtype=float)
    if f.mode == FULL:
        for i in range(f.m):
            beta[i] = np.clip(np.maximum.accumulate(beta[i]), 0.0, f.market.capacities[i])
        return beta
    lin = f.A_lin @ beta.ravel() - f.b_lin
    if np.max(lin, initial=0.0) <= 0:
        return beta
    # pointwise mode: fall back to monotone coefficients, which are feasible
    for i in range(f.m):
        beta[i] = np.clip(np.maximum.accumulate(beta[i]), 0.0, f.market.capacities[i])
    return beta


# --------------------------------------------------------------------------
# diagnostics


def _interp_multiplier(prices, values, p):
    return np.vstack([np.interp(p, prices, v) for v in values])


def kkt_residuals(r: NlpReport, m: Market | None = None, dense_factor: int = 10) -> dict:
    """Sup norms of the first-order and complementarity error functions.

    Multipliers are linearly interpolated between controlled prices. Returns
    per-firm ``foc``, ``lam``, ``mu`` sup norms on a grid ``dense_factor``
    times finer than the controlled prices, the sup of ``|FOC|`` at the
    controlled prices themselves, and the out-of-support shock flags.
    """
    f = r.formulation
    m = f.market if m is None else m
    pk = f.prices
    dense = np.linspace(pk[0], pk[-1], (pk.size - 1) * dense_factor + 1)
    table = error_functions(r, dense)
    at_k = error_functions(r, pk)
    return {
        "grid": dense,
        "foc": table["foc"],
        "foc_sup": np.max(np.abs(table["foc"]), axis=1).tolist(),
        "lam_sup": np.max(np.abs(table["lam"]), axis=1).tolist(),
        "mu_sup": np.max(np.abs(table["mu"]), axis=1).tolist(),
        "foc_at_controlled_sup": float(np.max(np.abs(at_k["foc"]))),
        "shock_flags": r.shock_flags,
    }


def error_functions(r: NlpReport, p) -> dict:
    f = r.formulation
    mk = f.market
    p = np.asarray(p, dtype=float)
    B = f.basis(p)
    dB = f.basis(p, 1)
    s = (B @ r.beta.T).T
    ds = (dB @ r.beta.T).T
    lam = _interp_multiplier(f.prices, r.lam, p)
    mu = _interp_multiplier(f.prices, r.mu, p)
    g = mk.demand.derivative(p)[None, :] - (ds.sum(axis=0)[None, :] - ds)
    mc = mk.c[:, None] + 2.0 * mk.a[:, None] * s
    foc = s + (p[None, :] - mc - lam + mu) * g
    caps = mk.capacities[:, None]
    return {"foc": foc, "lam": lam * (caps - s), "mu": mu * s}


def _one_sided_slopes(spline, p0, width, n_intervals=3):
    """One-sided derivatives of ``spline`` at ``p0``.

    A quadratic is fitted on ``n_intervals`` intervals of size ``width`` on
    each side, skipping the interval next to ``p0``, and its derivative is
    extrapolated to ``p0``.
    """
    out = []
    for sgn in (-1.0, 1.0):
        grid = p0 + sgn * np.linspace(width, (n_intervals + 1) * width, 8 * n_intervals + 1)
        coef = np.polyfit(grid - p0, spline(grid), 2)
        out.append(float(coef[1]))
    return out[0], out[1]


def jump_diagnostics(r: NlpReport, m: Market | None = None, n_intervals: int = 3, cap_rtol: float = 1e-3) -> list:
    """Derivative jumps of the recovered curves at entry and capacity events.

    With ``n`` firms producing (the event firm included) and ``n > 2``, the
    other producing firms' derivatives all jump by ``s_e'(p^-) / (n - 2)`` at
    a capacity event of firm ``e`` and by ``-s_e'(p^+) / (n - 2)`` at its
    entry price. Entry events sit at the configured ``c_i``; a capacity event
    is the first price where a curve comes within ``cap_rtol * Cap`` of its
    capacity. Events closer than ``n_intervals + 1`` knot intervals to the
    window edge are marked unestimable.
    """
    f = r.formulation
    mk = f.market if m is None else m
    return jump_table(r.splines, mk, f.p_min, f.p_max, f.basis.knots.mesh_norm,
                      n_intervals=n_intervals, cap_rtol=cap_rtol,
                      n_grid=20 * (f.basis.knots.breakpoints.size - 1) + 1)


def jump_table(splines, mk: Market, lo: float, hi: float, width: float,
               n_intervals: int = 3, cap_rtol: float = 1e-3, n_grid: int = 20001) -> list:
    """``jump_diagnostics`` for arbitrary curves ``s(p)`` on ``[lo, hi]``.

    ``width`` is the fitting interval of the one-sided slope estimates.
    """
    reach = (n_intervals + 1) * width
    grid = np.linspace(lo, hi, n_grid)
    vals = np.column_stack([s(grid) for s in splines])
    caps = mk.capacities
    events = []
    for e in range(mk.m):
        if lo < mk.c[e] < hi:
            events.append(("entry", e, float(mk.c[e])))
        near = np.nonzero(vals[:, e] >= caps[e] * (1 - cap_rtol))[0]
        if near.size and lo < grid[near[0]] < hi:
            events.append(("capacity", e, float(grid[near[0]])))
    events.sort(key=lambda ev: ev[2])

    out = []
    for kind, e, p0 in events:
        row = {"kind": kind, "firm": e, "price": p0}
        if p0 - reach < lo or p0 + reach > hi:
            row["estimable"] = False
            out.append(row)
            continue
        # producing and uncapped on the side where the event firm is active
        side = p0 + (reach if kind == "entry" else -reach)
        producing = [
            i for i in range(mk.m)
            if i != e and mk.c[i] < p0 and splines[i](side) < caps[i] * (1 - cap_rtol)
            and splines[i](p0) < caps[i] * (1 - cap_rtol)
        ]
        n = len(producing) + 1
        slopes = {i: _one_sided_slopes(splines[i], p0, width, n_intervals) for i in producing + [e]}
        jumps = {i: slopes[i][1] - slopes[i][0] for i in producing}
        applies = n > 2
        if kind == "entry":
            predicted = -slopes[e][1] / (n - 2) if applies else None
        else:
            predicted = slopes[e][0] / (n - 2) if applies else None
        vals_j = np.array(list(jumps.values()))
        spread = None
        if vals_j.size > 1:
            spread = float((vals_j.max() - vals_j.min()) / max(np.max(np.abs(vals_j)), 1e-300))
        mismatch = None
        if predicted is not None and vals_j.size:
            mismatch = float(np.max(np.abs(vals_j - predicted)) / max(abs(predicted), 1e-300))
        row.update(
            estimable=True,
            identity_applies=applies,
            producing=producing,
            n=n,
            jumps=jumps,
            predicted=predicted,
            spread=spread,
            mismatch=mismatch,
        )
        out.append(row)
    return out
