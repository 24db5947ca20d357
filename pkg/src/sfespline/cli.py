"""Batch front end: ``solve``, ``converge`` and ``verify``.

Configs are JSON::

    {
      "method": "duopoly_ls" | "general",
      "market": {...},                      # see Market.from_dict
      "spline": {"kind": "natural_cubic" | "bspline", "order": 4,
                 "knot_spec": [[lo, hi, step], ...]},
      "grid": {"price_lo": ..., "price_hi": ..., "step": ...},   # duopoly_ls only
      "solve": {"monotonicity": "full", "max_iter": 300, ...},   # general only
      "output": {"dir": "out", "sample_step": 0.05}
    }

Exit codes: 0 ok, 2 input error (one JSON line on stderr, nothing written),
3 solver outcome error (report still written).
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("SFE_THREADS")
if _THREADS:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import general_nlp
from .duopoly_ls import (
    CollocationGrid,
    IllPosedSystemError,
    assemble,
    ode_residuals,
    solve_family,
    trim_knots,
)
from .equilibrium import (
    NO_EQUILIBRIUM,
    PastingError,
    deviation_audit,
    paste,
    search_t,
    verify,
)
from .general_nlp import SolveOptions, formulate, jump_table, kkt_residuals, pointwise_bound
from .market import Market, MarketError, derive_price_window
from .splines import KnotVector, SplineBasis

__all__ = ["RunConfig", "ConfigError", "load_config", "main", "cmd_solve", "cmd_converge", "cmd_verify"]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3

DUOPOLY_LS = "duopoly_ls"
GENERAL = "general"
_TOP_KEYS = {"method", "market", "spline", "grid", "solve", "output", "name"}
# general-method curves approach capacity smoothly; count them as capped within this
CAP_RTOL = 1e-3
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    market: Market
    method: str
    spline_kind: str
    order: int
    knot_spec: list
    grid: Optional[tuple] = None
    solve: dict = field(default_factory=dict)
    out_dir: str = "out"
    sample_step: float = 0.05
    name: str = ""

    @property
    def knots(self) -> KnotVector:
        return KnotVector.from_spec(self.knot_spec)

    def basis(self, knots: KnotVector | None = None) -> SplineBasis:
        knots = self.knots if knots is None else knots
        if self.spline_kind == "natural_cubic":
            return SplineBasis.natural_cubic(knots)
        return SplineBasis.bspline(knots, order=self.order)

    def collocation(self, step_divisor: float = 1.0) -> CollocationGrid:
        lo, hi, step = self.grid
        return CollocationGrid.uniform(lo, hi, step / step_divisor)

    def halved(self, k: int) -> "RunConfig":
        """Copy with every knot step (and collocation step) divided by ``2**k``."""
        f = 2.0**k
        spec = [[lo, hi, step / f] for lo, hi, step in self.knot_spec]
        grid = None if self.grid is None else (self.grid[0], self.grid[1], self.grid[2] / f)
        return RunConfig(self.market, self.method, self.spline_kind, self.order, spec, grid,
                         dict(self.solve), self.out_dir, self.sample_step, self.name)


def _number(d, key, where, positive=False):
    if key not in d:
        raise ConfigError(f"{where}: missing '{key}'")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}.{key} must be a finite number")
    if positive and v <= 0:
        raise ConfigError(f"{where}.{key} must be positive")
    return float(v)


def parse_config(raw: dict) -> RunConfig:
    """Validate a decoded config dict; raises ``ConfigError``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("method", "market", "spline"):
        if key not in raw:
            raise ConfigError(f"missing '{key}'")
    method = raw["method"]
    if method not in (DUOPOLY_LS, GENERAL):
        raise ConfigError(f"method must be '{DUOPOLY_LS}' or '{GENERAL}', got {method!r}")
    try:
        market = Market.from_dict(raw["market"])
        derive_price_window(market)
    except (MarketError, AttributeError) as exc:
        raise ConfigError(f"market: {exc}") from exc

    sp_cfg = raw["spline"]
    if not isinstance(sp_cfg, dict):
        raise ConfigError("spline must be an object")
    kind = sp_cfg.get("kind", "bspline")
    if kind not in ("natural_cubic", "bspline"):
        raise ConfigError(f"spline.kind must be 'natural_cubic' or 'bspline', got {kind!r}")
    order = sp_cfg.get("order", 4 if kind == "natural_cubic" else 3)
    if isinstance(order, bool) or not isinstance(order, int) or order < 2:
        raise ConfigError("spline.order must be an integer >= 2")
    if kind == "natural_cubic" and order != 4:
        raise ConfigError("natural cubic splines have order 4")
    spec = sp_cfg.get("knot_spec")
    if not isinstance(spec, list) or not spec:
        raise ConfigError("spline.knot_spec must be a non-empty list of [lo, hi, step]")
    try:
        spec = [[float(v) for v in piece] for piece in spec]
        if any(len(piece) != 3 for piece in spec):
            raise ValueError("each knot_spec entry needs [lo, hi, step]")
        KnotVector.from_spec(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"spline.knot_spec: {exc}") from exc

    grid = None
    solve = {}
    if method == DUOPOLY_LS:
        if not market.is_constant_cost_duopoly():
            raise ConfigError("method duopoly_ls needs exactly 2 firms with a = 0")
        g = raw.get("grid")
        if not isinstance(g, dict):
            raise ConfigError("method duopoly_ls needs a 'grid' object")
        lo = _number(g, "price_lo", "grid")
        hi = _number(g, "price_hi", "grid")
        step = _number(g, "step", "grid", positive=True)
        if not lo < hi:
            raise ConfigError("grid.price_lo must be below grid.price_hi")
        if lo <= market.c.max():
            raise ConfigError(f"grid.price_lo must exceed every marginal cost ({market.c.max()})")
        knots = KnotVector.from_spec(spec)
        if lo < knots.lo or hi > knots.hi:
            raise ConfigError("collocation grid must lie inside the knot span")
        grid = (lo, hi, step)
    else:
        if kind != "bspline" or order not in (3, 4):
            raise ConfigError("method general needs a quadratic or cubic B-spline (order 3 or 4)")
        solve = raw.get("solve", {})
        if not isinstance(solve, dict):
            raise ConfigError("solve must be an object")
        mode = solve.get("monotonicity", general_nlp.FULL)
        if mode not in general_nlp._MODE_ALIASES:
            raise ConfigError(f"solve.monotonicity must be 'full' or 'pointwise', got {mode!r}")
        try:
            SolveOptions.from_dict(solve)
        except TypeError as exc:
            raise ConfigError(f"solve: {exc}") from exc

    out = raw.get("output", {})
    if not isinstance(out, dict):
        raise ConfigError("output must be an object")
    sample_step = _number(out, "sample_step", "output", positive=True) if "sample_step" in out else 0.05
    return RunConfig(market, method, kind, int(order), spec, grid, dict(solve),
                     str(out.get("dir", "out")), sample_step, str(raw.get("name", "")))


def load_config(path) -> RunConfig:
    """Read and validate a JSON config; bundled names like ``example1.json`` also resolve."""
    p = Path(path)
    if not p.exists() and (CONFIG_DIR / p.name).exists() and p.parent == Path("."):
        p = CONFIG_DIR / p.name
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {str(path)!r}: {exc}") from exc
    return parse_config(raw)


# --------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    return f"{float(v):.9g}"


def _round9(a):
    return np.vectorize(lambda v: float(_fmt(v)), otypes=[float])(np.asarray(a, dtype=float))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n")


def write_table(path: Path, header, columns) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])


def read_curves(path, m: int):
    """Read ``p,s_1,...,s_m``; raises ``ConfigError`` on a column mismatch."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {str(path)!r}: {exc.strerror}") from exc
    if not rows:
        raise ConfigError(f"{str(path)!r} is empty")
    header = [h.strip() for h in rows[0]]
    expected = ["p"] + [f"s_{i + 1}" for i in range(m)]
    if header != expected:
        raise ConfigError(f"CSV header {header} does not match the market's {m} firms (expected {expected})")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"non-numeric CSV entry: {exc}") from exc
    if data.ndim != 2 or data.shape[0] < 3 or data.shape[1] != m + 1:
        raise ConfigError("CSV needs at least 3 rows with one value per column")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise ConfigError("CSV prices must be strictly increasing")
    return data[:, 0], data[:, 1:]


# --------------------------------------------------------------------------
# diagnostics of sampled curves


class _Interp:
    def __init__(self, p, v):
        self.p, self.v = p, v

    def __call__(self, x, d: int = 0):
        if d != 0:
            raise ValueError("sampled curves only support values")
        return np.interp(x, self.p, self.v)


class SampledCurves:
    """Piecewise-linear curves through stored samples, with the ``Equilibrium`` interface."""

    def __init__(self, market: Market, p, S):
        self.market = market
        self.p = np.asarray(p, dtype=float)
        self.S = np.asarray(S, dtype=float)
        self.supplies = [_Interp(self.p, self.S[:, i]) for i in range(self.S.shape[1])]

    def sample(self, p) -> np.ndarray:
        return np.column_stack([s(np.asarray(p, dtype=float)) for s in self.supplies])

    def total(self, p):
        return sum(s(p) for s in self.supplies)


def _first_reach(p, v, cap, rtol=1e-9):
    hit = np.nonzero(v >= cap * (1 - rtol))[0]
    return float(p[hit[0]]) if hit.size else None


def curve_diagnostics(cfg: RunConfig, p, S, n_shocks: int = 20) -> dict:
    """Diagnostics computed from sampled curves only.

    Both ``solve`` (on the rounded samples it writes) and ``verify`` (on the
    CSV it reads) call this, so the two agree to formatting precision.
    Derivatives are central differences of the samples.
    """
    mk = cfg.market
    p = np.asarray(p, dtype=float)
    S = np.asarray(S, dtype=float)
    caps = mk.capacities
    drops = [float(np.max(np.maximum.accumulate(S[:, i]) - S[:, i])) for i in range(mk.m)]
    dS = np.gradient(S, p, axis=0)
    rtol = 1e-9 if cfg.method == DUOPOLY_LS else CAP_RTOL
    reach = [_first_reach(p, S[:, i], caps[i], rtol) for i in range(mk.m)]
    p_min, p_max = derive_price_window(mk)
    out = {
        "monotonicity_violation": max(drops),
        "monotonicity_violation_by_firm": drops,
        "p_cap": reach,
    }
    if cfg.method == DUOPOLY_LS:
        lo = max(p_min, cfg.grid[0])
        top = min([r for r in reach if r is not None] + [p_max, cfg.grid[1]])
        inner = np.nonzero((p > lo) & (p < top))[0]
        inner = inner[(inner > 0) & (inner < p.size - 1)]
        inner = inner[(p[inner - 1] > lo) & (p[inner + 1] < top)]
        if inner.size:
            c = mk.c
            tot = dS[inner].sum(axis=1)
            res = [(tot - dS[inner, j]) - S[inner, j] / (p[inner] - c[j]) + mk.demand.slope for j in range(2)]
            out["ode_residual_sup"] = float(np.max(np.abs(res)))
        else:
            out["ode_residual_sup"] = None
        window = (p_min, p_max)
    else:
        knots = cfg.knots
        mids = knots.midpoints
        inner = np.arange(1, p.size - 1)
        inner = inner[(p[inner] >= mids[0]) & (p[inner] <= mids[-1])]
        bound = pointwise_bound(mk, p[inner], S[inner].T, dS[inner].T)
        out["kkt_bound_sup"] = float(np.max(bound)) if bound.size else None
        window = (max(p_min, p[0]), min(p_max, p[-1]))
    width = cfg.knots.mesh_norm
    jt = jump_table(SampledCurves(mk, p, S).supplies, mk, float(p[0]), float(p[-1]), width)
    out["jumps"] = [_jump_row(r) for r in jt]
    audit = deviation_audit(SampledCurves(mk, p, S), n_shocks=n_shocks, window=window)
    out["max_relative_improvement"] = max((max(r) for _, _, r in audit), default=0.0)
    out["deviation_audit"] = [
        {"eps": e, "price": pr, "relative_improvement": list(r)} for e, pr, r in audit
    ]
    return out


def _jump_row(row: dict) -> dict:
    out = dict(row)
    out["firm"] = row["firm"] + 1
    if "producing" in row:
        out["producing"] = [i + 1 for i in row["producing"]]
        out["jumps"] = {str(i + 1): v for i, v in row["jumps"].items()}
    return out


# --------------------------------------------------------------------------
# solving


@dataclass
class SolveOutcome:
    ok: bool
    report: dict
    prices: Optional[np.ndarray] = None
    curves: Optional[np.ndarray] = None
    residual_prices: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None
    metric: Optional[float] = None


def _sample_grid(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9))
    p = lo + step * np.arange(n + 1)
    if hi - p[-1] > 1e-9 * max(1.0, abs(hi)):
        p = np.append(p, hi)
    return p


def _knots_summary(knots: KnotVector) -> dict:
    return {"lo": knots.lo, "hi": knots.hi, "mesh_norm": knots.mesh_norm, "count": len(knots)}


def solve_duopoly(cfg: RunConfig, trim: bool = False, audit: bool = True) -> SolveOutcome:
    mk = cfg.market
    grid = cfg.collocation()
    knots = cfg.knots
    if trim:
        knots = trim_knots(knots, grid, cfg.spline_kind)
    basis = cfg.basis(knots)
    report = {"method": DUOPOLY_LS, "knots": _knots_summary(knots), "collocation_points": len(grid)}
    try:
        system = assemble(mk, basis, grid)
        fam = solve_family(system, basis=basis, costs=mk.c)
    except IllPosedSystemError as exc:
        report.update(status="ill_posed", error=str(exc))
        return SolveOutcome(False, report)
    report.update(
        rank=fam.numeric_rank,
        shape=list(system.matrix.shape),
        singular_values=fam.singular_values,
        residual_norm=fam.residual_norm,
    )
    res = search_t(fam, mk, basis)
    report.update(status=res.status, t_star=res.t_star, tie=res.tie, notes=list(res.notes))
    if res.status == NO_EQUILIBRIUM:
        report["p_cap"] = [None] * mk.m
        return SolveOutcome(False, report)
    try:
        eq = paste(fam, res, mk, basis, collocation=grid)
    except PastingError as exc:
        report.update(status="pasting_failed", error=str(exc))
        return SolveOutcome(False, report)
    diag = verify(eq, grid=grid, n_shocks=20 if audit else 0)
    report.update(
        binding_firm=None if eq.binding_firm is None else eq.binding_firm + 1,
        p_cap=eq.p_cap,
        spline_window=list(eq.spline_window),
        diagnostics=diag.to_dict(),
    )
    p_max = derive_price_window(mk)[1]
    prices = _sample_grid(0.0, p_max, cfg.sample_step)
    curves = eq.sample(prices)
    lo, top = eq.spline_window
    rp = prices[(prices >= max(lo, grid.prices[0])) & (prices <= min(top, grid.prices[-1]))]
    rp = rp[rp > lo]
    splines = [s.segment_at(0.5 * (lo + top)).spline for s in eq.supplies]
    res_vals = ode_residuals(splines, mk.c, mk.demand.derivative, rp).T
    return SolveOutcome(True, report, prices, curves, rp, res_vals, diag.ode_residual_sup)


def solve_general(cfg: RunConfig, seed: int = 0) -> SolveOutcome:
    mk = cfg.market
    knots = cfg.knots
    mode = cfg.solve.get("monotonicity", general_nlp.FULL)
    f = formulate(mk, knots=knots, mode=mode, order=cfg.order)
    opts = SolveOptions.from_dict(cfg.solve)
    opts.seed = seed
    r = general_nlp.solve(f, opts)
    kkt = kkt_residuals(r)
    prices = _sample_grid(knots.lo, knots.hi, cfg.sample_step)
    curves = np.clip(r.sample(prices), 0.0, None)
    reach = [_first_reach(prices, curves[:, i], mk.capacities[i], CAP_RTOL) for i in range(mk.m)]
    report = {
        "method": GENERAL,
        "knots": _knots_summary(knots),
        "monotonicity": general_nlp._MODE_ALIASES[mode],
        "status": r.status,
        "converged": r.converged,
        "termination": r.termination,
        "rho_star": r.rho_star,
        "iterations": r.iterations,
        "max_constraint_violation": r.max_constraint_violation,
        "rank": None,
        "singular_values": None,
        "p_cap": reach,
        "diagnostics": {
            "foc_sup": kkt["foc_sup"],
            "lam_sup": kkt["lam_sup"],
            "mu_sup": kkt["mu_sup"],
            "foc_at_controlled_sup": kkt["foc_at_controlled_sup"],
            "shock_flags": kkt["shock_flags"],
            "jumps": [_jump_row(row) for row in general_nlp.jump_diagnostics(r)],
        },
    }
    return SolveOutcome(r.converged, report, prices, curves, kkt["grid"], kkt["foc"].T, r.rho_star)


def run_solve(cfg: RunConfig, seed: int = 0, trim: bool = False, audit: bool = True) -> SolveOutcome:
    if cfg.method == DUOPOLY_LS:
        return solve_duopoly(cfg, trim=trim, audit=audit)
    return solve_general(cfg, seed=seed)


# --------------------------------------------------------------------------
# commands


def _out_dir(cfg: RunConfig, out: Optional[str]) -> Path:
    d = Path(out if out is not None else cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_svg(path: Path, x, ys, labels, xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sfespline"
    fig, ax = plt.subplots(figsize=(5, 4))
    for y, label in zip(ys, labels):
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _supply_svg(path: Path, p, S, title: str) -> None:
    # quantity on the horizontal axis, price on the vertical one
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sfespline"
    fig, ax = plt.subplots(figsize=(5, 4))
    for i in range(S.shape[1]):
        ax.plot(S[:, i], p, label=f"s_{i + 1}")
    ax.set_xlabel("quantity")
    ax.set_ylabel("price")
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_solve(cfg: RunConfig, out: Optional[str] = None, seed: int = 0, svg: bool = False) -> int:
    res = run_solve(cfg, seed=seed)
    d = _out_dir(cfg, out)
    report = {"method": cfg.method, "seed": seed}
    report.update(res.report)
    if res.prices is not None:
        header = ["p"] + [f"s_{i + 1}" for i in range(cfg.market.m)]
        write_table(d / "equilibrium.csv", header, [res.prices] + list(res.curves.T))
        write_table(d / "residuals.csv", ["p"] + [f"foc_{i + 1}" for i in range(cfg.market.m)],
                    [res.residual_prices] + list(res.residuals.T))
        # same numbers verify will read back
        report["curve_diagnostics"] = curve_diagnostics(cfg, _round9(res.prices), _round9(res.curves))
        if svg:
            _supply_svg(d / "equilibrium.svg", res.prices, res.curves, cfg.name or cfg.method)
    write_json(d / "report.json", report)
    return EXIT_OK if res.ok else EXIT_SOLVER


def cmd_converge(cfg: RunConfig, halvings: int, out: Optional[str] = None, seed: int = 0,
                 svg: bool = False) -> int:
    """Repeat the solve with knot (and collocation) steps halved ``halvings`` times.

    The duopoly method trims outer knot intervals without collocation
    prices on refined meshes; the unrefined run is the plain solve.
    """
    if halvings < 0:
        raise ConfigError("--halvings must be non-negative")
    rows = []
    runs = []
    ok = True
    for k in range(halvings + 1):
        c = cfg.halved(k)
        res = run_solve(c, seed=seed, trim=k > 0, audit=False)
        tau = res.report["knots"]["mesh_norm"]
        metric = res.metric if res.metric is not None else float("nan")
        ok = ok and res.ok
        rows.append((tau, metric))
        runs.append({"halving": k, "tau": tau, "status": res.report.get("status"),
                     "metric": metric, "knots": res.report["knots"]})
    vals = np.array([r[1] for r in rows], dtype=float)
    monotone = bool(np.all(np.isfinite(vals)) and np.all(np.diff(vals) < 0))
    d = _out_dir(cfg, out)
    write_table(d / "convergence.csv", ["tau", "sup_residual_or_rho"],
                [[r[0] for r in rows], [r[1] for r in rows]])
    metric_name = "ode_residual_sup" if cfg.method == DUOPOLY_LS else "rho_star"
    write_json(d / "report.json", {
        "method": cfg.method,
        "seed": seed,
        "metric": metric_name,
        "halvings": halvings,
        "monotone_decrease": monotone,
        "runs": runs,
    })
    if svg:
        _write_svg(d / "convergence.svg", [r[0] for r in rows], [vals], [metric_name],
                   "tau", metric_name, "mesh refinement")
    return EXIT_OK if ok else EXIT_SOLVER


def cmd_verify(cfg: RunConfig, csv_path, out: Optional[str] = None, svg: bool = False) -> int:
    p, S = read_curves(csv_path, cfg.market.m)
    diag = curve_diagnostics(cfg, p, S)
    d = _out_dir(cfg, out)
    write_json(d / "diagnostics.json", {"method": cfg.method, "source": str(csv_path), **diag})
    if svg:
        _supply_svg(d / "verify.svg", p, S, "stored curves")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfespline", description="Spline supply function equilibria.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run config (bundled names resolve)")
        sp.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        sp.add_argument("--sample-step", type=float, default=None, help="price step of the CSV samples")
        sp.add_argument("--svg", action="store_true", help="also write SVG line charts")
        sp.add_argument("--seed", type=int, default=0, help="recorded in the report; the solvers are deterministic")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    common(sub.add_parser("solve", help="solve one config"))
    conv = sub.add_parser("converge", help="mesh-halving study")
    common(conv)
    conv.add_argument("--halvings", type=int, default=3, help="number of knot-step halvings (default 3)")
    ver = sub.add_parser("verify", help="diagnostics of stored curves")
    common(ver)
    ver.add_argument("csv", nargs="?", default=None, help="equilibrium.csv (default: <out>/equilibrium.csv)")
    return parser


def _fail(message: str) -> int:
    sys.stderr.write(json.dumps({"error": "input", "message": message}) + "\n")
    return EXIT_INPUT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.sample_step is not None:
            if not (math.isfinite(args.sample_step) and args.sample_step > 0):
                raise ConfigError("--sample-step must be positive")
            cfg.sample_step = args.sample_step
        if args.command == "solve":
            return cmd_solve(cfg, args.out, args.seed, args.svg)
        if args.command == "converge":
            return cmd_converge(cfg, args.halvings, args.out, args.seed, args.svg)
        csv_path = args.csv or str(Path(args.out if args.out else cfg.out_dir) / "equilibrium.csv")
        return cmd_verify(cfg, csv_path, args.out, args.svg)
    except ConfigError as exc:
        return _fail(str(exc).replace("\n", " "))


if __name__ == "__main__":
    sys.exit(main())
