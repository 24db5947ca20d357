"""Market description: firms, affine demand with an additive shock, price window."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MarketError",
    "CostSpec",
    "Firm",
    "DemandSpec",
    "Market",
    "derive_price_window",
    "uniqueness_precondition",
]


class MarketError(ValueError):
    """Inconsistent or invalid market data."""


@dataclass(frozen=True)
class CostSpec:
    """``C(q) = c q + a q**2``."""

    c: float
    a: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.c) and np.isfinite(self.a)):
            raise MarketError("cost coefficients must be finite")
        if self.c < 0 or self.a < 0:
            raise MarketError("cost coefficients must be non-negative (convex, non-decreasing cost)")

    def cost(self, q):
        return self.c * q + self.a * np.square(q)

    def marginal(self, q):
        return self.c + 2.0 * self.a * np.asarray(q, dtype=float)


@dataclass(frozen=True)
class Firm:
    name: str
    cost: CostSpec
    capacity: float

    def __post_init__(self):
        if not (np.isfinite(self.capacity) and self.capacity > 0):
            raise MarketError(f"firm {self.name!r}: capacity must be finite and positive")


@dataclass(frozen=True)
class DemandSpec:
    """``D(p) = intercept - slope * p``; the shock is added on top."""

    intercept: float
    slope: float

    def __post_init__(self):
        if not (np.isfinite(self.intercept) and np.isfinite(self.slope)):
            raise MarketError("demand coefficients must be finite")
        if self.slope <= 0:
            raise MarketError("demand slope must be positive (strictly decreasing demand)")

    def __call__(self, p):
        return self.intercept - self.slope * np.asarray(p, dtype=float)

    def derivative(self, p):
        return np.full_like(np.asarray(p, dtype=float), -self.slope)

    def second_derivative(self, p):
        return np.zeros_like(np.asarray(p, dtype=float))


@dataclass(frozen=True)
class Market:
    firms: tuple
    demand: DemandSpec
    eps_min: float
    eps_max: float
    price_cap: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "firms", tuple(self.firms))
        if len(self.firms) < 1:
            raise MarketError("a market needs at least one firm")
        if not self.eps_min < self.eps_max:
            raise MarketError("eps_min must be smaller than eps_max")
        if self.price_cap is not None and not self.price_cap > 0:
            raise MarketError("price_cap must be positive")

    @property
    def m(self) -> int:
        return len(self.firms)

    @property
    def c(self) -> np.ndarray:
        return np.array([f.cost.c for f in self.firms])

    @property
    def a(self) -> np.ndarray:
        return np.array([f.cost.a for f in self.firms])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([f.capacity for f in self.firms])

    @property
    def p_min(self) -> float:
        return derive_price_window(self)[0]

    @property
    def p_max(self) -> float:
        return derive_price_window(self)[1]

    def is_constant_cost_duopoly(self) -> bool:
        return self.m == 2 and all(f.cost.a == 0 for f in self.firms)

    def marginal_cost(self, i: int, q):
        return self.firms[i].cost.marginal(q)

    def profit(self, i: int, p, eps, others_supply):
        """Profit of firm ``i`` clearing the residual demand at price ``p``."""
        q = self.demand(p) + eps - others_supply
        return p * q - self.firms[i].cost.cost(q)

    @classmethod
    def from_dict(cls, d: dict) -> "Market":
        try:
            firms = [
                Firm(
                    str(f.get("name", f"firm{k + 1}")),
                    CostSpec(float(f["c"]), float(f.get("a", 0.0))),
                    float(f["capacity"]),
                )
                for k, f in enumerate(d["firms"])
            ]
            demand = DemandSpec(float(d["demand"]["intercept"]), float(d["demand"]["slope"]))
            eps = d["epsilon"]
            cap = d.get("price_cap")
            return cls(tuple(firms), demand, float(eps["min"]), float(eps["max"]),
                       None if cap is None else float(cap))
        except (KeyError, TypeError) as exc:
            raise MarketError(f"malformed market config: missing or invalid {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "firms": [
                {"name": f.name, "c": f.cost.c, "a": f.cost.a, "capacity": f.capacity}
                for f in self.firms
            ],
            "demand": {"intercept": self.demand.intercept, "slope": self.demand.slope},
            "epsilon": {"min": self.eps_min, "max": self.eps_max},
            "price_cap": self.price_cap,
        }

    @classmethod
    def from_json(cls, path) -> "Market":
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_price_window(m: Market) -> tuple:
    """``(p_min, p_max)``: the largest entry price and the highest clearing price.

    ``p_min = max_i C_i'(0)``; ``p_max`` is where ``D(p) + eps_max`` hits zero,
    truncated at the price cap when one is given.
    """
    p_min = float(max(f.cost.c for f in m.firms))
    p_max = (m.demand.intercept + m.eps_max) / m.demand.slope
    p_max = max(p_max, 0.0)
    if m.price_cap is not None:
        p_max = min(p_max, m.price_cap)
    if not p_min < p_max:
        raise MarketError(f"empty price window: p_min={p_min} >= p_max={p_max}")
    return p_min, float(p_max)


def uniqueness_precondition(m: Market) -> bool:
    """True when demand at ``p_min`` can be negative, ``D(p_min) + eps_min < 0``."""
    p_min = max(f.cost.c for f in m.firms)
    return bool(m.demand(p_min) + m.eps_min < 0)
