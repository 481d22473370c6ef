"""Equilibrium objects built from a solved surface.

Holdings, market clearing, the supermartingale drift diagnostics, Monte Carlo
P&L of trading strategies and the bubble decomposition of the price.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mc import PathBundle, mean_se
from .models import MarketSpec
from .pde import (
    Grid,
    ValueSurface,
    popcount,
    scheme_tolerance,
    solve_equilibrium,
    solve_fundamental,
)


class MarketMismatch(ValueError):
    pass


@dataclass
class StrategyProfile:
    """Per-node holdings ``holdings[i-1, m, *node]`` of every agent."""

    market: MarketSpec
    grid: Grid
    maximizers: np.ndarray
    holdings: np.ndarray

    def holdings_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Nearest-node holdings for states ``x`` of shape ``(p, d)``; returns ``(n, p)``."""
        g = self.grid
        layer = min(int(math.floor(t / g.dt + 1e-9)), g.steps)
        idx = g.nearest_index(x)
        return self.holdings[(slice(None), layer) + idx]


def holdings_from_masks(masks: np.ndarray, n: int, s0: float, k: float) -> np.ndarray:
    """Holdings ``(s0 + k (n - m)) / m`` for the ``m`` maximizers and ``-k`` for the rest."""
    m = popcount(masks, n)
    share = (s0 + k * (n - m)) / np.maximum(m, 1)
    out = np.empty((n,) + masks.shape)
    for i in range(n):
        bit = (masks >> np.uint32(i)) & np.uint32(1)
        out[i] = np.where(bit == 1, share, -k)
    return out


def extract_strategies(surface: ValueSurface, market: MarketSpec) -> StrategyProfile:
    if tuple(a.id for a in market.agents) != tuple(surface.agent_ids):
        raise MarketMismatch(
            f"surface was solved for agents {surface.agent_ids}, market has {[a.id for a in market.agents]}"
        )
    if surface.grid.T != market.T or surface.grid.dim != market.dim:
        raise MarketMismatch("surface grid does not match the market horizon or dimension")
    h = holdings_from_masks(surface.maximizers, market.n, market.s0, market.k)
    return StrategyProfile(market, surface.grid, surface.maximizers, h)


def _neumaier(terms) -> np.ndarray:
    """Compensated elementwise sum; exact to about one ulp of the result."""
    total = np.zeros_like(terms[0], dtype=float)
    comp = np.zeros_like(total)
    for x in terms:
        t = total + x
        comp += np.where(np.abs(total) >= np.abs(x), (total - t) + x, (x - t) + total)
        total = t
    return total + comp


def check_clearing(profile: StrategyProfile) -> float:
    """Largest ``|sum_i h_i - s0|`` over all nodes, summed with compensation.

    Holdings are stored as floats, so a share such as ``s0 / 3`` carries its own
    rounding; the residual is then of the order of one ulp of ``s0 + n k``.
    """
    h = profile.holdings
    terms = list(h) + [np.full(h.shape[1:], -float(profile.market.s0))]
    return float(np.max(np.abs(_neumaier(terms))))


@dataclass
class SupermartingaleReport:
    passed: bool
    tolerance: float
    max_drift: float
    max_drift_at: dict
    max_sup_deviation: float
    max_sup_deviation_at: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _locate(surface: ValueSurface, layer: int, node: tuple, agent: int | None = None) -> dict:
    x = [float(ax[i]) for ax, i in zip(surface.grid.axes, node)]
    out = {"t": float(surface.grid.times[layer]), "x": x, "layer": int(layer), "node": [int(i) for i in node]}
    if agent is not None:
        out["agent"] = int(agent)
    return out


def verify_supermartingale(surface: ValueSurface, tolerance: float | None = None) -> SupermartingaleReport:
    """Check ``mu_i <= tol`` for every agent and ``|max_i mu_i| <= tol`` on interior nodes.

    ``tolerance`` defaults to ten times the surface's residual tolerance.
    """
    tol = 10.0 * surface.residual_tolerance if tolerance is None else float(tolerance)
    inner = surface.interior()
    mu = np.where(inner, surface.drift, -np.inf)
    flat = int(np.argmax(mu))
    agent_idx, layer, *node = np.unravel_index(flat, mu.shape)
    max_drift = float(mu.reshape(-1)[flat])
    sup = surface.drift.max(axis=0)
    dev = np.where(inner, np.abs(sup), -np.inf)
    flat2 = int(np.argmax(dev))
    layer2, *node2 = np.unravel_index(flat2, dev.shape)
    max_dev = float(dev.reshape(-1)[flat2])
    return SupermartingaleReport(
        passed=bool(max_drift <= tol and max_dev <= tol),
        tolerance=tol,
        max_drift=max_drift,
        max_drift_at=_locate(surface, layer, tuple(node), surface.agent_ids[agent_idx]),
        max_sup_deviation=max_dev,
        max_sup_deviation_at=_locate(surface, layer2, tuple(node2)),
    )


def evaluate_pnl(bundle: PathBundle, holdings: np.ndarray, agent: int | None = None) -> tuple[float, float]:
    """Mean and standard error of ``sum_m H(t_m) (Z(t_{m+1}) - Z(t_m))`` over paths.

    ``holdings`` has shape ``(paths, steps+1)`` or ``(steps+1,)`` for a strategy
    that depends on time only.
    """
    if agent is not None and bundle.measure != f"agent{agent}":
        raise ValueError(f"bundle was simulated under {bundle.measure}, not agent {agent}")
    if bundle.z is None:
        raise ValueError("bundle has no stored price paths")
    H = np.broadcast_to(np.asarray(holdings, dtype=float), bundle.z.shape)
    if not np.any(H):
        return 0.0, 0.0
    pnl = np.sum(H[:, :-1] * np.diff(bundle.z, axis=1), axis=1)
    return mean_se(pnl)


def pnl_samples(bundle: PathBundle, holdings: np.ndarray) -> np.ndarray:
    H = np.broadcast_to(np.asarray(holdings, dtype=float), bundle.z.shape)
    return np.sum(H[:, :-1] * np.diff(bundle.z, axis=1), axis=1)


def random_strategies(market: MarketSpec, times: np.ndarray, count: int, seed: int,
                      pieces: int = 8) -> np.ndarray:
    """Piecewise-constant admissible strategies, values uniform on ``[-k, s0 + k (n-1)]``.

    Returns ``(count, len(times))``.
    """
    rng = np.random.default_rng(seed)
    lo = -market.k
    hi = market.s0 + market.k * (market.n - 1)
    levels = rng.uniform(lo, hi, size=(count, pieces))
    T = times[-1]
    piece = np.minimum((times / T * pieces).astype(int), pieces - 1)
    return levels[:, piece]


def trade_events(bundle: PathBundle, agent_index: int = 0) -> list:
    """``(path, t, state, old, new)`` for every change of one agent's holding."""
    if bundle.holdings is None or bundle.x is None:
        raise ValueError("bundle has no stored holdings")
    h = bundle.holdings[agent_index]
    change = h[:, 1:-1] != h[:, :-2]
    p_idx, m_idx = np.nonzero(change)
    out = []
    for p, m in zip(p_idx, m_idx):
        out.append((int(p), float(bundle.times[m + 1]), bundle.x[p, m + 1].tolist(),
                    float(h[p, m]), float(h[p, m + 1])))
    return out


@dataclass
class EquilibriumReport:
    price: float
    fundamentals: list
    bubble: float
    tolerance: float
    diagnostics: dict
    surface: ValueSurface | None = field(default=None, repr=False)
    fundamental_surfaces: list = field(default_factory=list, repr=False)
    profile: StrategyProfile | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "price": self.price,
            "fundamentals": list(self.fundamentals),
            "bubble": self.bubble,
            "tolerance": self.tolerance,
            "diagnostics": self.diagnostics,
        }


def bubble_decomposition(market: MarketSpec, grid: Grid, scheme: str = "explicit",
                         estimate_tolerance: bool = True) -> EquilibriumReport:
    """Equilibrium price, every agent's fundamental value and their gap at ``x0``."""
    agents = list(market.agents)
    x0 = np.asarray(market.x0)
    surface = solve_equilibrium(agents, market.payoff, grid, scheme)
    funds = [solve_fundamental(a, market.payoff, grid, scheme) for a in agents]
    price = surface.value_at(x0)
    fvals = [f.value_at(x0) for f in funds]
    tol = 0.0
    if estimate_tolerance:
        tol_eq = scheme_tolerance(agents, market.payoff, grid, x0, scheme, surface)
        tol_f = [scheme_tolerance([a], market.payoff, grid, x0, scheme, f) for a, f in zip(agents, funds)]
        surface.scheme_tolerance = tol_eq
        for f, t in zip(funds, tol_f):
            f.scheme_tolerance = t
        tol = tol_eq + max(tol_f)
    profile = extract_strategies(surface, market)
    sm = verify_supermartingale(surface)
    terminal = float(np.max(np.abs(surface.values[-1] - market.payoff(grid.points()))))
    diagnostics = {
        "max_drift": sm.max_drift,
        "max_sup_drift_deviation": sm.max_sup_deviation,
        "residual_tolerance": surface.residual_tolerance,
        "supermartingale_pass": sm.passed,
        "clearing_residual": check_clearing(profile),
        "terminal_residual": terminal,
        "scheme": scheme,
    }
    return EquilibriumReport(price, fvals, price - max(fvals), tol, diagnostics, surface, funds, profile)
