"""Two agents who disagree on the mean-reversion speed of a volatility factor.

State ``(S, Y)`` with ``dS = alpha(Y) dW`` and ``dY = lam_i (ybar - Y) dt + beta(Y) dW'``
under agent ``i``, ``W`` and ``W'`` independent, ``lam_1 > lam_2``. For convex
payoffs the equilibrium price is the value of a single model whose drift of
``Y`` is ``lam_1 (ybar - y)`` below the level and ``lam_2 (ybar - y)`` above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .mc import SimConfig, _path_normals, mean_se
from .models import AgentModel, ClippedAffine, MarketSpec, MeanRevertingVolField, PayoffSpec, _affine_from
from .pde import ValueSurface

GH_ORDER = 64


@dataclass(frozen=True)
class HestonTypeParams:
    alpha: ClippedAffine
    beta: ClippedAffine
    lam1: float
    lam2: float
    ybar: float = 0.0
    s: float = 1.0
    y: float = 0.0
    allow_frozen_factor: bool = False

    def __post_init__(self):
        if not self.lam1 > self.lam2 > 0:
            raise ValueError("need lam1 > lam2 > 0")
        probe = np.linspace(self.ybar - 10, self.ybar + 10, 801)
        a = self.alpha(probe)
        if np.any(a <= 0) or np.any(np.diff(a) < 0):
            raise ValueError("alpha must be positive and nondecreasing")
        b = self.beta(probe)
        if np.any(b < 0) or (np.any(b == 0) and not self.allow_frozen_factor):
            raise ValueError("beta must be bounded away from zero")

    def agents(self) -> list[AgentModel]:
        return [
            AgentModel(1, MeanRevertingVolField(self.alpha, self.beta, self.lam1, self.ybar)),
            AgentModel(2, MeanRevertingVolField(self.alpha, self.beta, self.lam2, self.ybar)),
        ]

    def lipschitz_squares(self, lo: float, hi: float, points: int = 2001) -> tuple[float, float]:
        """Finite-difference Lipschitz estimates of ``alpha^2`` and ``beta^2`` on ``[lo, hi]``."""
        y = np.linspace(lo, hi, points)
        h = y[1] - y[0]
        la = float(np.max(np.abs(np.diff(self.alpha(y) ** 2))) / h)
        lb = float(np.max(np.abs(np.diff(self.beta(y) ** 2))) / h)
        return la, lb


def default_params() -> HestonTypeParams:
    return HestonTypeParams(
        alpha=ClippedAffine(0.2, 0.1, 0.05, 1.0),
        beta=ClippedAffine(0.3, 0.0, 0.3, 0.3),
        lam1=2.0,
        lam2=0.5,
        ybar=0.0,
        s=1.0,
        y=0.0,
    )


def default_market(params: HestonTypeParams | None = None, strike: float = 1.0, T: float = 1.0,
                   s0: float = 1.0, k: float = 0.0) -> MarketSpec:
    p = params or default_params()
    return MarketSpec(tuple(p.agents()), PayoffSpec("call", strike=strike), T, (p.s, p.y), s0, k)


def gamma_drift(y, params: HestonTypeParams):
    """Drift of the volatility factor in the linearised equation.

    ``lam1 (ybar - y)`` for ``y <= ybar`` and ``lam2 (ybar - y)`` above.
    """
    y = np.asarray(y, dtype=float)
    gap = params.ybar - y
    return np.where(y <= params.ybar, params.lam1 * gap, params.lam2 * gap)


_GH_CACHE: dict = {}


def _gauss_hermite(order: int):
    if order not in _GH_CACHE:
        z, w = np.polynomial.hermite_e.hermegauss(order)
        _GH_CACHE[order] = (z, w / math.sqrt(2.0 * math.pi))
    return _GH_CACHE[order]


def conditional_gaussian_price(s, integrated_variance, payoff, order: int = GH_ORDER):
    """``E[f(s + sqrt(V) Z)]`` for standard normal ``Z``.

    A ``PayoffSpec`` is piecewise linear, so each hinge ``(x - c)^+`` is
    integrated in closed form; Gauss-Hermite with ``order`` nodes would leave
    an O(1/order) error at the kinks. Any other callable ``f`` goes through
    Gauss-Hermite. Broadcasts over ``s`` and ``V``; returns ``f(s)`` at ``V = 0``.
    """
    s = np.asarray(s, dtype=float)
    V = np.asarray(integrated_variance, dtype=float)
    if np.any(V < 0):
        raise ValueError("integrated variance must be nonnegative")
    s_b, V_b = np.broadcast_arrays(s, V)
    if isinstance(payoff, PayoffSpec):
        a, b, kinks = payoff.linear_pieces()
        out = a + b * s_b
        sd = np.sqrt(V_b)
        safe = np.where(sd > 0, sd, 1.0)
        for c, jump in kinks:
            with np.errstate(over="ignore"):
                d = (s_b - c) / safe
                hinge = (s_b - c) * ndtr(d) + sd * np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
            out = out + jump * np.where(sd > 0, hinge, np.maximum(s_b - c, 0.0))
        f_at = payoff.on_coordinate
    else:
        z, w = _gauss_hermite(order)
        pts = s_b[..., None] + np.sqrt(V_b)[..., None] * z
        out = np.asarray(payoff(pts)) @ w
        f_at = payoff
    out = np.where(V_b == 0, f_at(s_b), out)
    return out if out.ndim else float(out)


def simulate_integrated_variance(t: float, y: float, params: HestonTypeParams, T: float,
                                 cfg: SimConfig) -> np.ndarray:
    """Per-path ``int_t^T alpha^2(Y'(r)) dr`` with ``Y'`` under the drift ``gamma`` (Euler, left points)."""
    steps = cfg.steps
    dt = (T - t) / steps
    sq = math.sqrt(dt)
    Y = np.full(cfg.paths, float(y))
    iv = np.zeros(cfg.paths)
    for m in range(steps):
        iv += params.alpha(Y) ** 2 * dt
        xi = _path_normals(cfg, m, 0, cfg.paths, 1)[:, 0]
        Y = Y + gamma_drift(Y, params) * dt + params.beta(Y) * sq * xi
    return iv


def quadrature_mc_price(t: float, s: float, y: float, params: HestonTypeParams, payoff: PayoffSpec,
                        cfg: SimConfig, T: float = 1.0) -> tuple[float, float]:
    """Mean and standard error of the conditional Gaussian price over simulated ``Y'`` paths."""
    iv = simulate_integrated_variance(t, y, params, T, cfg)
    return mean_se(conditional_gaussian_price(s, iv, payoff))


def switching_strategy(y: float, market: MarketSpec) -> tuple[float, float]:
    """Holdings ``(h1, h2)``: agent 1 holds everything below the level, agent 2 above, split at it."""
    if market.n != 2 or not all(isinstance(a.coefficients, MeanRevertingVolField) for a in market.agents):
        raise ValueError("switching strategies need a two-agent mean-reverting market")
    c1, c2 = (a.coefficients for a in market.agents)
    if not c1.lam > c2.lam:
        raise ValueError("agent 1 must have the faster mean reversion")
    ybar = c1.ybar
    s0, k = market.s0, market.k
    if y < ybar:
        h1 = s0 + k
    elif y == ybar:
        h1 = s0 / 2
    else:
        h1 = -k
    return h1, s0 - h1


@dataclass
class MonotonicityReport:
    passed: bool
    min_dy: float
    tolerance: float
    at: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_monotonicity(surface: ValueSurface, tolerance: float | None = None) -> MonotonicityReport:
    """Smallest central-difference ``d_y v`` over interior nodes of all layers.

    Default tolerance: ten times the surface's scheme tolerance (or its
    residual tolerance when no scheme tolerance was estimated).
    """
    if surface.grid.dim != 2:
        raise ValueError("monotonicity check needs an (s, y) surface")
    if tolerance is None:
        base = surface.scheme_tolerance if surface.scheme_tolerance is not None else surface.residual_tolerance
        tolerance = 10.0 * base
    hy = surface.grid.spacing[1]
    v = surface.values
    dy = (v[:, 1:-1, 2:] - v[:, 1:-1, :-2]) / (2 * hy)
    flat = int(np.argmin(dy))
    m, i, j = np.unravel_index(flat, dy.shape)
    min_dy = float(dy.reshape(-1)[flat])
    at = {"t": float(surface.grid.times[m]), "s": float(surface.grid.axes[0][i + 1]),
          "y": float(surface.grid.axes[1][j + 1])}
    return MonotonicityReport(bool(min_dy >= -tolerance), min_dy, float(tolerance), at)


def predicted_maximizer(y_axis: np.ndarray, ybar: float) -> np.ndarray:
    """Agent whose generator is largest when ``d_y v > 0``: 1 below the level, 2 above, 0 at it."""
    return np.where(y_axis < ybar, 1, np.where(y_axis > ybar, 2, 0))


def build_params(spec: dict) -> HestonTypeParams:
    return HestonTypeParams(
        alpha=_affine_from(spec["alpha"]),
        beta=_affine_from(spec["beta"]),
        lam1=float(spec["lam1"]),
        lam2=float(spec["lam2"]),
        ybar=float(spec.get("ybar", 0.0)),
        s=float(spec.get("s", 1.0)),
        y=float(spec.get("y", 0.0)),
    )


def params_from_market(market: MarketSpec) -> HestonTypeParams:
    c1, c2 = (a.coefficients for a in market.agents)
    return HestonTypeParams(c1.alpha, c1.beta, c1.lam, c2.lam, c1.ybar, market.x0[0], market.x0[1])
