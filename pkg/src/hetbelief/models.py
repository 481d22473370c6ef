"""Agent belief models: coefficient fields, payoffs and market specifications.

Every coefficient family evaluates vectorised over a batch of states: ``x`` has
shape ``(..., d)``, drifts come back as ``(..., d)`` and diffusions as
``(..., d, d')``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

ELLIPTICITY_FLOOR = 1e-6


class ModelError(ValueError):
    """Invalid model, payoff or market parameters."""


# ---------------------------------------------------------------------------
# coefficient families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClippedAffine:
    """``clip(intercept + slope * y, lo, hi)``; bounded away from zero when ``lo > 0``."""

    intercept: float
    slope: float = 0.0
    lo: float = 0.0
    hi: float = np.inf

    def __call__(self, y):
        return np.clip(self.intercept + self.slope * np.asarray(y, dtype=float), self.lo, self.hi)

    @property
    def upper(self) -> float:
        return float(self.hi)


class CoefficientField:
    """Base class for the drift/diffusion field of one agent."""

    family: str = ""
    dim: int = 1
    noise_dim: int = 1
    time_homogeneous: bool = True

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion_product(self, t: float, x: np.ndarray) -> np.ndarray:
        sig = self.diffusion(t, x)
        return sig @ np.swapaxes(sig, -1, -2)


class ConstantField(CoefficientField):
    """Bachelier-type model: constant drift vector and diffusion matrix."""

    family = "constant"

    def __init__(self, drift, sigma):
        b = np.atleast_1d(np.asarray(drift, dtype=float))
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim == 0:
            sig = np.full((b.size, 1), float(sig)) if b.size == 1 else sig * np.eye(b.size)
        elif sig.ndim == 1:
            sig = np.diag(sig)
        if sig.shape[0] != b.size:
            raise ModelError(f"diffusion has {sig.shape[0]} rows but drift has dimension {b.size}")
        if np.any(sig < 0) and sig.shape == (1, 1):
            raise ModelError("volatility must be nonnegative")
        self.b = b
        self.sigma = sig
        self.dim = b.size
        self.noise_dim = sig.shape[1]

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.b, x.shape[:-1] + (self.dim,)).copy()

    def diffusion(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.sigma, x.shape[:-1] + self.sigma.shape).copy()


class LocalVolField(CoefficientField):
    """One-dimensional local volatility tabulated on a (t, x) rectangle.

    Bilinear interpolation inside the table. Queries outside are clamped to the
    table edge (with a single logged warning) or rejected, per ``out_of_domain``.
    """

    family = "localvol"

    def __init__(self, times, xs, sigma, drift=0.0, out_of_domain: str = "clamp"):
        self.times = np.asarray(times, dtype=float)
        self.xs = np.asarray(xs, dtype=float)
        self.sig_table = np.asarray(sigma, dtype=float)
        if self.times.ndim != 1 or self.xs.ndim != 1 or self.times.size < 1 or self.xs.size < 2:
            raise ModelError("localvol table needs >= 1 time and >= 2 space nodes")
        if self.sig_table.shape != (self.times.size, self.xs.size):
            raise ModelError(
                f"localvol sigma table has shape {self.sig_table.shape}, "
                f"expected {(self.times.size, self.xs.size)}"
            )
        if np.any(np.diff(self.times) <= 0) or np.any(np.diff(self.xs) <= 0):
            raise ModelError("localvol table axes must be strictly increasing")
        if np.any(self.sig_table < 0):
            raise ModelError("localvol sigma must be nonnegative")
        d = np.asarray(drift, dtype=float)
        self.drift_table = np.broadcast_to(d, self.sig_table.shape).astype(float)
        if out_of_domain not in ("clamp", "reject"):
            raise ModelError("out_of_domain must be 'clamp' or 'reject'")
        self.out_of_domain = out_of_domain
        self.time_homogeneous = self.times.size == 1 or (
            np.all(self.sig_table == self.sig_table[:1]) and np.all(self.drift_table == self.drift_table[:1])
        )
        self._warned = False

    def _interp(self, table, t, x):
        x = np.asarray(x, dtype=float)[..., 0]
        lo, hi = self.xs[0], self.xs[-1]
        outside = (x < lo) | (x > hi) | (t < self.times[0]) | (t > self.times[-1])
        if np.any(outside):
            if self.out_of_domain == "reject":
                raise ModelError(f"query outside localvol table at t={t}")
            if not self._warned:
                logger.warning("localvol query outside table; clamping to the table edge")
                self._warned = True
        xc = np.clip(x, lo, hi)
        j = np.clip(np.searchsorted(self.xs, xc, side="right") - 1, 0, self.xs.size - 2)
        wx = (xc - self.xs[j]) / (self.xs[j + 1] - self.xs[j])
        if self.times.size == 1:
            row = table[0]
            return (1 - wx) * row[j] + wx * row[j + 1]
        tc = min(max(t, self.times[0]), self.times[-1])
        m = int(np.clip(np.searchsorted(self.times, tc, side="right") - 1, 0, self.times.size - 2))
        wt = (tc - self.times[m]) / (self.times[m + 1] - self.times[m])
        a = (1 - wx) * table[m, j] + wx * table[m, j + 1]
        b = (1 - wx) * table[m + 1, j] + wx * table[m + 1, j + 1]
        return (1 - wt) * a + wt * b

    def drift(self, t, x):
        return self._interp(self.drift_table, t, x)[..., None]

    def diffusion(self, t, x):
        return self._interp(self.sig_table, t, x)[..., None, None]


class MeanRevertingVolField(CoefficientField):
    """Two-factor model ``dS = alpha(Y) dW``, ``dY = lam (ybar - Y) dt + beta(Y) dW'``.

    ``W`` and ``W'`` are independent, so the diffusion matrix is diagonal.
    """

    family = "mean_reverting"
    dim = 2
    noise_dim = 2

    def __init__(self, alpha: ClippedAffine, beta: ClippedAffine, lam: float, ybar: float = 0.0):
        if not lam > 0:
            raise ModelError(f"mean-reversion speed must be positive, got {lam}")
        if alpha.lo <= 0 and alpha.intercept <= 0:
            raise ModelError("alpha must be positive")
        if alpha.slope < 0:
            raise ModelError("alpha must be nondecreasing in y")
        if beta.lo < 0 or (beta.lo == 0 and beta.slope == 0 and beta.intercept < 0):
            raise ModelError("beta must be nonnegative")
        self.alpha = alpha
        self.beta = beta
        self.lam = float(lam)
        self.ybar = float(ybar)
        lattice = np.linspace(ybar - 10.0, ybar + 10.0, 401)
        a = alpha(lattice)
        if np.any(a <= 0) or np.any(np.diff(a) < 0):
            raise ModelError("alpha must be positive and nondecreasing on the sample lattice")
        if np.any(beta(lattice) < 0):
            raise ModelError("beta must be nonnegative on the sample lattice")

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2,))
        out[..., 1] = self.lam * (self.ybar - x[..., 1])
        return out

    def diffusion(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = self.alpha(x[..., 1])
        out[..., 1, 1] = self.beta(x[..., 1])
        return out


@dataclass(frozen=True)
class AgentModel:
    id: int
    coefficients: CoefficientField

    @property
    def dim(self) -> int:
        return self.coefficients.dim


def _affine_from(spec) -> ClippedAffine:
    if isinstance(spec, ClippedAffine):
        return spec
    if isinstance(spec, (int, float)):
        return ClippedAffine(float(spec), 0.0, float(spec), float(spec))
    return ClippedAffine(
        float(spec["intercept"]),
        float(spec.get("slope", 0.0)),
        float(spec.get("lo", 0.0)),
        float(spec.get("hi", np.inf)),
    )


def build_model(agent_id: int, family: str, **params) -> AgentModel:
    """Construct an agent from a family name and its parameters.

    Families: ``constant`` (drift, sigma), ``localvol`` (times, x, sigma, drift,
    out_of_domain) and ``mean_reverting`` (alpha, beta, lam, ybar).
    """
    if agent_id < 1:
        raise ModelError("agent ids start at 1")
    if family == "constant":
        sigma = params.get("sigma", 0.0)
        drift = params.get("drift", 0.0)
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim <= 1 and np.any(sig < 0):
            raise ModelError("volatility must be nonnegative")
        field_ = ConstantField(drift, sigma)
    elif family == "localvol":
        field_ = LocalVolField(
            params["times"], params["x"], params["sigma"], params.get("drift", 0.0),
            params.get("out_of_domain", "clamp"),
        )
    elif family == "mean_reverting":
        lam = float(params["lam"])
        if lam <= 0:
            raise ModelError(f"mean-reversion speed must be positive, got {lam}")
        field_ = MeanRevertingVolField(
            _affine_from(params["alpha"]), _affine_from(params["beta"]), lam, float(params.get("ybar", 0.0))
        )
    else:
        raise ModelError(f"unknown model family {family!r}")
    return AgentModel(agent_id, field_)


def eval_coefficients(model: AgentModel, t: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Drift vector and ``sigma sigma^T`` at a single state."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.dim,):
        raise ModelError(f"state must have dimension {model.dim}")
    c = model.coefficients
    return c.drift(t, x), c.diffusion_product(t, x)


# ---------------------------------------------------------------------------
# regularity
# ---------------------------------------------------------------------------


@dataclass
class RegularityReport:
    agent: int
    min_eigenvalue: float
    drift_lipschitz: float
    diffusion_lipschitz: float
    threshold: float
    elliptic: bool

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "min_eigenvalue": self.min_eigenvalue,
            "drift_lipschitz": self.drift_lipschitz,
            "diffusion_lipschitz": self.diffusion_lipschitz,
            "threshold": self.threshold,
            "elliptic": self.elliptic,
        }


def validate_regularity(model: AgentModel, axes: Sequence[np.ndarray], times=(0.0,),
                        threshold: float = ELLIPTICITY_FLOOR) -> RegularityReport:
    """Empirical ellipticity and Lipschitz checks on a tensor lattice.

    ``axes`` holds one coordinate array (>= 2 points) per state dimension.
    Lipschitz constants are the largest finite-difference slopes between
    lattice neighbours; they are estimates, not certified bounds.
    """
    axes = [np.asarray(a, dtype=float) for a in axes]
    if len(axes) != model.dim or any(a.size < 2 for a in axes):
        raise ModelError("lattice needs >= 2 points on every state axis")
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    c = model.coefficients
    min_eig = np.inf
    lip_b = 0.0
    lip_s = 0.0
    for t in times:
        a = c.diffusion_product(t, mesh)
        min_eig = min(min_eig, float(np.linalg.eigvalsh(a).min()))
        b = c.drift(t, mesh)
        s = c.diffusion(t, mesh)
        for j, ax in enumerate(axes):
            h = np.diff(ax)
            shape = [1] * model.dim
            shape[j] = -1
            h = h.reshape(shape)
            db = np.linalg.norm(np.diff(b, axis=j), axis=-1) / h
            ds = np.linalg.norm(np.diff(s, axis=j), axis=(-2, -1)) / h
            lip_b = max(lip_b, float(db.max()))
            lip_s = max(lip_s, float(ds.max()))
    return RegularityReport(model.id, min_eig, lip_b, lip_s, threshold, bool(min_eig >= threshold))


# ---------------------------------------------------------------------------
# payoffs and markets
# ---------------------------------------------------------------------------

PAYOFF_KINDS = ("call", "put", "butterfly", "table", "identity", "constant")


@dataclass(frozen=True)
class PayoffSpec:
    """Payoff on one coordinate of the terminal state.

    ``butterfly`` is long one call at ``strike - width`` and ``strike + width``
    and short two at ``strike``. ``table`` interpolates ``points`` linearly and
    extends the end slopes.
    """

    kind: str
    strike: float = 0.0
    width: float = 0.0
    level: float = 0.0
    points: tuple = ()
    coordinate: int = 0
    growth: tuple = field(default=(None, 1.0))

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ModelError(f"unknown payoff kind {self.kind!r}")
        if self.kind == "butterfly" and not self.width > 0:
            raise ModelError("butterfly needs a positive width")
        if self.kind == "table":
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2 or np.any(np.diff(pts[:, 0]) <= 0):
                raise ModelError("table payoff needs >= 2 (x, f) points with increasing x")

    def __call__(self, x) -> np.ndarray:
        """Evaluate on states of shape ``(..., d)``."""
        s = np.asarray(x, dtype=float)[..., self.coordinate]
        return self.on_coordinate(s)

    def on_coordinate(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k = self.kind
        if k == "call":
            return np.maximum(s - self.strike, 0.0)
        if k == "put":
            return np.maximum(self.strike - s, 0.0)
        if k == "butterfly":
            K, w = self.strike, self.width
            return (np.maximum(s - K + w, 0.0) - 2.0 * np.maximum(s - K, 0.0) + np.maximum(s - K - w, 0.0))
        if k == "identity":
            return s.copy()
        if k == "constant":
            return np.full_like(s, self.level)
        pts = np.asarray(self.points, dtype=float)
        xs, fs = pts[:, 0], pts[:, 1]
        out = np.interp(s, xs, fs)
        lo_slope = (fs[1] - fs[0]) / (xs[1] - xs[0])
        hi_slope = (fs[-1] - fs[-2]) / (xs[-1] - xs[-2])
        out = np.where(s < xs[0], fs[0] + lo_slope * (s - xs[0]), out)
        return np.where(s > xs[-1], fs[-1] + hi_slope * (s - xs[-1]), out)

    def linear_pieces(self) -> tuple[float, float, list]:
        """``(a, b, [(c_k, jump_k)])`` with ``f(x) = a + b x + sum_k jump_k (x - c_k)^+``."""
        k = self.kind
        if k == "call":
            return 0.0, 0.0, [(self.strike, 1.0)]
        if k == "put":
            return self.strike, -1.0, [(self.strike, 1.0)]
        if k == "butterfly":
            K, w = self.strike, self.width
            return 0.0, 0.0, [(K - w, 1.0), (K, -2.0), (K + w, 1.0)]
        if k == "identity":
            return 0.0, 1.0, []
        if k == "constant":
            return self.level, 0.0, []
        pts = np.asarray(self.points, dtype=float)
        xs, fs = pts[:, 0], pts[:, 1]
        slopes = np.diff(fs) / np.diff(xs)
        kinks = [(float(xs[i]), float(slopes[i] - slopes[i - 1])) for i in range(1, slopes.size)]
        return float(fs[0] - slopes[0] * xs[0]), float(slopes[0]), kinks

    def growth_bound(self) -> tuple[float, float]:
        """Constants ``(c, p)`` with ``|f(x)| <= c (1 + |x|^p)``."""
        c, p = self.growth
        if c is not None:
            return float(c), float(p)
        if self.kind == "constant":
            return abs(self.level), 0.0
        if self.kind == "butterfly":
            return self.width, 0.0
        if self.kind in ("call", "put", "identity"):
            return 1.0 + abs(self.strike), 1.0
        pts = np.asarray(self.points, dtype=float)
        slopes = np.abs(np.diff(pts[:, 1]) / np.diff(pts[:, 0]))
        return float(np.abs(pts[:, 1]).max() + slopes.max() * (np.abs(pts[:, 0]).max() + 1)), 1.0


@dataclass(frozen=True)
class MarketSpec:
    agents: tuple
    payoff: PayoffSpec
    T: float
    x0: tuple
    s0: float = 1.0
    k: float = 0.0

    def __post_init__(self):
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if not agents:
            raise ModelError("a market needs at least one agent")
        ids = [a.id for a in agents]
        if ids != list(range(1, len(agents) + 1)):
            raise ModelError(f"agent ids must be 1..n in order, got {ids}")
        dims = {a.dim for a in agents}
        if len(dims) != 1:
            raise ModelError("all agents must share the state dimension")
        if len(self.x0) != self.dim:
            raise ModelError(f"x0 has dimension {len(self.x0)}, agents have {self.dim}")
        if not self.T > 0:
            raise ModelError("horizon T must be positive")
        if self.s0 < 0 or self.k < 0:
            raise ModelError("supply s0 and short bound k must be nonnegative")
        if not self.s0 + self.k > 0:
            raise ModelError("need s0 + k > 0")
        if not 0 <= self.payoff.coordinate < self.dim:
            raise ModelError("payoff coordinate out of range")

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.agents[0].dim

    def with_constraints(self, s0: float, k: float) -> "MarketSpec":
        return MarketSpec(self.agents, self.payoff, self.T, self.x0, s0, k)
