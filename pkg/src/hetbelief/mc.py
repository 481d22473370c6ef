"""Monte Carlo simulation of the controlled SDE and a trinomial lattice oracle.

Normals come from a counter-based generator: the draw for (path p, step m,
component j) depends only on ``(seed, m, p, j)``. Paths can therefore be split
into chunks and run on several threads without changing a single bit.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .models import AgentModel, PayoffSpec
from .pde import ValueSurface, interpolate_layer, lowest_member

_MASK64 = (1 << 64) - 1
_TWO53 = 2.0 ** -53


class SimulationError(ValueError):
    pass


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    paths: int
    steps: int
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.paths < 1 or self.steps < 1:
            raise ValueError("need paths >= 1 and steps >= 1")
        if self.antithetic and self.paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")


def normals(seed: int, step: int, start: int, count: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(count, dim)`` for paths ``start .. start+count-1``.

    Philox4x64 keyed by ``(seed, step)``; the uniform for flat index
    ``path * dim + j`` sits at counter position ``(path * dim + j) // 4``.
    """
    first = start * dim
    block, offset = divmod(first, 4)
    bitgen = np.random.Philox(
        counter=np.array([block, 0, 0, 0], dtype=np.uint64),
        key=np.array([seed & _MASK64, step], dtype=np.uint64),
    )
    raw = bitgen.random_raw(offset + count * dim)[offset:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO53
    return ndtri(u).reshape(count, dim)


def _path_normals(cfg: SimConfig, step: int, start: int, count: int, dim: int) -> np.ndarray:
    if not cfg.antithetic:
        return normals(cfg.seed, step, start, count, dim)
    base_lo = start // 2
    base_hi = (start + count - 1) // 2
    z = normals(cfg.seed, step, base_lo, base_hi - base_lo + 1, dim)
    idx = np.arange(start, start + count)
    sign = np.where(idx % 2 == 0, 1.0, -1.0)[:, None]
    return z[idx // 2 - base_lo] * sign


@dataclass(frozen=True)
class ControlSelector:
    """Chooses which agent's coefficients drive each path on ``[t_m, t_{m+1})``.

    Either a fixed agent, or feedback from a surface's maximizer field using
    the nearest node and the smallest maximizing index.
    """

    agent: int | None = None
    surface: ValueSurface | None = None

    @classmethod
    def fixed(cls, agent: int) -> "ControlSelector":
        return cls(agent=int(agent))

    @classmethod
    def feedback(cls, surface: ValueSurface) -> "ControlSelector":
        return cls(surface=surface)

    @property
    def tag(self) -> str:
        return "feedback" if self.surface is not None else f"agent{self.agent}"

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.surface is None:
            return np.full(x.shape[0], self.agent, dtype=np.int64)
        g = self.surface.grid
        layer = min(int(math.floor(t / g.dt + 1e-9)), g.steps - 1)
        masks = self.surface.maximizers[layer][g.nearest_index(x)]
        return lowest_member(masks)


@dataclass
class PathBundle:
    """Simulated paths with the induced price and holdings.

    ``x`` (paths, steps+1, d), ``z`` (paths, steps+1) and ``holdings``
    (n, paths, steps+1) are kept only when ``store_paths`` was requested;
    terminal states, per-agent P&L and trade counts are always available.
    """

    seed: int
    measure: str
    times: np.ndarray
    x_T: np.ndarray
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    holdings: np.ndarray | None = None
    pnl: np.ndarray | None = None
    trades: np.ndarray | None = None
    z0: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.x_T.shape[0]


def _z_at(surface: ValueSurface, t: float, x: np.ndarray) -> np.ndarray:
    g = surface.grid
    u = t / g.dt
    lo = min(int(math.floor(u + 1e-9)), g.steps)
    w = u - lo
    z = interpolate_layer(surface.values[lo], g, x)
    if w > 1e-9 and lo < g.steps:
        z = (1 - w) * z + w * interpolate_layer(surface.values[lo + 1], g, x)
    return z


def _check_coverage(surface: ValueSurface, T: float, dim: int):
    if abs(surface.grid.T - T) > 1e-12 * max(1.0, T):
        raise SimulationError(f"surface covers [0, {surface.grid.T}] but the simulation runs to {T}")
    if surface.grid.dim != dim:
        raise SimulationError("surface dimension does not match the agents")


def simulate(agents: Sequence[AgentModel], selector: ControlSelector, x0, T: float, cfg: SimConfig,
             surface: ValueSurface | None = None, payoff: PayoffSpec | None = None,
             profile=None, store_paths: bool | None = None, threads: int = 1) -> PathBundle:
    """Euler-Maruyama paths under the selected agents.

    With ``surface`` the price ``Z(t) = v(t, X(t))`` is tracked along each path
    (``Z(T) = f(X(T))`` when ``payoff`` is given); with ``profile`` (a
    ``StrategyProfile``) the nearest-node holdings, per-agent P&L
    ``sum H(t_m) (Z(t_{m+1}) - Z(t_m))`` and trade counts are recorded too.
    """
    agents = list(agents)
    by_id = {a.id: a for a in agents}
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    if any(a.dim != d for a in agents):
        raise SimulationError("agent dimension does not match x0")
    if selector.surface is not None:
        _check_coverage(selector.surface, T, d)
    elif selector.agent not in by_id:
        raise SimulationError(f"unknown agent {selector.agent}")
    if surface is not None:
        _check_coverage(surface, T, d)
    if profile is not None and surface is None:
        raise SimulationError("holdings need the value surface the profile was built from")
    if store_paths is None:
        store_paths = cfg.paths * (cfg.steps + 1) <= 2_000_000
    threads = max(1, int(threads))
    bounds = np.linspace(0, cfg.paths, min(threads, cfg.paths) + 1).astype(int)
    if cfg.antithetic:
        bounds = bounds - bounds % 2
        bounds[-1] = cfg.paths
    chunks = [(int(a), int(b - a)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def run(chunk):
        return _simulate_chunk(agents, by_id, selector, x0, T, cfg, surface, payoff, profile,
                               store_paths, *chunk)

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))

    def cat(key, axis=0):
        vals = [p[key] for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=axis)

    times = np.linspace(0.0, T, cfg.steps + 1)
    return PathBundle(
        seed=cfg.seed,
        measure=selector.tag,
        times=times,
        x_T=cat("x_T"),
        x=cat("x"),
        z=cat("z"),
        holdings=cat("h", axis=1),
        pnl=cat("pnl", axis=1),
        trades=cat("trades", axis=1),
        z0=None if surface is None else float(surface.value_at(x0)),
    )


def _simulate_chunk(agents, by_id, selector, x0, T, cfg, surface, payoff, profile, store, start, count):
    d = x0.size
    steps = cfg.steps
    dt = T / steps
    sq = math.sqrt(dt)
    noise_dim = max(a.coefficients.noise_dim for a in agents)
    X = np.tile(x0, (count, 1))
    xs = np.empty((count, steps + 1, d)) if store else None
    if store:
        xs[:, 0] = X
    track_z = surface is not None
    zs = np.empty((count, steps + 1)) if (track_z and store) else None
    n = len(agents)
    hs = np.empty((n, count, steps + 1)) if (profile is not None and store) else None
    pnl = np.zeros((n, count)) if profile is not None else None
    trades = np.zeros((n, count), dtype=np.int64) if profile is not None else None
    z_prev = _z_at(surface, 0.0, X) if track_z else None
    if zs is not None:
        zs[:, 0] = z_prev
    h_prev = profile.holdings_at(0, X) if profile is not None else None
    if hs is not None:
        hs[:, :, 0] = h_prev
    for m in range(steps):
        t = m * dt
        theta = selector(t, X)
        xi = _path_normals(cfg, m, start, count, noise_dim)
        dX = np.zeros_like(X)
        for aid in np.unique(theta):
            rows = theta == aid
            c = by_id[int(aid)].coefficients
            Xa = X[rows]
            b = c.drift(t, Xa)
            sig = c.diffusion(t, Xa)
            inc = b * dt
            for j in range(sig.shape[-1]):
                inc = inc + sig[:, :, j] * (sq * xi[rows, j])[:, None]
            dX[rows] = inc
        X = X + dX
        if store:
            xs[:, m + 1] = X
        if track_z:
            if m + 1 == steps and payoff is not None:
                z_new = payoff(X)
            else:
                z_new = _z_at(surface, (m + 1) * dt, X)
            if zs is not None:
                zs[:, m + 1] = z_new
            if profile is not None:
                pnl += h_prev * (z_new - z_prev)
                h_new = profile.holdings_at((m + 1) * dt, X)
                if m + 1 < steps:
                    trades += h_new != h_prev
                if hs is not None:
                    hs[:, :, m + 1] = h_new
                h_prev = h_new
            z_prev = z_new
    return {"x_T": X, "x": xs, "z": zs, "h": hs, "pnl": pnl, "trades": trades}


def estimate_value(bundle: PathBundle, payoff: PayoffSpec) -> tuple[float, float]:
    """Sample mean and standard error of ``f(X(T))``."""
    vals = payoff(bundle.x_T)
    return mean_se(vals)


def mean_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return float(samples.mean()), 0.0
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(samples.size))


def joint_se(*ses: float) -> float:
    """Standard error of a difference of independent estimates."""
    return float(math.sqrt(sum(s * s for s in ses)))


# ---------------------------------------------------------------------------
# lattice oracle
# ---------------------------------------------------------------------------


def default_increments(agents: Sequence[AgentModel], x0, T: float, steps: int) -> np.ndarray:
    """Per-axis state increment ``sqrt(2 a_max dt)`` (branch probabilities 1/4, 1/2, 1/4).

    ``a_max`` is the largest diagonal diffusion entry over the lattice nodes;
    two passes, since the lattice span depends on the increment.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dt = T / steps
    d = x0.size
    h = np.zeros(d)
    for _ in range(2):
        offs = np.arange(-steps, steps + 1)
        mesh = np.meshgrid(*([offs] * d), indexing="ij")
        pts = x0 + np.stack([g * hj for g, hj in zip(mesh, h)], axis=-1).reshape(-1, d)
        amax = np.zeros(d)
        for a in agents:
            for t in np.linspace(0, T, 3):
                diag = np.diagonal(a.coefficients.diffusion_product(t, pts), axis1=-2, axis2=-1)
                amax = np.maximum(amax, diag.max(axis=0))
        h = np.sqrt(2.0 * np.maximum(amax, 1e-300) * dt)
    return h


def lattice_oracle(agents: Sequence[AgentModel], payoff: PayoffSpec, x0, T: float, steps: int,
                   increments=None) -> float:
    """Root value of backward dynamic programming on a recombining trinomial lattice.

    Each agent's branch probabilities match the first two moments of the
    one-step increment; every node takes the largest one-step expectation
    over agents. Diffusions must be diagonal (independent axes).
    """
    if steps < 1 or steps > 12:
        raise LatticeError("the lattice oracle is meant for 1..12 steps")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    h = default_increments(agents, x0, T, steps) if increments is None else np.broadcast_to(
        np.asarray(increments, dtype=float), (d,))
    dt = T / steps

    def nodes(level):
        offs = np.arange(-level, level + 1)
        mesh = np.meshgrid(*([offs] * d), indexing="ij")
        return x0 + np.stack([g * hj for g, hj in zip(mesh, h)], axis=-1)

    V = payoff(nodes(steps))
    shifts = list(itertools.product((-1, 0, 1), repeat=d))
    for m in range(steps - 1, -1, -1):
        pts = nodes(m)
        t = m * dt
        best = None
        for a in agents:
            b = a.coefficients.drift(t, pts)
            A = a.coefficients.diffusion_product(t, pts)
            if d == 2 and np.any(A[..., 0, 1] != 0):
                raise LatticeError("lattice oracle needs independent state axes")
            probs = []
            for j in range(d):
                mu = b[..., j] * dt / h[j]
                q = (A[..., j, j] * dt + (b[..., j] * dt) ** 2) / h[j] ** 2
                pu, pd = 0.5 * (q + mu), 0.5 * (q - mu)
                pm = 1.0 - q
                for p in (pu, pm, pd):
                    if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
                        raise LatticeError(
                            f"agent {a.id}: branch probabilities leave [0, 1]; increase the state increment"
                        )
                probs.append({1: pu, 0: pm, -1: pd})
            cont = np.zeros(pts.shape[:-1])
            for sh in shifts:
                w = np.ones(pts.shape[:-1])
                sl = []
                for j, s in enumerate(sh):
                    w = w * probs[j][s]
                    sl.append(slice(1 + s, V.shape[j] - 1 + s))
                cont = cont + w * V[tuple(sl)]
            best = cont if best is None else np.maximum(best, cont)
        V = best
    return float(V.reshape(-1)[0])
