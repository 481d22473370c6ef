"""Finite-difference solvers for the linear and the sup-over-agents pricing PDE.

Both solvers march backward from the payoff on a tensor grid (d <= 2). Each
agent contributes a sparse discrete generator ``L_i`` (drift plus half the
trace of ``sigma sigma^T`` times the Hessian); the equilibrium step uses the
nodewise maximum of ``L_i v`` over agents.

Stencils: central differences in the interior (upwinded at nodes where the
cell Peclet number exceeds one, to keep the scheme monotone), zero second
derivative and inward one-sided drift on boundary nodes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import bicgstab, spsolve

from .models import AgentModel, MeanRevertingVolField, PayoffSpec

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
TIE_REL = 1e-9
POLICY_TOL = 1e-10
DEFAULT_WIDTH = 6.0


class SchemeError(RuntimeError):
    """Numerical failure of a finite-difference solve."""


class CFLError(SchemeError):
    def __init__(self, required_steps: int, steps: int):
        self.required_steps = required_steps
        super().__init__(
            f"explicit scheme is not monotone with M={steps} time steps; "
            f"use M >= {required_steps} or the implicit scheme"
        )


class PolicyIterationError(SchemeError):
    pass


class LinearSolveError(SchemeError):
    pass


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    bounds: tuple
    nodes: tuple
    steps: int
    T: float

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        n = tuple(int(v) for v in self.nodes)
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "nodes", n)
        if len(b) != len(n) or not 1 <= len(b) <= 2:
            raise ValueError("grid needs one (lo, hi) pair and one node count per axis, d <= 2")
        if any(lo >= hi for lo, hi in b):
            raise ValueError("grid bounds need lo < hi")
        if any(v < 3 for v in n):
            raise ValueError("grid needs at least 3 nodes per axis")
        if self.steps < 1:
            raise ValueError("grid needs at least one time step")
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.nodes))

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.nodes)]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def points(self) -> np.ndarray:
        """All nodes as an array of shape ``(*shape, d)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def contains(self, x) -> bool:
        return all(lo < xi < hi for (lo, hi), xi in zip(self.bounds, x))

    def nearest_index(self, x: np.ndarray) -> tuple:
        """Nearest-node multi-index for states of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        out = []
        for j, ((lo, _), h, n) in enumerate(zip(self.bounds, self.spacing, self.nodes)):
            out.append(np.clip(np.rint((x[..., j] - lo) / h), 0, n - 1).astype(np.intp))
        return tuple(out)

    def coarsened(self) -> "Grid":
        """Grid with half the intervals per axis and half the time steps."""
        nodes = tuple((n - 1) // 2 + 1 for n in self.nodes)
        return Grid(self.bounds, tuple(max(n, 3) for n in nodes), max(1, self.steps // 2), self.T)

    def refined(self) -> "Grid":
        return Grid(self.bounds, tuple(2 * (n - 1) + 1 for n in self.nodes), 2 * self.steps, self.T)


def auto_grid(agents: Sequence[AgentModel], x0, T: float, nodes, steps: int,
              width: float = DEFAULT_WIDTH) -> Grid:
    """Truncate each axis at ``width`` standard deviations around the start.

    Ordinary axes use ``x0 +- width * sigma_max * sqrt(T)``; the volatility
    factor of mean-reverting models uses ``ybar +- width * beta_max / sqrt(2 lam_min)``.
    Mean-reverting axes are fixed first so that ``sigma_max`` on the other axes
    is measured over the resulting box.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    nodes = tuple(np.broadcast_to(np.asarray(nodes, dtype=int), (d,)))
    bounds: list = [None] * d
    mr = [a.coefficients for a in agents if isinstance(a.coefficients, MeanRevertingVolField)]
    if mr:
        lam_min = min(c.lam for c in mr)
        ybar = mr[0].ybar
        probe = np.linspace(ybar - 50, ybar + 50, 2001)
        beta_max = max(float(c.beta(probe).max()) for c in mr)
        half = width * beta_max / math.sqrt(2.0 * lam_min)
        half = max(half, abs(x0[1] - ybar) + 1e-3 * (1 + abs(ybar)))
        bounds[1] = (ybar - half, ybar + half)
    # sample the coefficient field over the box fixed so far
    sample_axes = []
    for j in range(d):
        if bounds[j] is None:
            sample_axes.append(np.array([x0[j]]))
        else:
            sample_axes.append(np.linspace(*bounds[j], 41))
    mesh = np.stack(np.meshgrid(*sample_axes, indexing="ij"), axis=-1).reshape(-1, d)
    for j in range(d):
        if bounds[j] is not None:
            continue
        sig_max = 0.0
        for a in agents:
            for t in np.linspace(0.0, T, 5):
                diag = a.coefficients.diffusion_product(t, mesh)[..., j, j]
                sig_max = max(sig_max, float(np.sqrt(diag.max())))
        half = width * sig_max * math.sqrt(T)
        if half <= 0:
            half = 1.0
        bounds[j] = (x0[j] - half, x0[j] + half)
    return Grid(tuple(bounds), nodes, steps, T)


# ---------------------------------------------------------------------------
# discrete generators
# ---------------------------------------------------------------------------


def _coefficients_on_grid(agent: AgentModel, grid: Grid, t: float):
    pts = grid.points().reshape(-1, grid.dim)
    c = agent.coefficients
    return c.drift(t, pts), c.diffusion_product(t, pts)


def generator_matrix(agent: AgentModel, grid: Grid, t: float) -> sp.csr_matrix:
    """Sparse discrete generator of ``agent`` at time ``t`` on flattened C-order nodes."""
    d = grid.dim
    shape = grid.shape
    N = grid.size
    b, a = _coefficients_on_grid(agent, grid, t)
    multi = np.unravel_index(np.arange(N), shape)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    strides = [int(np.prod(shape[j + 1:])) for j in range(d)]
    interior_axis = []
    for j in range(d):
        h = grid.spacing[j]
        i_j = multi[j]
        s = strides[j]
        ajj = a[:, j, j]
        bj = b[:, j]
        inner = (i_j > 0) & (i_j < shape[j] - 1)
        interior_axis.append(inner)
        r = np.nonzero(inner)[0]
        central = np.abs(bj[r]) * h <= ajj[r]
        diff = 0.5 * ajj[r] / h**2
        # central drift
        up = diff + np.where(central, 0.5 * bj[r] / h, np.maximum(bj[r], 0.0) / h)
        dn = diff + np.where(central, -0.5 * bj[r] / h, np.maximum(-bj[r], 0.0) / h)
        add(r, r + s, up)
        add(r, r - s, dn)
        add(r, r, -(up + dn))
        # boundary nodes: inward drift only, one-sided
        lo = np.nonzero(i_j == 0)[0]
        w = np.maximum(bj[lo], 0.0) / h
        add(lo, lo + s, w)
        add(lo, lo, -w)
        hi = np.nonzero(i_j == shape[j] - 1)[0]
        w = np.maximum(-bj[hi], 0.0) / h
        add(hi, hi - s, w)
        add(hi, hi, -w)
    if d == 2:
        both = np.nonzero(interior_axis[0] & interior_axis[1])[0]
        a01 = a[both, 0, 1]
        if np.any(a01 != 0):
            hx, hy = grid.spacing
            c = a01 / (4.0 * hx * hy)
            s0, s1 = strides
            add(both, both + s0 + s1, c)
            add(both, both - s0 - s1, c)
            add(both, both + s0 - s1, -c)
            add(both, both - s0 + s1, -c)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )


class _Generators:
    """Per-agent generator matrices on one shared sparsity pattern.

    Sharing the pattern makes the policy matrix ``L_theta`` (row ``r`` taken
    from agent ``theta[r]``) a gather over the stacked data arrays. Matrices of
    time-homogeneous models are built once.
    """

    def __init__(self, agents: Sequence[AgentModel], grid: Grid):
        self.agents = list(agents)
        self.grid = grid
        self.homogeneous = all(a.coefficients.time_homogeneous for a in self.agents)
        self._key = None
        self._mats = None

    def at(self, t: float) -> list:
        key = None if self.homogeneous else float(t)
        if self._mats is None or key != self._key:
            mats = [generator_matrix(a, self.grid, t) for a in self.agents]
            pattern = abs(mats[0])
            for L in mats[1:]:
                pattern = pattern + abs(L)
            pattern = pattern.tocsr()
            pattern.sort_indices()
            rows = np.repeat(np.arange(pattern.shape[0]), np.diff(pattern.indptr))
            cols = pattern.indices
            aligned = []
            for L in mats:
                data = np.asarray(L[rows, cols]).ravel()
                aligned.append(sp.csr_matrix((data, pattern.indices, pattern.indptr), shape=L.shape))
            self._stack = np.stack([L.data for L in aligned])
            self._rows = rows
            self._pattern = pattern
            self._mats = [(L, abs(L)) for L in aligned]
            self._key = key
        return self._mats

    def policy_matrix(self, theta: np.ndarray) -> sp.csr_matrix:
        data = self._stack[theta[self._rows], np.arange(self._rows.size)]
        p = self._pattern
        return sp.csr_matrix((data, p.indices, p.indptr), shape=p.shape)


DIRECT_LIMIT = 5000
ITER_RTOL = 1e-13


def _linear_solve(A: sp.csr_matrix, rhs: np.ndarray, guess: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve ``A x = rhs``; returns ``x`` and an a-priori bound on ``max|A x - rhs|``."""
    if A.shape[0] <= DIRECT_LIMIT:
        return spsolve(A.tocsc(), rhs), 0.0
    x, info = bicgstab(A, rhs, x0=guess, rtol=ITER_RTOL, atol=0.0, maxiter=2000)
    if info != 0:
        logger.info("bicgstab did not converge (info=%s); falling back to a direct solve", info)
        return spsolve(A.tocsc(), rhs), 0.0
    return x, ITER_RTOL * float(np.linalg.norm(rhs))


def _tie_mask(G: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Bitmask (bit i-1 for agent i) of generators within tie tolerance of the max.

    The tolerance is relative to the generator magnitude at the node, floored
    by the rounding error of ``L v`` (``scale`` is ``|L| |v|``).
    """
    gmax = G.max(axis=0)
    tol = TIE_REL * (1.0 + np.abs(G).max(axis=0)) + 16.0 * EPS * scale
    within = G >= (gmax - tol)
    mask = np.zeros(G.shape[1], dtype=np.uint32)
    for i in range(G.shape[0]):
        mask |= within[i].astype(np.uint32) << np.uint32(i)
    return mask


def _generator_values(mats: list, v: np.ndarray):
    G = np.stack([L @ v for L, _ in mats])
    absv = np.abs(v)
    scale = np.max(np.stack([A @ absv for _, A in mats]), axis=0)
    return G, scale


# ---------------------------------------------------------------------------
# value surfaces
# ---------------------------------------------------------------------------


@dataclass
class ValueSurface:
    """Solved values on every time layer with maximizer and drift fields.

    ``values`` has shape ``(M+1, *grid.shape)``. ``maximizers`` stores per node
    a bitmask with bit ``i-1`` set when agent ``i`` attains the nodewise maximum
    of the generator; layer ``m < M`` refers to the step from ``t_m`` to
    ``t_{m+1}``. ``drift`` has shape ``(n, M, *grid.shape)``.
    """

    grid: Grid
    values: np.ndarray
    maximizers: np.ndarray
    drift: np.ndarray
    agent_ids: tuple
    scheme: str
    kind: str
    residual_tolerance: float
    scheme_tolerance: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.agent_ids)

    def interior(self) -> np.ndarray:
        """Boolean mask of spatially interior nodes."""
        mask = np.ones(self.grid.shape, dtype=bool)
        for j in range(self.grid.dim):
            sl = [slice(None)] * self.grid.dim
            sl[j] = 0
            mask[tuple(sl)] = False
            sl[j] = -1
            mask[tuple(sl)] = False
        return mask

    def value_at(self, x, layer: int = 0) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(interpolate_layer(self.values[layer], self.grid, x[None, :])[0])

    def gradient(self, layer: int) -> np.ndarray:
        """Central differences inside, one-sided second order on the boundary; shape ``(d, *shape)``."""
        g = np.gradient(self.values[layer], *self.grid.spacing, edge_order=2)
        if self.grid.dim == 1:
            g = [g]
        return np.stack(g)

    def hessian(self, layer: int) -> np.ndarray:
        """Second derivatives, shape ``(d, d, *shape)``; pure terms vanish on boundary nodes."""
        v = self.values[layer]
        d = self.grid.dim
        H = np.zeros((d, d) + v.shape)
        for j, h in enumerate(self.grid.spacing):
            sl_c = [slice(None)] * d
            sl_p = [slice(None)] * d
            sl_m = [slice(None)] * d
            sl_c[j] = slice(1, -1)
            sl_p[j] = slice(2, None)
            sl_m[j] = slice(None, -2)
            H[j, j][tuple(sl_c)] = (v[tuple(sl_p)] - 2 * v[tuple(sl_c)] + v[tuple(sl_m)]) / h**2
        if d == 2:
            g0 = np.gradient(v, self.grid.spacing[0], axis=0)
            cross = np.gradient(g0, self.grid.spacing[1], axis=1)
            H[0, 1] = H[1, 0] = cross
        return H

    def maximizer_sets(self, layer: int) -> np.ndarray:
        return self.maximizers[layer]

    def replace(self, **kw) -> "ValueSurface":
        data = dict(self.__dict__)
        data.update(kw)
        return ValueSurface(**data)


def members(mask, n: int) -> list:
    """Agent ids encoded in a single bitmask."""
    mask = int(mask)
    return [i + 1 for i in range(n) if mask >> i & 1]


def popcount(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.uint32)
    out = np.zeros(mask.shape, dtype=np.int64)
    for i in range(n):
        out += (mask >> np.uint32(i)) & np.uint32(1)
    return out


def lowest_member(mask: np.ndarray) -> np.ndarray:
    """Smallest agent id in each bitmask (1-based)."""
    mask = np.asarray(mask, dtype=np.uint32).astype(np.int64)
    low = mask & -mask
    return np.log2(np.maximum(low, 1)).astype(np.int64) + 1


def interpolate_layer(layer: np.ndarray, grid: Grid, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of one layer at states ``x`` of shape ``(p, d)``, clamped to the box."""
    x = np.asarray(x, dtype=float)
    idx = []
    wts = []
    for j, ((lo, hi), h, n) in enumerate(zip(grid.bounds, grid.spacing, grid.nodes)):
        u = (np.clip(x[:, j], lo, hi) - lo) / h
        i0 = np.clip(np.floor(u).astype(np.intp), 0, n - 2)
        idx.append(i0)
        wts.append(u - i0)
    if grid.dim == 1:
        i, w = idx[0], wts[0]
        return (1 - w) * layer[i] + w * layer[i + 1]
    (i, j), (wi, wj) = idx, wts
    return ((1 - wi) * (1 - wj) * layer[i, j] + wi * (1 - wj) * layer[i + 1, j]
            + (1 - wi) * wj * layer[i, j + 1] + wi * wj * layer[i + 1, j + 1])


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _check_inputs(agents, payoff, grid):
    if not agents:
        raise ValueError("need at least one agent")
    if any(a.dim != grid.dim for a in agents):
        raise ValueError("agent state dimension does not match the grid")
    if not 0 <= payoff.coordinate < grid.dim:
        raise ValueError("payoff coordinate out of range")


def _explicit_bound(gens: _Generators, grid: Grid) -> int:
    rate = 0.0
    for t in (grid.times if any(not a.coefficients.time_homogeneous for a in gens.agents) else [0.0]):
        for L, _ in gens.at(t):
            rate = max(rate, float(-L.diagonal().min()))
    return max(1, math.ceil(grid.T * rate * (1 + 1e-12)))


def _solve(agents: Sequence[AgentModel], payoff: PayoffSpec, grid: Grid, scheme: str,
           max_policy_iter: int, kind: str) -> ValueSurface:
    _check_inputs(agents, payoff, grid)
    if scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    n = len(agents)
    M = grid.steps
    N = grid.size
    dt = grid.dt
    times = grid.times
    gens = _Generators(agents, grid)
    if scheme == "explicit":
        required = _explicit_bound(gens, grid)
        if required > M:
            raise CFLError(required, M)

    values = np.empty((M + 1, N))
    masks = np.empty((M + 1, N), dtype=np.uint32)
    drift = np.empty((n, M, N))
    values[M] = payoff(grid.points().reshape(N, grid.dim))
    mats_T = gens.at(times[M])
    G, scale = _generator_values(mats_T, values[M])
    masks[M] = _tie_mask(G, scale)
    norm_L = 0.0
    slack = 0.0
    eye = sp.identity(N, format="csr")
    for m in range(M - 1, -1, -1):
        nxt = values[m + 1]
        if scheme == "explicit":
            mats = gens.at(times[m + 1])
            G, scale = _generator_values(mats, nxt)
            cur = nxt + dt * G.max(axis=0)
        else:
            mats = gens.at(times[m])
            theta = np.argmax(np.stack([L @ nxt for L, _ in mats]), axis=0)
            prev = nxt
            for _ in range(max_policy_iter):
                # increment form: (I - dt L) delta = dt L nxt keeps v exact where L nxt == 0
                L_theta = gens.policy_matrix(theta)
                delta, solve_err = _linear_solve(eye - dt * L_theta, dt * (L_theta @ nxt), prev - nxt)
                cur = nxt + delta
                G, scale = _generator_values(mats, cur)
                new_theta = np.argmax(G, axis=0)
                if n == 1 or np.array_equal(new_theta, theta):
                    break
                if float(np.max(np.abs(cur - prev))) < POLICY_TOL:
                    # maximizers flickering at rounding level: record the policy gap
                    used = G[theta, np.arange(N)]
                    slack = max(slack, float(np.max(G.max(axis=0) - used)))
                    break
                theta, prev = new_theta, cur
            else:
                raise PolicyIterationError(
                    f"policy iteration did not settle within {max_policy_iter} iterations at layer {m}"
                )
            slack = max(slack, solve_err / dt)
            if not np.all(np.isfinite(cur)):
                raise LinearSolveError(f"linear solve produced non-finite values at layer {m}")
        values[m] = cur
        masks[m] = _tie_mask(G, scale)
        drift[:, m] = (nxt - cur) / dt + G
        if norm_L == 0.0 or not gens.homogeneous:
            norm_L = max(norm_L, max(float(A_.sum(axis=1).max()) for _, A_ in mats))
    vmax = float(np.abs(values).max())
    residual = 64.0 * EPS * max(vmax, 1.0) * (2.0 / dt + norm_L) + slack
    shape = grid.shape
    return ValueSurface(
        grid=grid,
        values=values.reshape((M + 1,) + shape),
        maximizers=masks.reshape((M + 1,) + shape),
        drift=drift.reshape((n, M) + shape),
        agent_ids=tuple(a.id for a in agents),
        scheme=scheme,
        kind=kind,
        residual_tolerance=residual,
    )


def solve_fundamental(agent: AgentModel, payoff: PayoffSpec, grid: Grid,
                      scheme: str = "explicit") -> ValueSurface:
    """One agent's valuation ``E_i[f(X(T)) | X(t) = x]`` from the linear PDE."""
    return _solve([agent], payoff, grid, scheme, 1, "fundamental")


def solve_equilibrium(agents: Sequence[AgentModel], payoff: PayoffSpec, grid: Grid,
                      scheme: str = "explicit", max_policy_iter: int = 50) -> ValueSurface:
    """Equilibrium value surface: backward induction with the nodewise max over agent generators.

    The implicit scheme runs policy iteration per layer: freeze the maximizing
    agent per node, solve the linear system, recompute maximizers, and stop once
    they are stable or the values move by less than 1e-10.
    """
    return _solve(list(agents), payoff, grid, scheme, max_policy_iter, "equilibrium")


def _layer_generators(surface: ValueSurface, agents: Sequence[AgentModel]):
    """Yield ``(m, G, scale)`` with generators evaluated where the scheme evaluates them."""
    grid = surface.grid
    gens = _Generators(agents, grid)
    N = grid.size
    flat = surface.values.reshape(grid.steps + 1, N)
    times = grid.times
    for m in range(grid.steps + 1):
        if m == grid.steps:
            src, t = flat[m], times[m]
        elif surface.scheme == "explicit":
            src, t = flat[m + 1], times[m + 1]
        else:
            src, t = flat[m], times[m]
        G, scale = _generator_values(gens.at(t), src)
        yield m, G, scale


def argmax_field(surface: ValueSurface, agents: Sequence[AgentModel]) -> np.ndarray:
    """Per-node maximizer bitmasks of the generators of ``agents`` on ``surface``."""
    shape = surface.grid.shape
    out = np.empty((surface.grid.steps + 1,) + shape, dtype=np.uint32)
    for m, G, scale in _layer_generators(surface, agents):
        out[m] = _tie_mask(G, scale).reshape(shape)
    return out


def drift_field(surface: ValueSurface, agent: AgentModel) -> np.ndarray:
    """Drift ``mu_i = d_t v + L_i v`` of the price process under ``agent``, shape ``(M, *shape)``.

    ``d_t v`` is the difference quotient between consecutive layers.
    """
    grid = surface.grid
    M = grid.steps
    flat = surface.values.reshape(M + 1, grid.size)
    out = np.empty((M, grid.size))
    for m, G, _ in _layer_generators(surface, [agent]):
        if m < M:
            out[m] = (flat[m + 1] - flat[m]) / grid.dt + G[0]
    return out.reshape((M,) + grid.shape)


def attach_agents(surface: ValueSurface, agents: Sequence[AgentModel]) -> ValueSurface:
    """Re-evaluate maximizer and drift fields of ``surface`` against another agent set."""
    drift = np.stack([drift_field(surface, a) for a in agents])
    return surface.replace(
        maximizers=argmax_field(surface, agents),
        drift=drift,
        agent_ids=tuple(a.id for a in agents),
    )


def scheme_tolerance(agents: Sequence[AgentModel], payoff: PayoffSpec, grid: Grid, x,
                     scheme: str = "explicit", surface: ValueSurface | None = None) -> float:
    """Discretization error estimate at ``x``: gap to the solve on the coarsened grid.

    For a first-order scheme ``|v_h - v_2h|`` approximates the error of ``v_h``.
    """
    coarse = grid.coarsened()
    if surface is None:
        surface = _solve(list(agents), payoff, grid, scheme, 50, "equilibrium")
    if scheme == "explicit":
        gens = _Generators(agents, coarse)
        need = _explicit_bound(gens, coarse)
        if need > coarse.steps:
            coarse = Grid(coarse.bounds, coarse.nodes, need, coarse.T)
    other = _solve(list(agents), payoff, coarse, scheme, 50, "equilibrium")
    fine_v = surface.value_at(x)
    gap = abs(fine_v - other.value_at(x))
    return max(gap, 1e-12 * (1.0 + abs(fine_v)))
