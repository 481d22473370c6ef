"""Flat-file output: JSON reports, CSV tables and a binary surface format.

CSV floats use 17 significant digits; JSON floats use Python's shortest
round-trip representation. Both read back to the identical ``float``.

Binary surface layout (little-endian)::

    magic        8 bytes   b"HBSURF01"
    d, n, M      3 x uint32
    scheme       uint32    0 explicit, 1 implicit
    kind         uint32    0 equilibrium, 1 fundamental
    T            float64
    residual     float64   residual tolerance
    scheme_tol   float64   NaN when not estimated
    per axis     float64 lo, float64 hi, uint32 nodes, uint32 pad
    agent ids    n x uint32
    values       float64[(M+1) * N]
    maximizers   uint32[(M+1) * N]
    drift        float64[n * M * N]

``N`` is the product of the per-axis node counts; arrays are C-ordered with
shapes ``(M+1, *nodes)``, ``(M+1, *nodes)`` and ``(n, M, *nodes)``.
"""

from __future__ import annotations

import json
import math
import os
import struct

import numpy as np

from .pde import Grid, ValueSurface, members

MAGIC = b"HBSURF01"
CSV_ROW_LIMIT = 500_000
_SCHEMES = ("explicit", "implicit")
_KINDS = ("equilibrium", "fundamental")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps_json(obj))


def _fmt(v) -> str:
    return "%.17g" % v


def mask_label(mask: int, n: int) -> str:
    return "|".join(str(i) for i in members(int(mask), n))


def layer_stride(grid: Grid, limit: int = CSV_ROW_LIMIT) -> int:
    """Layer step so that a per-node CSV stays under ``limit`` rows (first and last layer always kept)."""
    per = grid.size
    total = per * (grid.steps + 1)
    return max(1, math.ceil(total / limit))


def selected_layers(grid: Grid, stride: int) -> list:
    layers = list(range(0, grid.steps + 1, stride))
    if layers[-1] != grid.steps:
        layers.append(grid.steps)
    return layers


def write_surface_csv(path, surface: ValueSurface, stride: int | None = None):
    """Rows ``t, x_1..x_d, v, maximizers, mu_1..mu_n`` (drift blank at maturity)."""
    g = surface.grid
    n = surface.n
    stride = layer_stride(g) if stride is None else stride
    pts = g.points().reshape(-1, g.dim)
    labels = {}
    header = ["t"] + [f"x{j + 1}" for j in range(g.dim)] + ["v", "maximizers"] + [
        f"mu_{a}" for a in surface.agent_ids
    ]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for m in selected_layers(g, stride):
            t = _fmt(g.times[m])
            v = surface.values[m].reshape(-1)
            mk = surface.maximizers[m].reshape(-1)
            if m < g.steps:
                mu = surface.drift[:, m].reshape(n, -1).T
            else:
                mu = None
            lines = []
            for j in range(v.size):
                key = int(mk[j])
                if key not in labels:
                    labels[key] = mask_label(key, n)
                cols = [t] + [_fmt(c) for c in pts[j]] + [_fmt(v[j]), labels[key]]
                cols += [_fmt(c) for c in mu[j]] if mu is not None else [""] * n
                lines.append(",".join(cols))
            fh.write("\n".join(lines) + "\n")


def write_strategies_csv(path, profile, stride: int | None = None):
    """Rows ``t, x_1..x_d, h_1..h_n``."""
    g = profile.grid
    n = profile.holdings.shape[0]
    stride = layer_stride(g) if stride is None else stride
    pts = g.points().reshape(-1, g.dim)
    header = ["t"] + [f"x{j + 1}" for j in range(g.dim)] + [f"h_{a.id}" for a in profile.market.agents]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for m in selected_layers(g, stride):
            t = _fmt(g.times[m])
            h = profile.holdings[:, m].reshape(n, -1).T
            lines = [",".join([t] + [_fmt(c) for c in pts[j]] + [_fmt(c) for c in h[j]]) for j in range(len(pts))]
            fh.write("\n".join(lines) + "\n")


def write_rows_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(c if isinstance(c, str) else _fmt(c) if isinstance(c, float) else str(c)
                              for c in row) + "\n")


def write_surface_binary(path, surface: ValueSurface):
    g = surface.grid
    n = surface.n
    tol = surface.scheme_tolerance if surface.scheme_tolerance is not None else float("nan")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", g.dim, n, g.steps, _SCHEMES.index(surface.scheme), _KINDS.index(surface.kind)))
        fh.write(struct.pack("<3d", g.T, surface.residual_tolerance, tol))
        for (lo, hi), nodes in zip(g.bounds, g.nodes):
            fh.write(struct.pack("<2d2I", lo, hi, nodes, 0))
        fh.write(np.asarray(surface.agent_ids, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(surface.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(surface.maximizers, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(surface.drift, dtype="<f8").tobytes())


def read_surface_binary(path) -> ValueSurface:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{os.fspath(path)}: not a surface file")
    off = 8
    d, n, M, scheme, kind = struct.unpack_from("<5I", data, off)
    off += 20
    T, resid, tol = struct.unpack_from("<3d", data, off)
    off += 24
    bounds, nodes = [], []
    for _ in range(d):
        lo, hi, nn, _pad = struct.unpack_from("<2d2I", data, off)
        off += 24
        bounds.append((lo, hi))
        nodes.append(nn)
    grid = Grid(tuple(bounds), tuple(nodes), M, T)

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(arr.dtype.newbyteorder("="))

    ids = take("<u4", n, (n,))
    N = grid.size
    values = take("<f8", (M + 1) * N, (M + 1,) + grid.shape)
    masks = take("<u4", (M + 1) * N, (M + 1,) + grid.shape)
    drift = take("<f8", n * M * N, (n, M) + grid.shape)
    if off != len(data):
        raise ValueError(f"{os.fspath(path)}: {len(data) - off} trailing bytes")
    return ValueSurface(
        grid=grid,
        values=values,
        maximizers=masks,
        drift=drift,
        agent_ids=tuple(int(i) for i in ids),
        scheme=_SCHEMES[scheme],
        kind=_KINDS[kind],
        residual_tolerance=resid,
        scheme_tolerance=None if math.isnan(tol) else tol,
    )
