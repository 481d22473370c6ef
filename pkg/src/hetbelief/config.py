"""JSON run configuration (``schema: 1``).

Example::

    {
      "schema": 1,
      "market": {
        "agents": [
          {"family": "constant", "sigma": 0.1},
          {"family": "constant", "sigma": 0.3}
        ],
        "payoff": {"kind": "butterfly", "strike": 1.0, "width": 0.1},
        "T": 1.0, "x0": [1.0], "s0": 1.0, "k": 0.0
      },
      "grid": {"bounds": "auto", "nodes": 401, "steps": 400, "scheme": "implicit"},
      "sim": {"paths": 20000, "steps": 100, "seed": 7},
      "verify": {"mc": true, "pnl": {"paths": 4000, "competitors": 50}, "lattice": {"steps": 10}}
    }

Agent families: ``constant`` (``drift``, ``sigma``), ``localvol`` (``times``,
``x``, ``sigma`` table, optional ``drift``, ``out_of_domain``) and
``mean_reverting`` (``alpha`` and ``beta`` as ``{intercept, slope, lo, hi}`` or
a number, ``lam``, ``ybar``). Agent ids are assigned 1..n in list order.
Payoff kinds: ``call``, ``put``, ``butterfly`` (``strike``, ``width``),
``table`` (``points``: list of ``[x, f]``), ``identity``, ``constant``
(``level``); ``coordinate`` selects the state component.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .mc import SimConfig
from .models import MarketSpec, ModelError, PayoffSpec, build_model
from .pde import Grid, auto_grid

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = []
        if path:
            where.append(path)
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass
class RunConfig:
    market: MarketSpec
    grid: Grid
    sim: SimConfig
    scheme: str = "explicit"
    verify: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _line_of(text: str, path: list) -> int | None:
    """Line of the last key of ``path`` found in ``text``, searching keys in order."""
    pos = 0
    found = None
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            break
        pos = m.end()
        found = m.start()
    return None if found is None else text.count("\n", 0, found) + 1


class _Reader:
    def __init__(self, text: str):
        self.text = text

    def fail(self, msg, path):
        raise ConfigError(msg, _line_of(self.text, path), ".".join(str(p) for p in path))

    def get(self, obj, key, path, kind=None, default=...):
        if not isinstance(obj, dict):
            self.fail("expected an object", path)
        if key not in obj:
            if default is ...:
                self.fail(f"missing required field '{key}'", path + [key])
            return default
        val = obj[key]
        if kind == "number":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(f"'{key}' must be a number", path + [key])
            return float(val)
        if kind == "int":
            if isinstance(val, bool) or not isinstance(val, int):
                self.fail(f"'{key}' must be an integer", path + [key])
            return int(val)
        return val


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from exc
    r = _Reader(text)
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", 1)
    schema = r.get(raw, "schema", [], "int")
    if schema != SCHEMA_VERSION:
        r.fail(f"unsupported schema version {schema}", ["schema"])
    overrides = overrides or {}

    mk = r.get(raw, "market", [])
    agent_specs = r.get(mk, "agents", ["market"])
    if not isinstance(agent_specs, list) or not agent_specs:
        r.fail("'agents' must be a non-empty list", ["market", "agents"])
    agents = []
    for i, spec in enumerate(agent_specs):
        path = ["market", "agents", i]
        family = r.get(spec, "family", path)
        params = {k: v for k, v in spec.items() if k not in ("family", "id")}
        if "id" in spec and spec["id"] != i + 1:
            r.fail(f"agent ids must run 1..n in order (got {spec['id']} at position {i + 1})", path + ["id"])
        try:
            agents.append(build_model(i + 1, family, **params))
        except (ModelError, KeyError, TypeError, ValueError) as exc:
            r.fail(f"agent {i + 1}: {exc}", path + ["family"])
    pay = r.get(mk, "payoff", ["market"])
    try:
        payoff = PayoffSpec(
            kind=r.get(pay, "kind", ["market", "payoff"]),
            strike=float(pay.get("strike", 0.0)),
            width=float(pay.get("width", 0.0)),
            level=float(pay.get("level", 0.0)),
            points=tuple(tuple(p) for p in pay.get("points", ())),
            coordinate=int(pay.get("coordinate", 0)),
        )
    except (ModelError, TypeError, ValueError) as exc:
        r.fail(str(exc), ["market", "payoff"])
    T = r.get(mk, "T", ["market"], "number")
    x0 = r.get(mk, "x0", ["market"])
    if isinstance(x0, (int, float)):
        x0 = [x0]
    s0 = r.get(mk, "s0", ["market"], "number", 1.0)
    k = r.get(mk, "k", ["market"], "number", 0.0)
    try:
        market = MarketSpec(tuple(agents), payoff, T, tuple(x0), s0, k)
    except ModelError as exc:
        r.fail(str(exc), ["market"])

    gr = r.get(raw, "grid", [], default={})
    nodes = r.get(gr, "nodes", ["grid"], default=201)
    steps = r.get(gr, "steps", ["grid"], "int", 200)
    scheme = overrides.get("scheme") or r.get(gr, "scheme", ["grid"], default="explicit")
    if scheme not in ("explicit", "implicit"):
        r.fail(f"unknown scheme '{scheme}'", ["grid", "scheme"])
    bounds = r.get(gr, "bounds", ["grid"], default="auto")
    try:
        if bounds == "auto":
            width = r.get(gr, "width", ["grid"], "number", 6.0)
            grid = auto_grid(market.agents, market.x0, market.T, nodes, steps, width)
        else:
            n_ax = [nodes] * market.dim if isinstance(nodes, int) else nodes
            grid = Grid(tuple(tuple(b) for b in bounds), tuple(n_ax), steps, market.T)
    except (ValueError, TypeError) as exc:
        r.fail(str(exc), ["grid"])
    if not grid.contains(market.x0):
        r.fail("x0 must lie strictly inside the grid bounds", ["grid", "bounds"])

    sm = r.get(raw, "sim", [], default={})
    seed = overrides.get("seed")
    if seed is None:
        seed = r.get(sm, "seed", ["sim"], "int", 0)
    try:
        sim = SimConfig(
            paths=r.get(sm, "paths", ["sim"], "int", 10000),
            steps=r.get(sm, "steps", ["sim"], "int", 100),
            seed=int(seed),
            antithetic=bool(sm.get("antithetic", False)),
        )
    except ValueError as exc:
        r.fail(str(exc), ["sim"])
    return RunConfig(market, grid, sim, scheme, dict(raw.get("verify", {})), dict(raw.get("output", {})), raw)


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text, overrides)
