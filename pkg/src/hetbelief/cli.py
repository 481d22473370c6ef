"""``hetbelief`` command line: validate, price, verify, simulate, heston-demo.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import export
from .config import ConfigError, RunConfig, load_config
from .equilibrium import (
    bubble_decomposition,
    extract_strategies,
    pnl_samples,
    random_strategies,
    trade_events,
    verify_supermartingale,
)
from .heston import (
    default_market,
    params_from_market,
    predicted_maximizer,
    quadrature_mc_price,
    verify_monotonicity,
)
from .mc import (
    ControlSelector,
    LatticeError,
    SimConfig,
    SimulationError,
    estimate_value,
    joint_se,
    lattice_oracle,
    mean_se,
    simulate,
)
from .models import MeanRevertingVolField, ModelError, validate_regularity
from .pde import CFLError, SchemeError, auto_grid, scheme_tolerance, solve_equilibrium

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
LATTICE_MAX_STEPS = 12


class CheckFailure(RuntimeError):
    pass


def _regularity(cfg: RunConfig) -> list:
    g = cfg.grid
    axes = [ax[:: max(1, (len(ax) - 1) // 40)] for ax in g.axes]
    times = (0.0, 0.5 * g.T, g.T)
    return [validate_regularity(a, axes, times) for a in cfg.market.agents]


def _gate(cfg: RunConfig):
    bad = [r.agent for r in _regularity(cfg) if not r.elliptic]
    if bad:
        raise CheckFailure(f"validation failed: agents {bad} are not uniformly elliptic; run `validate` for details")


def cmd_validate(cfg: RunConfig, out: Path | None = None, **_) -> int:
    reports = [r.to_dict() for r in _regularity(cfg)]
    text = export.dumps_json({"agents": reports})
    sys.stdout.write(text)
    if out is not None:
        (out / "validate.json").write_text(text)
    return EXIT_OK if all(r["elliptic"] for r in reports) else EXIT_CHECK


def _price(cfg: RunConfig):
    _gate(cfg)
    return bubble_decomposition(cfg.market, cfg.grid, cfg.scheme)


def cmd_price(cfg: RunConfig, out: Path, **_) -> int:
    rep = _price(cfg)
    export.write_json(out / "report.json", rep.to_dict())
    export.write_surface_csv(out / "surface.csv", rep.surface)
    export.write_surface_binary(out / "surface.bin", rep.surface)
    export.write_strategies_csv(out / "strategies.csv", rep.profile)
    print(f"price  {rep.price!r}")
    print(f"bubble {rep.bubble!r}  (fundamentals {', '.join(repr(f) for f in rep.fundamentals)}; "
          f"tolerance {rep.tolerance!r})")
    return EXIT_OK


def _mc_check(cfg: RunConfig, rep, threads: int) -> dict:
    mk = cfg.market
    opts = cfg.verify.get("mc", {}) if isinstance(cfg.verify.get("mc"), dict) else {}
    slack = float(opts.get("slack", 0.0))
    fb = simulate(mk.agents, ControlSelector.feedback(rep.surface), mk.x0, mk.T, cfg.sim,
                  store_paths=False, threads=threads)
    fb_mean, fb_se = estimate_value(fb, mk.payoff)
    gap = abs(fb_mean - rep.price)
    fixed = []
    ok = gap <= 3 * fb_se + slack
    for a in mk.agents:
        b = simulate(mk.agents, ControlSelector.fixed(a.id), mk.x0, mk.T, cfg.sim, store_paths=False, threads=threads)
        mean, se = estimate_value(b, mk.payoff)
        bound = fb_mean + 3 * joint_se(fb_se, se)
        fixed.append({"agent": a.id, "mean": mean, "se": se, "bound": bound, "passed": bool(mean <= bound)})
        ok = ok and mean <= bound
    return {"passed": bool(ok), "pde": rep.price, "feedback_mean": fb_mean, "feedback_se": fb_se,
            "gap": gap, "gap_in_se": gap / fb_se if fb_se > 0 else None, "slack": slack, "fixed_agents": fixed}


def _lattice_check(cfg: RunConfig, rep) -> dict:
    opts = cfg.verify["lattice"]
    steps = int(opts.get("steps", 10))
    if steps > LATTICE_MAX_STEPS:
        return {"passed": False, "error": f"lattice oracle limited to {LATTICE_MAX_STEPS} steps"}
    mk = cfg.market
    rel = float(opts.get("rel_tol", 0.02))
    eq = lattice_oracle(mk.agents, mk.payoff, mk.x0, mk.T, steps)
    funds = [lattice_oracle([a], mk.payoff, mk.x0, mk.T, steps) for a in mk.agents]
    gap = abs(eq - rep.price)
    ok = gap <= rel * max(abs(rep.price), 1e-12)
    return {"passed": bool(ok), "steps": steps, "lattice": eq, "pde": rep.price, "gap": gap, "rel_tol": rel,
            "lattice_fundamentals": funds, "lattice_bubble": eq - max(funds)}


def _pnl_check(cfg: RunConfig, rep, threads: int) -> dict:
    mk = cfg.market
    opts = cfg.verify["pnl"] if isinstance(cfg.verify.get("pnl"), dict) else {}
    count = int(opts.get("competitors", 50))
    sim = SimConfig(int(opts.get("paths", 4000)), cfg.sim.steps, cfg.sim.seed, cfg.sim.antithetic)
    comps_t = random_strategies(mk, np.linspace(0, mk.T, sim.steps + 1), count, cfg.sim.seed + 1)
    per_agent = []
    ok = True
    for idx, a in enumerate(mk.agents):
        b = simulate(mk.agents, ControlSelector.fixed(a.id), mk.x0, mk.T, sim, surface=rep.surface,
                     payoff=mk.payoff, profile=rep.profile, store_paths=True, threads=threads)
        opt_mean, opt_se = mean_se(b.pnl[idx])
        worst = None
        for c in comps_t:
            cm, cs = mean_se(pnl_samples(b, c))
            margin = opt_mean - cm + 3 * joint_se(opt_se, cs)
            if worst is None or margin < worst["margin"]:
                worst = {"mean": cm, "se": cs, "margin": margin}
        passed = worst["margin"] >= 0
        ok = ok and passed
        per_agent.append({"agent": a.id, "optimal_mean": opt_mean, "optimal_se": opt_se,
                          "closest_competitor": worst, "passed": bool(passed)})
    return {"passed": bool(ok), "competitors": count, "paths": sim.paths, "agents": per_agent}


def cmd_verify(cfg: RunConfig, out: Path, threads: int = 1, tolerance: float | None = None, **_) -> int:
    rep = _price(cfg)
    checks = {}
    sm = verify_supermartingale(rep.surface, tolerance)
    checks["supermartingale"] = sm.to_dict()
    if cfg.verify.get("mc", True):
        checks["mc"] = _mc_check(cfg, rep, threads)
    if cfg.verify.get("lattice"):
        checks["lattice"] = _lattice_check(cfg, rep)
    if cfg.verify.get("pnl"):
        checks["pnl"] = _pnl_check(cfg, rep, threads)
    if cfg.verify.get("monotonicity") or _is_two_factor(cfg):
        checks["monotonicity"] = verify_monotonicity(rep.surface).to_dict()
    passed = all(c["passed"] for c in checks.values())
    export.write_json(out / "verify.json", {"passed": passed, "price": rep.price, "checks": checks})
    for name, c in checks.items():
        print(f"{name:16s} {'PASS' if c['passed'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_CHECK


def _is_two_factor(cfg: RunConfig) -> bool:
    return cfg.market.n == 2 and all(isinstance(a.coefficients, MeanRevertingVolField) for a in cfg.market.agents)


def _parse_measure(measure: str, cfg: RunConfig):
    if measure == "feedback":
        return None
    try:
        aid = int(measure.removeprefix("agent"))
    except ValueError as exc:
        raise ConfigError(f"--measure must be 'feedback' or an agent id, got '{measure}'") from exc
    if aid not in [a.id for a in cfg.market.agents]:
        raise ConfigError(f"--measure: unknown agent {aid}")
    return aid


def _write_paths(out: Path, bundle, market, limit: int):
    n = market.n
    d = market.dim
    header = ["path", "step", "t"] + [f"x{j + 1}" for j in range(d)] + ["z"] + [f"h_{a.id}" for a in market.agents]
    rows = []
    for p in range(min(limit, bundle.paths)):
        for m, t in enumerate(bundle.times):
            rows.append([p, m, float(t)] + [float(c) for c in bundle.x[p, m]] + [float(bundle.z[p, m])]
                        + [float(bundle.holdings[i, p, m]) for i in range(n)])
    export.write_rows_csv(out / "paths.csv", header, rows)
    header = ["path"] + [f"pnl_{a.id}" for a in market.agents] + [f"trades_{a.id}" for a in market.agents]
    rows = [[p] + [float(bundle.pnl[i, p]) for i in range(n)] + [int(bundle.trades[i, p]) for i in range(n)]
            for p in range(bundle.paths)]
    export.write_rows_csv(out / "pnl.csv", header, rows)
    header = ["path", "t"] + [f"x{j + 1}" for j in range(d)] + ["agent", "old", "new"]
    rows = []
    for idx, a in enumerate(market.agents):
        for p, t, x, old, new in trade_events(bundle, idx):
            rows.append([p, t] + [float(c) for c in x] + [a.id, old, new])
    rows.sort(key=lambda r: (r[0], r[1], r[2 + d]))
    export.write_rows_csv(out / "trades.csv", header, rows)
    return len(rows)


def cmd_simulate(cfg: RunConfig, out: Path, threads: int = 1, measure: str = "feedback", **_) -> int:
    aid = _parse_measure(measure, cfg)
    rep = _price(cfg)
    mk = cfg.market
    sel = ControlSelector.feedback(rep.surface) if aid is None else ControlSelector.fixed(aid)
    bundle = simulate(mk.agents, sel, mk.x0, mk.T, cfg.sim, surface=rep.surface, payoff=mk.payoff,
                      profile=rep.profile, store_paths=True, threads=threads)
    limit = int(cfg.output.get("path_rows", 200))
    events = _write_paths(out, bundle, mk, limit)
    print(f"measure {bundle.measure}, {bundle.paths} paths, {events} trade events")
    for i, a in enumerate(mk.agents):
        mean, se = mean_se(bundle.pnl[i])
        print(f"agent {a.id}: mean P&L {mean!r} (se {se!r})")
    return EXIT_OK


def demo_config(seed: int | None = None, scheme: str | None = None) -> RunConfig:
    """Built-in two-factor demo: 201 x 201 nodes, 200 steps, 1e5 paths."""
    mk = default_market()
    grid = auto_grid(mk.agents, mk.x0, mk.T, 201, 200)
    sim = SimConfig(100_000, 200, 2024 if seed is None else seed)
    return RunConfig(mk, grid, sim, scheme or "implicit", {"trade_paths": 10_000, "trade_steps": 100})


def cmd_heston_demo(cfg: RunConfig, out: Path, threads: int = 1, **_) -> int:
    """Three-pricer agreement, switching geometry and trade events for the two-factor market."""
    if not _is_two_factor(cfg):
        raise ConfigError("heston-demo needs two mean-reverting agents", path="market.agents")
    _gate(cfg)
    mk = cfg.market
    params = params_from_market(mk)
    t0 = time.perf_counter()
    surface = solve_equilibrium(mk.agents, mk.payoff, cfg.grid, cfg.scheme)
    tol = scheme_tolerance(mk.agents, mk.payoff, cfg.grid, mk.x0, cfg.scheme, surface)
    surface.scheme_tolerance = tol
    pde = surface.value_at(mk.x0)
    quad, quad_se = quadrature_mc_price(0.0, params.s, params.y, params, mk.payoff, cfg.sim, mk.T)
    fb = simulate(mk.agents, ControlSelector.feedback(surface), mk.x0, mk.T, cfg.sim, store_paths=False,
                  threads=threads)
    fb_mean, fb_se = estimate_value(fb, mk.payoff)
    prices = {"pde": (pde, 0.0), "quadrature_mc": (quad, quad_se), "feedback_mc": (fb_mean, fb_se)}
    pairs = {}
    ok = True
    names = list(prices)
    for i in range(3):
        for j in range(i + 1, 3):
            (a, sa), (b, sb) = prices[names[i]], prices[names[j]]
            allowed = max(3 * joint_se(sa, sb), 2 * tol)
            pairs[f"{names[i]}~{names[j]}"] = {"gap": abs(a - b), "allowed": allowed, "passed": bool(abs(a - b) <= allowed)}
            ok = ok and abs(a - b) <= allowed
    mono = verify_monotonicity(surface)
    profile = extract_strategies(surface, mk)
    tp = int(cfg.verify.get("trade_paths", 10_000))
    ts = int(cfg.verify.get("trade_steps", 100))
    y0 = params.ybar
    start = (mk.x0[0], y0)
    tb = simulate(mk.agents, ControlSelector.fixed(1), start, mk.T, SimConfig(tp, ts, cfg.sim.seed + 1),
                  surface=surface, payoff=mk.payoff, profile=profile, store_paths=True, threads=threads)
    rows = []
    h = tb.holdings
    change = np.any(h[:, :, 1:-1] != h[:, :, :-2], axis=0)
    for p, m in zip(*np.nonzero(change)):
        rows.append([int(p), float(tb.times[m + 1]), float(tb.x[p, m + 1, 1]),
                     float(h[0, p, m]), float(h[0, p, m + 1]), float(h[1, p, m]), float(h[1, p, m + 1])])
    export.write_rows_csv(out / "trades.csv", ["path", "t", "y", "h1_old", "h1_new", "h2_old", "h2_new"], rows)
    export.write_surface_csv(out / "surface.csv", surface)
    g = cfg.grid
    s_ax, y_ax = g.axes
    pred = predicted_maximizer(y_ax, params.ybar)
    sw = []
    for i, s in enumerate(s_ax):
        for j, y in enumerate(y_ax):
            sw.append([float(s), float(y), export.mask_label(surface.maximizers[0, i, j], 2), int(pred[j])])
    export.write_rows_csv(out / "switching.csv", ["s", "y", "maximizers", "predicted"], sw)
    report = {
        "passed": bool(ok and mono.passed and len(rows) > 0),
        "prices": {k: {"value": v, "se": s} for k, (v, s) in prices.items()},
        "scheme_tolerance": tol,
        "pairs": pairs,
        "monotonicity": mono.to_dict(),
        "trade_events": len(rows),
        "trade_paths": tp,
        "seconds": time.perf_counter() - t0,
    }
    text = export.dumps_json({k: v for k, v in report.items() if k != "seconds"})
    (out / "agreement.json").write_text(text)
    for k, (v, s) in prices.items():
        print(f"{k:14s} {v!r} (se {s!r})")
    print(f"scheme tolerance {tol!r}; trade events {len(rows)}; {'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


COMMANDS = {
    "validate": cmd_validate,
    "price": cmd_price,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "heston-demo": cmd_heston_demo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetbelief", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (optional for heston-demo)")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, help="override sim.seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="Monte Carlo worker threads; results do not depend on it")
    p.add_argument("--scheme", choices=("explicit", "implicit"), help="override grid.scheme")
    p.add_argument("--tolerance", type=float, help="supermartingale tolerance for verify")
    p.add_argument("--measure", default="feedback", help="simulate: 'feedback' or an agent id")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        if args.config is None:
            if args.command != "heston-demo":
                raise ConfigError("--config is required")
            cfg = demo_config(args.seed, args.scheme)
        else:
            cfg = load_config(args.config, {"seed": args.seed, "scheme": args.scheme})
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out=out, threads=args.threads, tolerance=args.tolerance,
                                      measure=args.measure)
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CHECK
    except (CFLError, SchemeError, SimulationError, LatticeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
