import math
import time

import numpy as np
import pytest

from hetbelief.equilibrium import bubble_decomposition
from hetbelief.heston import default_market, default_params, quadrature_mc_price
from hetbelief.mc import ControlSelector, SimConfig, estimate_value, simulate
from hetbelief.models import MarketSpec, PayoffSpec, build_model
from hetbelief.pde import auto_grid, scheme_tolerance, solve_equilibrium

BACHELIER_ATM = 0.2 / math.sqrt(2 * math.pi)


def constant_agents(*sigmas):
    return tuple(build_model(i + 1, "constant", sigma=s) for i, s in enumerate(sigmas))


def call_market(s0=1.0, k=0.0):
    return MarketSpec(constant_agents(0.1, 0.3), PayoffSpec("call", strike=1.0), 1.0, (1.0,), s0, k)


def butterfly_market(s0=1.0, k=0.0):
    return MarketSpec(constant_agents(0.1, 0.3), PayoffSpec("butterfly", strike=1.0, width=0.1), 1.0, (1.0,), s0, k)


def bachelier_market():
    return MarketSpec(constant_agents(0.2), PayoffSpec("call", strike=1.0), 1.0, (1.0,))


def three_agent_market():
    agents = (
        build_model(1, "constant", sigma=0.15),
        build_model(2, "constant", sigma=0.25, drift=0.02),
        build_model(3, "localvol", times=[0.0, 1.0], x=[0.5, 1.0, 1.5],
                    sigma=[[0.1, 0.3, 0.1], [0.2, 0.2, 0.2]]),
    )
    return MarketSpec(agents, PayoffSpec("butterfly", strike=1.0, width=0.15), 1.0, (1.0,), 2.0, 1.0)


@pytest.fixture(scope="session")
def one_d_reports():
    """Equilibrium reports for the 1-D fixture markets (implicit, 201 nodes, 200 steps)."""
    out = {}
    for name, mk in [("bachelier", bachelier_market()), ("call", call_market()),
                     ("butterfly", butterfly_market()), ("three", three_agent_market())]:
        grid = auto_grid(mk.agents, mk.x0, mk.T, 201, 200)
        out[name] = (mk, bubble_decomposition(mk, grid, "implicit"))
    return out


@pytest.fixture(scope="session")
def butterfly_fine():
    mk = butterfly_market()
    grid = auto_grid(mk.agents, mk.x0, mk.T, 401, 400)
    return mk, bubble_decomposition(mk, grid, "implicit")


@pytest.fixture(scope="session")
def heston_run():
    """Two-factor demo at 201 x 201 x 200 with the three pricers; records wall time."""
    t0 = time.perf_counter()
    params = default_params()
    mk = default_market(params)
    grid = auto_grid(mk.agents, mk.x0, mk.T, 201, 200)
    surface = solve_equilibrium(mk.agents, mk.payoff, grid, "implicit")
    tol = scheme_tolerance(mk.agents, mk.payoff, grid, mk.x0, "implicit", surface)
    surface.scheme_tolerance = tol
    pde = surface.value_at(mk.x0)
    quad = quadrature_mc_price(0.0, params.s, params.y, params, mk.payoff, SimConfig(100_000, 200, 11), mk.T)
    fb_bundle = simulate(mk.agents, ControlSelector.feedback(surface), mk.x0, mk.T, SimConfig(100_000, 200, 12),
                         store_paths=False)
    fb = estimate_value(fb_bundle, mk.payoff)
    seconds = time.perf_counter() - t0
    return {"params": params, "market": mk, "grid": grid, "surface": surface, "tol": tol, "pde": pde,
            "quad": quad, "feedback": fb, "seconds": seconds}


def assert_close(a, b, tol):
    assert abs(a - b) <= tol, f"|{a} - {b}| = {abs(a - b)} > {tol}"


def rng():
    return np.random.default_rng(0)
