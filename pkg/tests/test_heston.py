import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BACHELIER_ATM, bachelier_market, call_market
from hetbelief.equilibrium import extract_strategies
from hetbelief.heston import (
    HestonTypeParams,
    conditional_gaussian_price,
    default_market,
    default_params,
    gamma_drift,
    predicted_maximizer,
    quadrature_mc_price,
    simulate_integrated_variance,
    switching_strategy,
    verify_monotonicity,
)
from hetbelief.mc import ControlSelector, SimConfig, joint_se, simulate
from hetbelief.models import ClippedAffine, PayoffSpec
from hetbelief.pde import auto_grid, solve_equilibrium

CALL = PayoffSpec("call", strike=1.0)


def params(lam1=2.0, lam2=1.0, ybar=0.0, beta=0.3, frozen=False):
    return HestonTypeParams(ClippedAffine(0.2, 0.1, 0.05, 1.0), ClippedAffine(beta, 0.0, beta, beta),
                            lam1, lam2, ybar, allow_frozen_factor=frozen)


@pytest.fixture(scope="module")
def small_grid():
    mk = default_market()
    return mk, auto_grid(mk.agents, mk.x0, mk.T, 61, 60)


class TestParams:
    @pytest.mark.parametrize("l1,l2", [(1.0, 1.0), (0.5, 2.0), (1.0, 0.0)])
    def test_speed_ordering(self, l1, l2):
        with pytest.raises(ValueError):
            params(l1, l2)

    def test_frozen_factor_needs_opt_in(self):
        with pytest.raises(ValueError):
            params(beta=0.0)
        assert params(beta=0.0, frozen=True).beta(0.0) == 0.0

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            HestonTypeParams(ClippedAffine(0.2, 0.1, 0.0, 1.0), ClippedAffine(0.3, 0.0, 0.3, 0.3), 2.0, 1.0)

    def test_lipschitz_squares(self):
        la, lb = default_params().lipschitz_squares(-1.0, 1.0)
        # alpha^2 = (0.2 + 0.1 y)^2 has slope 0.2 (0.2 + 0.1 y), largest at y = 1
        assert la == pytest.approx(0.06, rel=1e-3)
        assert lb == 0.0


class TestGammaDrift:
    def test_at_level(self):
        assert gamma_drift(0.0, params()) == 0.0

    def test_branches(self):
        p = params(2.0, 1.0)
        assert gamma_drift(-0.5, p) == 1.0
        assert gamma_drift(0.5, p) == -0.5

    @settings(max_examples=100, deadline=None)
    @given(y=st.floats(-5, 5), w=st.floats(0, 10), ybar=st.floats(-1, 1),
           lam2=st.floats(0.01, 5), extra=st.floats(0.01, 5))
    def test_is_max_of_agent_drifts(self, y, w, ybar, lam2, extra):
        p = params(lam2 + extra, lam2, ybar)
        best = max(p.lam1 * (ybar - y) * w, p.lam2 * (ybar - y) * w)
        assert float(gamma_drift(y, p)) * w == pytest.approx(best, rel=1e-12, abs=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(eps=st.floats(1e-12, 1e-3))
    def test_continuous_at_level(self, eps):
        p = params(3.0, 0.5, 0.2)
        assert abs(gamma_drift(0.2 + eps, p) - gamma_drift(0.2 - eps, p)) <= 3.5 * eps + 1e-15


class TestConditionalGaussian:
    @pytest.mark.parametrize("payoff", [CALL, PayoffSpec("butterfly", strike=1.0, width=0.1), PayoffSpec("identity")])
    def test_zero_variance(self, payoff):
        s = np.array([0.7, 1.0, 1.04])
        assert np.array_equal(conditional_gaussian_price(s, 0.0, payoff), payoff.on_coordinate(s))

    @pytest.mark.parametrize("V", [0.01, 0.5, 4.0])
    def test_identity(self, V):
        assert conditional_gaussian_price(1.3, V, PayoffSpec("identity")) == pytest.approx(1.3, abs=1e-15)

    def test_bachelier_call(self):
        assert conditional_gaussian_price(1.0, 0.04, CALL) == pytest.approx(0.0797884560802865, rel=1e-6)
        assert conditional_gaussian_price(1.0, 0.04, CALL) == pytest.approx(BACHELIER_ATM, rel=1e-12)

    def test_callable_uses_quadrature(self):
        v = conditional_gaussian_price(1.0, 0.04, lambda x: np.maximum(x - 1.0, 0.0))
        assert v == pytest.approx(BACHELIER_ATM, rel=1e-2)
        assert conditional_gaussian_price(0.5, 0.3, lambda x: x**2) == pytest.approx(0.25 + 0.3, rel=1e-12)

    def test_put_call_parity(self):
        s, V = np.linspace(0.5, 1.5, 11), 0.09
        c = conditional_gaussian_price(s, V, CALL)
        p = conditional_gaussian_price(s, V, PayoffSpec("put", strike=1.0))
        assert np.allclose(c - p, s - 1.0, atol=1e-14)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            conditional_gaussian_price(1.0, -1e-3, CALL)

    @settings(max_examples=50, deadline=None)
    @given(s=st.floats(0, 2), V1=st.floats(0, 1), dV=st.floats(0, 1))
    def test_convex_payoff_increasing_in_variance(self, s, V1, dV):
        assert conditional_gaussian_price(s, V1 + dV, CALL) >= conditional_gaussian_price(s, V1, CALL) - 1e-15


class TestQuadratureMC:
    def test_frozen_factor_is_deterministic(self):
        p = params(beta=0.0, frozen=True)
        m, se = quadrature_mc_price(0.0, 1.0, 0.0, p, CALL, SimConfig(500, 50, 3), 1.0)
        assert se == 0.0
        assert m == pytest.approx(conditional_gaussian_price(1.0, 0.04, CALL), rel=1e-12)

    def test_integrated_variance_positive(self):
        iv = simulate_integrated_variance(0.0, 0.0, default_params(), 1.0, SimConfig(2000, 50, 4))
        assert np.all(iv >= 0.05**2 * (1 - 1e-12))

    def test_common_random_numbers_monotone(self):
        cfg = SimConfig(20_000, 100, 9)
        p = default_params()
        lo = quadrature_mc_price(0.0, 1.0, -0.2, p, CALL, cfg)
        hi = quadrature_mc_price(0.0, 1.0, 0.2, p, CALL, cfg)
        assert hi[0] >= lo[0] - 3 * joint_se(lo[1], hi[1])
        assert hi[0] > lo[0]

    def test_pathwise_monotone_in_start(self):
        cfg = SimConfig(2000, 50, 2)
        p = default_params()
        a = simulate_integrated_variance(0.0, -0.1, p, 1.0, cfg)
        b = simulate_integrated_variance(0.0, 0.1, p, 1.0, cfg)
        assert np.all(b >= a - 1e-12)


class TestSwitching:
    @pytest.mark.parametrize("s0,k,y,want", [(1, 0, -0.3, (1, 0)), (1, 0, 0.0, (0.5, 0.5)), (0, 1, 0.4, (-1, 1)),
                                             (0, 1, -0.4, (1, -1)), (2, 3, 0.0, (1, 1))])
    def test_examples(self, s0, k, y, want):
        assert switching_strategy(y, default_market(s0=s0, k=k)) == want

    def test_rejects_other_markets(self):
        with pytest.raises(ValueError):
            switching_strategy(0.0, call_market())

    def test_predicted_maximizer(self):
        assert predicted_maximizer(np.array([-1.0, 0.0, 2.0]), 0.0).tolist() == [1, 0, 2]


class TestMonotonicity:
    def test_constant_payoff(self, small_grid):
        mk, g = small_grid
        s = solve_equilibrium(mk.agents, PayoffSpec("constant", level=2.0), g, "implicit")
        rep = verify_monotonicity(s)
        assert rep.passed and rep.min_dy == 0.0

    def test_identity_payoff(self, small_grid):
        mk, g = small_grid
        s = solve_equilibrium(mk.agents, PayoffSpec("identity"), g, "implicit")
        rep = verify_monotonicity(s)
        assert rep.passed and abs(rep.min_dy) < 1e-10

    def test_call(self, heston_run):
        rep = verify_monotonicity(heston_run["surface"])
        assert rep.passed
        assert rep.tolerance == 10 * heston_run["tol"]

    def test_needs_two_factors(self):
        mk = bachelier_market()
        s = solve_equilibrium(mk.agents, mk.payoff, auto_grid(mk.agents, mk.x0, 1.0, 21, 20), "implicit")
        with pytest.raises(ValueError):
            verify_monotonicity(s)


class TestGeometry:
    def test_maximizers_follow_level(self, heston_run):
        s, g = heston_run["surface"], heston_run["grid"]
        y = g.axes[1]
        hy = g.spacing[1]
        assert np.any(y == 0.0)
        far = np.abs(y) > hy * (1 + 1e-9)
        pred = predicted_maximizer(y, 0.0)
        masks = s.maximizers[:-1][:, :, far]
        want = pred[far].astype(np.uint32)
        # predicted agent always maximizes; the other one only ties where d_y v is negligible
        assert np.all(masks & (1 << (want - 1)))
        dy = np.gradient(s.values[:-1], hy, axis=2)[:, :, far]
        gap = 1.5 * np.abs(y[far]) * dy
        strict = gap > 1e-5
        assert np.array_equal(masks[strict], np.broadcast_to(1 << (want - 1), masks.shape)[strict])
        assert strict.mean() > 0.2

    def test_trades_from_level(self, small_grid):
        mk, g = small_grid
        s = solve_equilibrium(mk.agents, mk.payoff, g, "implicit")
        prof = extract_strategies(s, mk)
        b = simulate(mk.agents, ControlSelector.fixed(1), (1.0, 0.0), 1.0, SimConfig(2000, 50, 5), surface=s,
                     payoff=mk.payoff, profile=prof, store_paths=True)
        assert int(b.trades.sum()) > 0
        crossings = np.sum(np.diff(np.sign(b.x[:, :, 1]), axis=1) != 0)
        assert crossings > 0


def test_demo_defaults():
    p = default_params()
    assert (p.lam1, p.lam2, p.ybar, p.s, p.y) == (2.0, 0.5, 0.0, 1.0, 0.0)
    assert p.alpha(np.array([-10.0, 0.0, 10.0])).tolist() == [0.05, 0.2, 1.0]
    assert math.isclose(float(p.beta(3.0)), 0.3)
    mk = default_market()
    assert mk.payoff.strike == 1.0 and mk.T == 1.0
    assert replace(p, lam2=0.25).lam2 == 0.25
