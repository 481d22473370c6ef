import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbelief.models import (
    ClippedAffine,
    LocalVolField,
    MarketSpec,
    ModelError,
    PayoffSpec,
    build_model,
    eval_coefficients,
    validate_regularity,
)

ALPHA = {"intercept": 0.2, "slope": 0.1, "lo": 0.05, "hi": 1.0}


def mean_reverting(agent_id=1, lam=2.0, ybar=0.0, beta=0.3):
    return build_model(agent_id, "mean_reverting", alpha=ALPHA, beta=beta, lam=lam, ybar=ybar)


class TestBuildModel:
    def test_constant_diffusion_product(self):
        m = build_model(1, "constant", drift=0.0, sigma=0.2)
        for t, x in [(0.0, 1.0), (0.7, -3.0), (1.0, 12.5)]:
            b, a = eval_coefficients(m, t, [x])
            assert b.tolist() == [0.0]
            assert a.shape == (1, 1)
            assert a[0, 0] == pytest.approx(0.04, abs=1e-15)

    def test_mean_reverting_accepted(self):
        m = mean_reverting(lam=2.0)
        assert m.dim == 2
        assert m.coefficients.noise_dim == 2

    @pytest.mark.parametrize("lam", [-1.0, 0.0])
    def test_mean_reverting_rejects_nonpositive_speed(self, lam):
        with pytest.raises(ModelError):
            mean_reverting(lam=lam)

    def test_rejects_negative_volatility(self):
        with pytest.raises(ModelError):
            build_model(1, "constant", sigma=-0.1)

    def test_unknown_family(self):
        with pytest.raises(ModelError, match="unknown model family"):
            build_model(1, "rough", sigma=0.1)

    def test_rejects_decreasing_alpha(self):
        with pytest.raises(ModelError):
            build_model(1, "mean_reverting", alpha={"intercept": 0.2, "slope": -0.1, "lo": 0.05, "hi": 1.0},
                        beta=0.3, lam=1.0)

    def test_vanishing_beta_is_flagged_not_rejected(self):
        m = build_model(1, "mean_reverting", alpha=ALPHA, beta=0.0, lam=1.0)
        rep = validate_regularity(m, [np.linspace(0, 2, 3), np.linspace(-1, 1, 5)])
        assert not rep.elliptic

    def test_rejects_negative_beta(self):
        with pytest.raises(ModelError):
            build_model(1, "mean_reverting", alpha=ALPHA, beta={"intercept": -0.1, "lo": -1.0, "hi": 0.0}, lam=1.0)


class TestEvalCoefficients:
    def test_level_has_zero_drift(self):
        b, _ = eval_coefficients(mean_reverting(ybar=0.25), 0.3, [1.0, 0.25])
        assert b[1] == 0.0

    def test_faster_reversion_pulls_harder_below_level(self):
        fast, slow = mean_reverting(1, 2.0), mean_reverting(2, 0.5)
        x = [1.0, -0.4]
        assert eval_coefficients(fast, 0.0, x)[0][1] > eval_coefficients(slow, 0.0, x)[0][1]

    def test_diffusion_is_diagonal(self):
        _, a = eval_coefficients(mean_reverting(), 0.0, [1.0, 0.5])
        assert a[0, 1] == 0.0 and a[1, 0] == 0.0
        assert a[0, 0] == pytest.approx(0.25**2)
        assert a[1, 1] == pytest.approx(0.09)

    def test_wrong_state_dimension(self):
        with pytest.raises(ModelError):
            eval_coefficients(build_model(1, "constant", sigma=0.2), 0.0, [1.0, 2.0])

    def test_localvol_bilinear(self):
        f = LocalVolField([0.0, 1.0], [0.0, 1.0], [[0.1, 0.3], [0.2, 0.4]])
        sig = f.diffusion(0.5, np.array([[0.5]]))
        assert sig[0, 0, 0] == pytest.approx(0.25)

    def test_localvol_clamps_with_warning(self, caplog):
        f = LocalVolField([0.0, 1.0], [0.0, 1.0], [[0.1, 0.3], [0.2, 0.4]])
        with caplog.at_level("WARNING"):
            sig = f.diffusion(0.0, np.array([[5.0]]))
        assert sig[0, 0, 0] == pytest.approx(0.3)
        assert any("clamp" in r.message for r in caplog.records)

    def test_localvol_reject(self):
        f = LocalVolField([0.0, 1.0], [0.0, 1.0], [[0.1, 0.3], [0.2, 0.4]], out_of_domain="reject")
        with pytest.raises(ModelError):
            f.diffusion(0.0, np.array([[5.0]]))


class TestRegularity:
    def test_constant_is_elliptic(self):
        rep = validate_regularity(build_model(1, "constant", sigma=0.2), [np.linspace(0, 2, 11)])
        assert rep.min_eigenvalue == pytest.approx(0.04)
        assert rep.elliptic
        assert rep.drift_lipschitz == 0.0 and rep.diffusion_lipschitz == 0.0

    def test_degenerate(self):
        rep = validate_regularity(build_model(1, "constant", sigma=0.0), [np.linspace(0, 2, 11)])
        assert rep.min_eigenvalue == 0.0
        assert not rep.elliptic

    def test_mean_reverting_minimum_is_diag_floor(self):
        s = np.linspace(0, 2, 5)
        y = np.linspace(-3, 3, 61)
        rep = validate_regularity(mean_reverting(), [s, y])
        alpha = ClippedAffine(**ALPHA)
        expected = min(float(np.min(alpha(y) ** 2)), 0.09)
        assert rep.min_eigenvalue == pytest.approx(expected, rel=1e-12)
        assert rep.elliptic
        assert rep.drift_lipschitz == pytest.approx(2.0, rel=1e-12)

    def test_lattice_needs_two_points(self):
        with pytest.raises(ModelError):
            validate_regularity(build_model(1, "constant", sigma=0.2), [np.array([1.0])])


class TestPayoff:
    def test_butterfly_shape(self):
        f = PayoffSpec("butterfly", strike=1.0, width=0.1)
        xs = np.array([[0.8], [0.9], [0.95], [1.0], [1.05], [1.1], [1.3]])
        assert np.allclose(f(xs), [0, 0, 0.05, 0.1, 0.05, 0, 0])

    def test_table_extrapolates_end_slopes(self):
        f = PayoffSpec("table", points=((0.0, 0.0), (1.0, 1.0), (2.0, 1.5)))
        assert f(np.array([[3.0]]))[0] == pytest.approx(2.0)
        assert f(np.array([[-1.0]]))[0] == pytest.approx(-1.0)

    def test_coordinate_selection(self):
        f = PayoffSpec("identity", coordinate=1)
        assert f(np.array([[1.0, 7.0]]))[0] == 7.0

    @pytest.mark.parametrize("spec", [
        PayoffSpec("call", strike=1.2),
        PayoffSpec("put", strike=0.8),
        PayoffSpec("butterfly", strike=1.0, width=0.2),
        PayoffSpec("identity"),
        PayoffSpec("constant", level=3.0),
        PayoffSpec("table", points=((0.0, 1.0), (0.5, 0.0), (2.0, 2.0))),
    ])
    def test_linear_pieces_reproduce_payoff(self, spec):
        a, b, kinks = spec.linear_pieces()
        s = np.linspace(-2, 4, 301)
        rebuilt = a + b * s + sum(j * np.maximum(s - c, 0) for c, j in kinks)
        assert np.allclose(rebuilt, spec.on_coordinate(s), atol=1e-12)

    @pytest.mark.parametrize("spec", [
        PayoffSpec("call", strike=1.2),
        PayoffSpec("butterfly", strike=1.0, width=0.2),
        PayoffSpec("table", points=((0.0, 1.0), (0.5, 0.0), (2.0, 2.0))),
    ])
    def test_growth_bound_holds(self, spec):
        c, p = spec.growth_bound()
        s = np.linspace(-50, 50, 2001)
        assert np.all(np.abs(spec.on_coordinate(s)) <= c * (1 + np.abs(s) ** p) + 1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ModelError):
            PayoffSpec("digital")


class TestMarket:
    def test_rejects_zero_supply_and_short_bound(self):
        a = build_model(1, "constant", sigma=0.2)
        with pytest.raises(ModelError, match="s0 \\+ k"):
            MarketSpec((a,), PayoffSpec("call", strike=1.0), 1.0, (1.0,), 0.0, 0.0)

    def test_rejects_gapped_ids(self):
        a = build_model(1, "constant", sigma=0.2)
        b = build_model(3, "constant", sigma=0.3)
        with pytest.raises(ModelError, match="1..n"):
            MarketSpec((a, b), PayoffSpec("call", strike=1.0), 1.0, (1.0,))

    def test_rejects_mixed_dimensions(self):
        with pytest.raises(ModelError):
            MarketSpec((build_model(1, "constant", sigma=0.2), mean_reverting(2)), PayoffSpec("call"), 1.0, (1.0,))


@settings(max_examples=60, deadline=None)
@given(
    t=st.floats(0, 1),
    s=st.floats(-5, 5),
    y=st.floats(-5, 5),
    lam=st.floats(0.01, 10),
    ybar=st.floats(-1, 1),
)
def test_mean_reverting_drift_is_exact(t, s, y, lam, ybar):
    m = mean_reverting(lam=lam, ybar=ybar)
    b, a = eval_coefficients(m, t, [s, y])
    assert b[0] == 0.0
    assert b[1] == lam * (ybar - y)
    if y != ybar:
        assert math.copysign(1, b[1]) == math.copysign(1, ybar - y)
    assert np.array_equal(a, a.T)
    assert np.linalg.eigvalsh(a).min() >= 0


@settings(max_examples=40, deadline=None)
@given(
    sig=st.lists(st.floats(-1, 1), min_size=4, max_size=4),
    x=st.floats(-3, 3),
)
def test_diffusion_product_symmetric_psd(sig, x):
    m = build_model(1, "constant", drift=[0.0, 0.1], sigma=np.reshape(sig, (2, 2)))
    _, a = eval_coefficients(m, 0.0, [x, x])
    assert np.allclose(a, a.T, atol=0)
    assert np.linalg.eigvalsh(a).min() >= -1e-15


@settings(max_examples=30, deadline=None)
@given(sigma=st.floats(0.01, 2.0), drift=st.floats(-1, 1))
def test_constant_lipschitz_zero(sigma, drift):
    m = build_model(1, "constant", sigma=sigma, drift=drift)
    rep = validate_regularity(m, [np.linspace(-2, 2, 9)], times=(0.0, 0.5))
    assert rep.drift_lipschitz == 0.0 and rep.diffusion_lipschitz == 0.0
