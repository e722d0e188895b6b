import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nonlocal_feedback.core_model import (ClosedLoopConfig, ModelError, VelocityKind, VelocityModel,
                                          check_c1_compatibility, check_profile_compatibility,
                                          equilibrium_summary, feedback_influx, velocity_from_config)


def test_reciprocal_equilibrium_at_one():
    eq = equilibrium_summary(1.0, VelocityModel.reciprocal(1.0))
    assert eq.lambda_bar == 0.5
    assert eq.lambda_prime_bar == -0.25
    assert eq.d == -0.5
    assert eq.flux_bar == 0.5


@given(st.floats(0.0, 50.0))
def test_reciprocal_d_closed_form(rho_bar):
    eq = equilibrium_summary(rho_bar, VelocityModel.reciprocal(rho_bar))
    assert eq.d == pytest.approx(-rho_bar / (1.0 + rho_bar), rel=1e-13, abs=1e-15)
    assert eq.d > -1.0


@given(st.floats(-3.0, 3.0), st.floats(0.1, 5.0))
def test_exponential_realises_requested_d(rate, rho_bar):
    v = VelocityModel.exponential(1.0, rate / rho_bar, rho_bar)
    eq = equilibrium_summary(rho_bar, v)
    assert eq.lambda_bar == pytest.approx(1.0)
    assert eq.d == pytest.approx(rate, rel=1e-12, abs=1e-14)


def test_out_of_range_raises():
    v = VelocityModel.reciprocal(0.0)
    lo, hi = v.valid_range
    with pytest.raises(ModelError):
        v.lam(hi + 1e-9)
    with pytest.raises(ModelError):
        v.lam(lo - 1e-9)
    with pytest.raises(ModelError):
        ClosedLoopConfig(hi + 1.0, 0.5, v)


def test_reciprocal_rejects_pole():
    with pytest.raises(ModelError):
        VelocityModel.reciprocal(0.0, valid_range=(-1.0, 1.0))


def test_positivity_checked_on_construction():
    with pytest.raises(ModelError, match="not positive"):
        VelocityModel.polynomial([1.0, -1.0], (0.0, 2.0))
    v = VelocityModel.polynomial([1.0, -0.4], (0.0, 2.0))
    assert v.lam(1.0) == pytest.approx(0.6)
    assert v.lam_prime(1.0) == pytest.approx(-0.4)


def test_tabulated_derivative_matches_analytic():
    s = np.linspace(-0.5, 3.0, 201)
    v = VelocityModel.tabulated(s, 1.0 / (1.0 + s))
    assert v.kind is VelocityKind.USER_TABULATED
    for x in (0.0, 0.7, 2.5):
        assert v.lam(x) == pytest.approx(1.0 / (1.0 + x), rel=1e-7)
        assert v.lam_prime(x) == pytest.approx(-1.0 / (1.0 + x) ** 2, rel=1e-4)


def test_tabulated_from_csv(tmp_path):
    p = tmp_path / "lam.csv"
    s = np.linspace(0.0, 2.0, 21)
    p.write_text("s,lambda\n" + "".join(f"{a:.17g},{math.exp(-a):.17g}\n" for a in s))
    v = velocity_from_config({"kind": "tabulated", "table": "lam.csv"}, 0.5, tmp_path)
    assert v.lam(0.5) == pytest.approx(math.exp(-0.5), rel=1e-5)
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n0,1\n")
    with pytest.raises(ModelError, match="header"):
        VelocityModel.from_csv(bad)
    garbled = tmp_path / "garbled.csv"
    garbled.write_text("s,lambda\n0,1\n1,abc\n")
    with pytest.raises(ModelError, match="garbled"):
        VelocityModel.from_csv(garbled)


@pytest.mark.parametrize("spec", [
    {"kind": "reciprocal", "colour": 1},
    {"kind": "warp"},
    {"kind": "polynomial", "coefficients": [1.0]},
    {"kind": "exponential", "coefficients": [1.0]},
    {"kind": "tabulated"},
])
def test_velocity_config_fails_closed(spec):
    with pytest.raises(ModelError):
        velocity_from_config(spec, 0.0)


@pytest.mark.parametrize("kw", [dict(n_cells=1), dict(cfl=1.5), dict(cfl=0.0), dict(t_final=0.0),
                                dict(record_every=0)])
def test_config_validation(kw):
    with pytest.raises(ModelError):
        ClosedLoopConfig(0.0, 0.5, VelocityModel.reciprocal(0.0), **kw)


@given(st.floats(-3.0, 3.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 2.0))
def test_feedback_law_is_affine(k, rho_bar, y1, y2):
    cfg = ClosedLoopConfig(rho_bar, k, VelocityModel.reciprocal(rho_bar))
    u1, u2 = feedback_influx(y1, cfg), feedback_influx(y2, cfg)
    assert u1 - u2 == pytest.approx(k * (y1 - y2), abs=1e-12 * (1 + abs(k)) * (1 + y1 + y2))
    assert feedback_influx(cfg.flux_bar, cfg) == pytest.approx(cfg.flux_bar, abs=1e-14 * (1 + abs(k)))


@given(st.floats(0.0, 5.0), st.floats(0.0, 10.0))
def test_feedback_exact_at_unit_gain(rho_bar, y):
    cfg = ClosedLoopConfig(rho_bar, 1.0, VelocityModel.reciprocal(rho_bar))
    assert feedback_influx(y, cfg) == y


def test_equilibrium_is_compatible():
    cfg = ClosedLoopConfig(1.0, 0.3, VelocityModel.reciprocal(1.0))
    rep = check_c1_compatibility(cfg, 1.0, 1.0, 0.0, 0.0, 1.0)
    assert rep.passed
    assert rep.order0_residual == 0.0 and rep.order1_residual == 0.0


def test_incompatible_profile_detected():
    cfg = ClosedLoopConfig(0.0, 0.25, VelocityModel.reciprocal(0.0))
    rep = check_profile_compatibility(cfg, lambda x: 1.0 + x, lambda x: 1.0)
    assert not rep.passed
    # lam(W) (rho(0) - k rho(1)) with W = 3/2
    assert rep.order0_residual == pytest.approx((1.0 - 0.25 * 2.0) / 2.5, abs=1e-12)
    # lam(W) (1 - k) - lam'(W) (rho(0) - rho(1)) (rho(0) - k rho(1))
    r1 = 0.75 / 2.5 - (1.0 / 2.5 ** 2) * 0.5
    assert rep.order1_residual == pytest.approx(abs(r1), abs=1e-12)


def test_compatible_profile_at_zero_gain():
    # rho_bar = 0, k = 0: rho(0) = 0 and rho'(0) = 0 suffice
    cfg = ClosedLoopConfig(0.0, 0.0, VelocityModel.reciprocal(0.0))
    rep = check_profile_compatibility(cfg, lambda x: x * x, lambda x: 2 * x)
    assert rep.passed
