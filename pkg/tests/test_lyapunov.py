import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nonlocal_feedback import lyapunov as ly
from nonlocal_feedback.core_model import ClosedLoopConfig, VelocityModel
from nonlocal_feedback.experiments import linear_regime_config, linear_regime_initial
from nonlocal_feedback.solver import DensityField, simulate

fields = arrays(np.float64, st.integers(4, 64), elements=st.floats(-5.0, 5.0))


def _unit(n=100, rho_bar=0.0):
    return DensityField(0.0, np.full(n, rho_bar + 1.0))


def test_exp_weights_exact():
    w = ly.exp_weights(10, 1.0)
    assert w.sum() == pytest.approx(1.0 - math.exp(-1.0), rel=1e-15)
    np.testing.assert_allclose(ly.exp_weights(5, 0.0), np.full(5, 0.2))


def test_lyap_L_examples():
    assert ly.lyap_L(DensityField.constant(0.7, 20), 0.7, 1.0, 1.0) == 0.0
    assert ly.lyap_L(_unit(), 0.0, 0.0, 0.0) == pytest.approx(1.0, rel=1e-15)
    assert ly.lyap_L(_unit(37, 2.0), 2.0, 1.0, 1.0) == pytest.approx(1.6321205588285577, rel=1e-14)


def test_xi_and_V_examples():
    f = _unit(50, 0.5)
    np.testing.assert_allclose(ly.xi_field(f, 0.5, 0.0).cells, 1.0)
    np.testing.assert_allclose(ly.xi_field(f, 0.5, 1.0).cells, 2.0)
    np.testing.assert_allclose(ly.xi_field(f, 0.5, -0.3).cells, 0.7)
    assert ly.lyap_V1(f, 0.5, 1.0) == pytest.approx(2.0)
    assert ly.lyap_V2(f, 0.5, 1.0) == pytest.approx(4 * (1 - math.exp(-1)), rel=1e-14)
    eq = DensityField.constant(0.5, 50)
    assert ly.lyap_V(eq, 0.5, 1.0, 0.3, 1.0) == 0.0


@pytest.mark.parametrize("d,k,A", [(0.0, 0.0, 1e-6), (1.0, 0.0, 1.2642411176571153),
                                   (2.0, 0.5, 1.5142411176571153)])
def test_constant_A(d, k, A):
    assert ly.constant_A(d, k) == pytest.approx(A, rel=1e-14)


def test_select_beta_examples():
    c = ly.select_beta(0.0, 0.0)
    assert c.beta == 1.0 and c.a == 0.0 and c.valid
    c = ly.small_d_case(0.5, 0.0, 0.1)
    assert c.a == pytest.approx(0.45241870901797976, rel=1e-14)
    c = ly.select_beta(0.99, 0.0)
    assert c.valid and c.beta < 1.0
    assert 1 - 0.99 ** 2 * math.expm1(c.beta) ** 2 * math.exp(-c.beta) / c.beta ** 2 > 0


@given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
@settings(max_examples=80)
def test_select_beta_satisfies_constraints(d, k):
    c = ly.select_beta(d, k)
    b = c.beta
    assert c.a > -b / math.expm1(b)
    assert math.exp(-b) > k * k
    assert c.margin > 0 and c.rate_factor > 0


@pytest.mark.parametrize("d,k", [(1.0, 0.0), (-0.5, 1.0), (0.2, -1.3)])
def test_small_d_rejects_out_of_regime(d, k):
    with pytest.raises(ly.LyapunovCaseError):
        ly.select_beta(d, k)


def test_case_selection():
    assert ly.choose_case(0.5, 0.3).name == "small-d"
    assert ly.choose_case(1.5, 0.3).name == "large-d"
    with pytest.raises(ly.LyapunovCaseError):
        ly.choose_case(-1.5, 0.3)
    with pytest.raises(ly.LyapunovCaseError):
        ly.large_d_case(-0.2, 0.3)


@given(fields, st.floats(-0.99, 0.99), st.floats(-0.99, 0.99), st.floats(-2.0, 2.0))
@settings(max_examples=80)
def test_small_d_coercivity(dev, d, k, rho_bar):
    c = ly.select_beta(d, k)
    f = DensityField(0.0, dev + rho_bar)
    n2 = float((dev * dev).sum() / dev.size)
    L = ly.lyap_L(f, rho_bar, c.beta, c.a)
    tol = 1e-12 * (1 + n2)
    assert c.C1 * n2 - tol <= L <= c.C4 * n2 + tol


@given(fields, st.sampled_from([1.0, 1.5, 2.0]), st.floats(-0.95, 0.95))
@settings(max_examples=80)
def test_large_d_equivalence_chain(dev, d, k):
    c = ly.large_d_case(d, k)
    f = DensityField(0.0, dev)
    n2 = float((dev * dev).sum() / dev.size)
    V2 = ly.lyap_V2(f, 0.0, d)
    V = ly.lyap_V(f, 0.0, d, k, c.A)
    tol = 1e-12 * (1 + n2)
    assert c.B1 * n2 <= c.B2 * V2 + tol
    assert c.B2 * V2 <= V + tol
    assert V <= c.B3 * V2 + tol
    assert c.B3 * V2 <= c.B4 * n2 + tol


@given(fields, st.floats(0.05, 3.0))
def test_weighted_cauchy_schwarz(dev, beta):
    n = dev.size
    w = ly.exp_weights(n, beta)
    W = dev.sum() / n
    K = ly.weighted_cs_constant(n, beta)
    assert K <= math.expm1(beta) / beta * (1 + 1e-14)
    assert W * W <= K * np.dot(w, dev * dev) * (1 + 1e-12) + 1e-300


@pytest.mark.parametrize("beta", [0.25, 1.0, 2.0])
def test_cauchy_schwarz_equality_case(beta):
    n = 200
    w = ly.exp_weights(n, beta)
    dev = (1.0 / n) / w  # discrete analogue of exp(beta x)
    W = dev.sum() / n
    assert W * W == pytest.approx(ly.weighted_cs_constant(n, beta) * np.dot(w, dev * dev), rel=1e-12)
    cont = DensityField.from_profile(lambda x: np.exp(beta * x), 4000).cells
    w = ly.exp_weights(4000, beta)
    ratio = (cont.sum() / 4000) ** 2 / np.dot(w, cont * cont)
    assert ratio == pytest.approx(math.expm1(beta) / beta, rel=1e-6)


def test_monitor_equilibrium_is_zero():
    cfg = ClosedLoopConfig(1.0, 0.3, VelocityModel.reciprocal(1.0), n_cells=40, t_final=2.0)
    traj = simulate(cfg, DensityField.constant(1.0, 40))
    m = ly.monitor(traj, ly.select_beta(cfg.d, 0.3))
    assert np.all(m.values == 0.0) and m.monotone() and m.max_increase == 0.0


@pytest.mark.parametrize("d,k", [(-0.5, 0.3), (1.5, 0.3)])
def test_linear_regime_monitor(d, k, tmp_path):
    cfg = linear_regime_config(d, k, n_cells=100, t_final=5.0)
    traj = simulate(cfg, linear_regime_initial(100))
    m = ly.monitor(traj, ly.choose_case(d, k))
    assert m.max_increase <= 1e-10 * m.values[0]
    p = tmp_path / "m.csv"
    ly.write_monitor_csv(m, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,functional,ratio" and len(lines) == len(traj) + 1


def test_nonlinear_l2_nonincreasing_at_zero_equilibrium():
    cfg = ClosedLoopConfig(0.0, -0.6, VelocityModel.exponential(1.0, -1.0, 0.0), n_cells=100, t_final=4.0)
    traj = simulate(cfg, DensityField.from_profile(lambda x: 1 + np.sin(5 * x), 100))
    assert np.all(np.diff(traj.l2_norm) <= 1e-12)


def test_fit_exact_exponential():
    t = np.linspace(0.0, 10.0, 100)
    fit = ly.fit_exponential(t, 3.0 * np.exp(-0.7 * t))
    assert fit.alpha == pytest.approx(0.7, abs=1e-10)
    assert fit.c == pytest.approx(3.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
    assert fit.window[0] >= 1.0
    rec = json.loads(fit.to_json())
    assert set(rec) >= {"alpha", "c", "r_squared", "window"}


def test_fit_zero_trajectory_reports_extinction():
    cfg = ClosedLoopConfig(0.0, 0.5, VelocityModel.reciprocal(0.0), n_cells=20, t_final=1.0)
    traj = simulate(cfg, DensityField.constant(0.0, 20))
    fit = ly.fit_decay_rate(traj)
    assert fit.extinct and math.isnan(fit.alpha)


def test_fit_linear_regime_rate():
    cfg = linear_regime_config(0.0, 0.5, n_cells=200, t_final=20.0)
    fit = ly.fit_decay_rate(simulate(cfg, linear_regime_initial(200)))
    assert fit.alpha == pytest.approx(math.log(2.0), rel=0.1)


def test_inf_speed():
    assert ly.inf_speed(VelocityModel.reciprocal(0.0), 1.0) == pytest.approx(0.5)
    # increasing speed law: the infimum sits at s = -R
    assert ly.inf_speed(VelocityModel.exponential(1.0, 1.0, 0.0), 2.0) == pytest.approx(math.exp(-2.0))


def test_fit_stops_at_extinction_threshold():
    # fast decay crosses the 1e-8 threshold well before t_final
    cfg = linear_regime_config(1.0, 0.2, n_cells=200, t_final=20.0)
    traj = simulate(cfg, linear_regime_initial(200))
    assert traj.extinction_time is not None and traj.extinction_time < 20.0
    fit = ly.fit_decay_rate(traj)
    assert fit.extinct and fit.window[1] == traj.extinction_time
    assert fit.alpha == pytest.approx(1.5330, rel=0.05)
