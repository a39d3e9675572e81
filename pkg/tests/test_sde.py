import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from frozenmix.field import CoefficientField, constant_field, corpus_field
from frozenmix.functions import bump, constant, corpus_functions, gaussian, poly_bump
from frozenmix.sde import (
    FactorizationError,
    SimScheme,
    SimulationError,
    bias_order,
    factor_diffusion,
    marginal_covariance,
    martingale_residual,
    simulate_levels,
    simulate_resolvent,
    uniqueness_gap,
)

from .conftest import spd

ID1 = corpus_field("identity-1d")


def test_factor_examples():
    np.testing.assert_allclose(factor_diffusion(np.eye(2), "cholesky"), math.sqrt(2) * np.eye(2), rtol=1e-15)
    np.testing.assert_allclose(factor_diffusion([[2.0, 0.0], [0.0, 8.0]], "spectral"), np.diag([2.0, 4.0]), rtol=1e-15)


@given(seed=st.integers(0, 10_000), d=st.integers(1, 3), method=st.sampled_from(["cholesky", "spectral"]))
def test_factor_reconstruction(seed, d, method):
    a = spd(np.random.default_rng(seed), d)
    s = factor_diffusion(a, method)
    assert np.linalg.norm(s @ s.T - 2 * a) <= 1e-12 * max(1.0, np.linalg.norm(a))
    if method == "cholesky":
        assert np.array_equal(s, np.tril(s))
    else:
        assert np.allclose(s, s.T, atol=1e-14)


def test_factor_rejects_non_spd():
    with pytest.raises(FactorizationError):
        factor_diffusion([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        factor_diffusion(np.eye(2), "qr")


def test_scheme_validation():
    with pytest.raises(ValueError):
        SimScheme(n_paths=100)
    with pytest.raises(ValueError):
        SimScheme(dt=0.0)
    with pytest.raises(ValueError):
        SimScheme(factorization="lu")
    with pytest.raises(ValueError):
        SimScheme(horizon=1.0).check_lambda(4.0)
    s = SimScheme(factorization="spectral", dt=0.01, seed=3)
    assert SimScheme.from_dict(s.to_dict()) == s


def test_constant_payoff():
    c, lam = 0.7, 2.0
    r = simulate_resolvent(corpus_field("smooth-2d"), constant(2, c), lam, [0.3, 0.0], SimScheme(dt=0.01, n_paths=10_000))
    assert abs(r.value.value - c / lam) <= r.value.abs_error + r.value.detail["bias"]


def test_green_function_oracle():
    lam = 1.0
    g = gaussian(1, 0.5, center=0.3)
    sq = math.sqrt(lam)
    ref = integrate.quad(lambda y: math.exp(-sq * abs(y)) / (2 * sq) * g([y]), -6, 6, points=[0.0], limit=200)[0]
    r = simulate_resolvent(ID1, g, lam, [0.0], SimScheme(dt=0.02, horizon=20.0, n_paths=40_000, seed=11))
    assert abs(r.value.value - ref) <= r.value.abs_error + r.value.detail["bias"]


def test_determinism_and_seed_dependence():
    g = bump(1, 2.0)
    s = SimScheme(dt=0.05, horizon=10.0, n_paths=10_000, seed=4)
    a = simulate_resolvent(corpus_field("holder-1d-a0.5"), g, 2.0, [0.0], s)
    b = simulate_resolvent(corpus_field("holder-1d-a0.5"), g, 2.0, [0.0], s)
    c = simulate_resolvent(corpus_field("holder-1d-a0.5"), g, 2.0, [0.0], SimScheme(dt=0.05, n_paths=10_000, seed=5))
    assert a.value.value == b.value.value
    assert a.value.value != c.value.value


def test_zero_function_residual():
    est, bias = martingale_residual(ID1, bump(1, 1.0, amplitude=0.0), 2.0, [0.0], SimScheme(n_paths=10_000))
    assert (est.value, bias) == (0.0, 0.0)


def test_martingale_residual_within_bars():
    f = poly_bump(1, 1.5, center=0.2)
    for fld in (ID1, corpus_field("holder-1d-a0.5")):
        est, bias = martingale_residual(fld, f, 2.0, [0.1], SimScheme(dt=0.01, n_paths=20_000, seed=2))
        assert abs(est.value) <= est.abs_error + bias


def test_step_bias_is_first_order():
    rep = bias_order(ID1, gaussian(1, 0.7), 2.0, [0.0], SimScheme(dt=0.01, horizon=10.0, n_paths=10_000), halvings=2)
    assert rep.passed, rep.ratios


def test_same_scheme_gap_is_zero():
    s = SimScheme(dt=0.05, n_paths=10_000)
    rep = uniqueness_gap(corpus_field("holder-1d-a0.5"), corpus_functions(1)[:3], 2.0, [0.0], s, s)
    assert rep.theta_hat == 0.0 and rep.passed


def test_constant_field_factorizations_agree():
    fld = constant_field([[1.5, 0.4], [0.4, 0.8]])
    a = SimScheme("cholesky", dt=0.05, n_paths=20_000, seed=1)
    b = SimScheme("spectral", dt=0.05, n_paths=20_000, seed=2)
    rep = uniqueness_gap(fld, corpus_functions(2)[:4], 2.0, [0.0, 0.0], a, b)
    assert rep.passed, rep.rows


@pytest.mark.parametrize("method", ["cholesky", "spectral"])
@pytest.mark.parametrize("t", [0.5, 1.0])
def test_marginal_covariance(method, t):
    a = np.array([[1.5, 0.4], [0.4, 0.8]])
    cov, ref = marginal_covariance(constant_field(a), [0.0, 0.0], t, SimScheme(method, dt=t, n_paths=400_000, seed=9))
    np.testing.assert_allclose(ref, 2 * a * t)
    assert np.linalg.norm(cov - ref) <= 0.01 * np.linalg.norm(ref)


def test_blow_up_is_reported():
    def explode(points):
        with np.errstate(over="ignore"):
            return np.exp(np.minimum(np.abs(points[:, 0]) * 400, 1e6))[:, None, None] * np.ones((1, 1, 1))

    fld = CoefficientField(1, explode, 1.0, 1.0, 0.0, 1.0, name="explode")
    with pytest.raises(SimulationError, match="seed 6"):
        simulate_levels(fld, [lambda x: x[:, 0]], 1.0, [0.5], SimScheme(dt=0.1, horizon=20.0, n_paths=10_000, seed=6))


def test_path_log(tmp_path):
    path = tmp_path / "paths.csv"
    simulate_levels(ID1, [lambda x: x[:, 0]], 2.0, [0.0], SimScheme(dt=0.1, n_paths=10_000), path_log=str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,payoff0" and len(lines) == 10_001
