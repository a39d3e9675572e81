import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from frozenmix.field import SymPosDefMatrix, constant_field, corpus_field
from frozenmix.functions import bump, poly_bump
from frozenmix.integrate import IntegrationSpec
from frozenmix.kernel import KernelParams, transition_apply
from frozenmix.parametrix import (
    MixtureQuery,
    UnreachableThresholdError,
    approx_resolvent,
    contraction_check,
    dominating_ratio,
    frozen_discrepancy,
    frozen_identity_residuals,
    identity_check,
    j_eps,
    lambda0,
    mixture_apply,
    prop21_verify,
    prop22_verify,
    prop23_verify,
    threshold_integral,
)

HOLDER1 = corpus_field("holder-1d-a0.5")
HOLDER2 = corpus_field("holder-2d-a0.5")
ID1 = corpus_field("identity-1d")


# -- mixtures --------------------------------------------------------------------------


def test_mixture_on_constant_field_is_the_semigroup():
    a = np.array([[1.3, 0.2], [0.2, 0.7]])
    fld = constant_field(a)
    g = bump(2, 1.5, center=[0.2, -0.3])
    for tau in (0.05, 0.5):
        x = np.array([0.4, 0.1])
        mix = mixture_apply(MixtureQuery(fld, g, tau, x))
        ref = transition_apply(KernelParams(SymPosDefMatrix.from_array(a), tau, 1), g, x)
        assert abs(mix.value - ref.value) <= mix.abs_error + ref.abs_error + 1e-12


def test_mixture_convention_bridge():
    g = bump(2, 2.0, center=[0.3, 0.0])
    x = np.array([0.5, -0.2])
    for tau in (0.01, 0.3, 2.0):
        v1 = mixture_apply(MixtureQuery(HOLDER2, g, tau, x, kappa=1)).value
        v2 = mixture_apply(MixtureQuery(HOLDER2, g, tau / 2, x, kappa=2)).value
        assert v2 == pytest.approx(v1, rel=1e-8)


def test_mixture_query_validation():
    g = bump(1)
    with pytest.raises(ValueError):
        MixtureQuery(ID1, g, 0.0, [0.0])
    with pytest.raises(ValueError):
        MixtureQuery(ID1, bump(2), 1.0, [0.0])


def test_mixture_far_from_support_obeys_tail_bound():
    g = bump(1, 1.0, center=3.0)
    for tau in (0.05, 0.1, 0.2):
        dist = 2.0
        n = dist / math.sqrt(tau)
        est = mixture_apply(MixtureQuery(HOLDER1, g, tau, [0.0]))
        # dominating Gaussian N(0, tau Lambda_M) scaled by the density ratio
        tail = dominating_ratio(HOLDER1) * 2 * stats.norm.sf(n / math.sqrt(HOLDER1.lambda_max))
        assert abs(est.value) <= tail * g.sup_norm + est.abs_error


def test_mixture_ladder_converges_to_g():
    g = poly_bump(1, 2.0, center=0.1)
    rep = prop22_verify(HOLDER1, g, [[0.5], [-0.8]], k_max=14)
    assert rep.checks["final_diff"] and rep.checks["bounded"] and rep.checks["trend"]
    assert np.all(rep.diffs[:, -1] <= 1e-2)


# -- mass, tail and moment integrals -----------------------------------------------------------


def test_prop21_identity_exact_values():
    ts, ns = [0.01, 1.0, 10.0], [1.0, 2.0, 3.0]
    rep = prop21_verify(ID1, ts, [[0.0], [1.3]], ns, [1.0])
    np.testing.assert_allclose(rep.mass, 1.0, atol=1e-10)
    np.testing.assert_allclose(rep.tail, np.broadcast_to(2 * stats.norm.sf(ns), rep.tail.shape), atol=1e-10)
    np.testing.assert_allclose(rep.moments[..., 0, 0], 1.0, atol=1e-10)
    assert rep.passed


def test_prop21_holder_mass_bound():
    xs = np.stack(np.meshgrid(np.linspace(-2, 2, 5), np.linspace(-2, 2, 5)), -1).reshape(-1, 2)
    rep = prop21_verify(HOLDER2, np.logspace(-3, 1, 5), xs, [1.0, 2.0, 3.0], [0.5, 1.0], tail_x=xs[:3])
    assert np.all(rep.mass + rep.mass_err <= dominating_ratio(HOLDER2) + 1e-3)
    assert rep.passed
    assert rep.c2_hat > 0


# -- the discrepancy Phi -------------------------------------------------------------------------


def test_discrepancy_vanishes_for_constant_field():
    fld = constant_field([[2.0, 0.3], [0.3, 1.0]])
    for t in (1e-3, 1.0):
        assert frozen_discrepancy(fld, 0, 1, t, [0.2, 0.4]).value == 0.0


def test_prop23_scaling_holder_1d():
    rep = prop23_verify(HOLDER1, np.logspace(-4, -1, 7), np.logspace(1, 3, 5), np.linspace(-2, 2, 21)[:, None])
    assert rep.slope_small >= 0.5 / 2 - 1 - 0.05
    assert rep.slope_large <= -1 + 0.05
    assert rep.checks["phi_le_genbnd"] and rep.checks["genbnd_le_chain"]
    assert 0 < rep.c4_hat < math.inf and 0 < rep.c4p_hat < math.inf


def test_discrepancy_sweep_agrees_with_pointwise():
    with pytest.raises(ValueError):
        prop23_verify(HOLDER1, [1e-2], [10.0], [[0.3]])
    rep = prop23_verify(HOLDER1, [1e-2, 1e-1], [10.0, 20.0], [[0.3]])
    direct = frozen_discrepancy(HOLDER1, 0, 0, 1e-2, [0.3])
    # adaptive quadrature split at the kinks of |a(y) - a(x)| and of |D^2 p|
    a = lambda y: 1 + 0.5 * min(1.0, abs(y) ** 0.5)

    def phi(y):
        s = 1e-2 * a(y)
        p = math.exp(-((y - 0.3) ** 2) / (2 * s)) / math.sqrt(2 * math.pi * s)
        return abs(a(y) - a(0.3)) * abs(p * ((y - 0.3) ** 2 / s**2 - 1 / s))

    ref = integrate.quad(phi, -3, 3.6, points=[-1, 0, 0.2, 0.3, 0.4, 1], limit=500, epsabs=1e-12)[0]
    assert abs(direct.value - ref) <= direct.abs_error
    assert abs(rep.grid.phi[0, 0, 0, 0] - ref) <= rep.grid.phi_err[0, 0, 0, 0]


# -- approximate resolvent and J -------------------------------------------------------------------


def test_approx_resolvent_tends_to_classical_resolvent():
    g = bump(1, 1.5, center=0.2)
    for lam in (1.0, 4.0):
        sq = math.sqrt(lam)
        for x in (0.0, 0.9, 2.5):
            ref = integrate.quad(lambda y: math.exp(-sq * abs(x - y)) / (2 * sq) * g([y]), -1.3, 1.7, points=[x], limit=200)[0]
            est = approx_resolvent(ID1, g, lam, 1e-6, [x])
            assert abs(est.value - ref) <= est.abs_error + 1e-6


def test_approx_resolvent_decays_in_lambda():
    g = bump(2, 2.0)
    vals = [abs(approx_resolvent(HOLDER2, g, lam, 1e-2, [0.1, 0.2]).value) for lam in (1.0, 2.0, 4.0, 8.0, 16.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert all(v <= g.sup_norm / lam * (1 + 1e-6) for v, lam in zip(vals, (1.0, 2.0, 4.0, 8.0, 16.0)))


def test_approx_resolvent_of_zero_is_zero():
    zero = bump(1, 1.0, amplitude=0.0)
    est = approx_resolvent(HOLDER1, zero, 2.0, 1e-2, [0.0])
    assert est.value == 0.0


def test_j_vanishes_for_constant_field():
    est = j_eps(ID1, bump(1), 4.0, 1e-3, [0.0])
    assert (est.value, est.abs_error) == (0.0, 0.0)


def test_j_rejects_bad_parameters():
    with pytest.raises(ValueError):
        j_eps(HOLDER1, bump(1), 0.0, 1e-3, [0.0])


# -- resolvent identities ------------------------------------------------------------------------------


def test_frozen_identity_residual_and_refinement():
    res, p_eps = frozen_identity_residuals(np.eye(1), 4.0, 1e-3, [0.0], [0.0])
    assert abs(res[-1]) <= 1e-5
    floor = 64 * np.finfo(float).eps * max(p_eps, 1.0) * 5
    assert all(abs(b) <= abs(a) + floor for a, b in zip(res, res[1:]))


def test_identity_check_constant_and_holder():
    g = bump(1, 1.5)
    for fld in (ID1, HOLDER1):
        rep = identity_check(fld, g, 4.0, 1e-3, [[0.0], [0.7]])
        assert rep.passed, rep.decomposition_rows
    with pytest.raises(ValueError):
        identity_check(ID1, g, 4.0, 1e-3, [[0.0]], kappa=1)


# -- the threshold lambda_0 ----------------------------------------------------------------------------


def _b_oracle(lam, alpha, d, c4):
    f = lambda t: math.exp(-lam * t) * min(t ** (alpha / 2 - 1), 1 / t)
    return d * d * c4 * (integrate.quad(f, 0, 1, limit=200)[0] + integrate.quad(f, 1, np.inf, limit=200)[0])


@pytest.mark.parametrize("alpha,d,c4", [(1.0, 1, 1.0), (0.5, 2, 0.3), (0.25, 1, 0.05)])
def test_threshold_integral_matches_quadrature(alpha, d, c4):
    for lam in (0.3, 2.0, 50.0):
        assert threshold_integral(lam, alpha, d, c4) == pytest.approx(_b_oracle(lam, alpha, d, c4), rel=1e-7)


def test_lambda0_golden_and_oracle():
    lam0 = lambda0(1.0, 1, 1.0)
    ref = optimize.brentq(lambda l: _b_oracle(l, 1.0, 1, 1.0) - 0.5, 1.0, 100.0, xtol=1e-12)
    assert lam0 == pytest.approx(ref, rel=1e-8)
    assert lam0 == pytest.approx(12.56637014802744, rel=1e-9)


def test_lambda0_limits_and_monotonicity():
    assert threshold_integral(1e-8, 0.5, 2, 0.1) > 0.5
    assert threshold_integral(2.0**60, 0.5, 2, 0.1) < 0.5
    assert lambda0(0.5, 2, 0.2) > lambda0(0.5, 2, 0.1)
    with pytest.raises(ValueError):
        lambda0(1.5, 1, 1.0)
    with pytest.raises(UnreachableThresholdError):
        lambda0(0.01, 2, 1e6, max_log2=20)


# -- contraction -----------------------------------------------------------------------------------------


def test_contraction_constant_field_is_trivial():
    rep = contraction_check(ID1, bump(1), [1e-2], np.linspace(-2, 2, 5)[:, None], [1e-2, 1.0, 10.0])
    assert rep.passed
    assert rep.j_sup == 0.0 and rep.c4_hat == 0.0


def test_contraction_holder_1d():
    spec = IntegrationSpec(time_nodes=4, panel_nodes=3, window=7.0, horizon_factor=8.0)
    rep = contraction_check(
        HOLDER1, bump(1, 2.0), [1e-2, 1e-3], np.linspace(-3, 3, 9)[:, None], np.logspace(-4, 3, 15), spec=spec
    )
    assert rep.lambda0_hat is not None and rep.lam == pytest.approx(2 * rep.lambda0_hat)
    assert rep.ratio <= 0.5
    assert rep.checks["majorant"]
