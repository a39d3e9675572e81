import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frozenmix.field import (
    CORPUS,
    FieldSampling,
    SymPosDefMatrix,
    apply_generator,
    constant_field,
    corpus_field,
    eval_field,
    expression_field,
    tensor_grid,
    validate_field,
)
from frozenmix.functions import gaussian, quadratic

from .conftest import spd

coords = st.floats(-50, 50, allow_nan=False)


def test_identity_field_eval():
    m = eval_field(corpus_field("identity-2d"), [3.0, -1.0])
    np.testing.assert_array_equal(m.entries, np.eye(2))
    np.testing.assert_array_equal(m.inv, np.eye(2))
    assert m.det == 1.0


def test_holder_field_at_kink_and_saturation():
    f = corpus_field("holder-1d-a0.5")
    assert eval_field(f, [0.0]).entries[0, 0] == 1.0
    m = eval_field(f, [4.0])
    assert m.entries[0, 0] == 1.5
    assert m.inv[0, 0] == pytest.approx(2.0 / 3.0, rel=1e-15)


def test_eval_rejects_bad_input():
    f = corpus_field("identity-2d")
    with pytest.raises(ValueError):
        eval_field(f, [np.nan, 0.0])
    with pytest.raises(ValueError):
        eval_field(f, [0.0, 0.0, 0.0])


@pytest.mark.parametrize("bad", [[[1.0, 0.5], [0.4, 1.0]], [[1.0, 2.0], [2.0, 1.0]], [[np.inf]]])
def test_spd_rejects(bad):
    with pytest.raises(ValueError):
        SymPosDefMatrix.from_array(bad)


def test_spd_inverse_invariant(rng):
    for d in (1, 2, 3):
        m = SymPosDefMatrix.from_array(spd(rng, d))
        assert np.array_equal(m.entries, m.entries.T)
        np.testing.assert_allclose(m.inv @ m.entries, np.eye(d), atol=1e-12)
        assert m.det == pytest.approx(np.linalg.det(m.entries), rel=1e-12)


@pytest.mark.parametrize("name", CORPUS)
def test_corpus_fields_validate(name):
    rep = validate_field(corpus_field(name), FieldSampling(grid_n=21, n_pairs=2000))
    assert rep.passed, [c for c in rep.checks if not c.passed]


@pytest.mark.parametrize("name", CORPUS)
@given(x=st.lists(coords, min_size=2, max_size=2))
def test_corpus_eigenvalues_within_declared_bounds(name, x):
    f = corpus_field(name)
    eig = np.linalg.eigvalsh(eval_field(f, x[: f.dim]).entries)
    assert eig[0] >= f.lambda_min * (1 - 1e-12)
    assert eig[-1] <= f.lambda_max * (1 + 1e-12)


def test_identity_validation_exact():
    rep = validate_field(corpus_field("identity-1d"), FieldSampling(grid_n=11, n_pairs=100))
    assert rep.passed
    assert rep.eig_min == rep.eig_max == 1.0
    assert rep["holder"].worst == 0.0


def test_misdeclared_holder_exponent_fails_with_witness():
    f = expression_field(1, [["1 + 0.5*min(1, pow(abs(x1), 0.5))"]], 1.0, 1.5, 0.5, 1.0)
    rep = validate_field(f, FieldSampling(grid_n=41, n_pairs=1000))
    chk = rep["holder"]
    assert not chk.passed
    # oracle: the modulus |a(x) - a(0)| / |x| on a fine 1-d grid near the kink is unbounded
    xs = np.logspace(-6, 0, 200)
    assert np.max(0.5 * np.sqrt(xs) / xs) > 0.5
    wx, wy = map(np.asarray, chk.witness)
    assert abs(f.matrices(wx[None])[0, 0, 0] - f.matrices(wy[None])[0, 0, 0]) > 0.5 * abs(wx - wy).max()


def test_diag_sin_field_needs_c1_one():
    entries = [["1 + 0.5*sin(x1)", "0"], ["0", "1"]]
    # oracle: for |a - b| >= 1 the modulus saturates while 0.5 |sin a - sin b| reaches 1 at |a - b| = pi
    a = np.linspace(-5, 5, 2001)
    ratio = np.abs(0.5 * np.sin(a) - 0.5 * np.sin(a + np.pi))
    assert ratio.max() > 0.99
    ok = validate_field(expression_field(2, entries, 0.5, 1.5, 1.0, 1.0))
    assert ok.passed
    bad = validate_field(expression_field(2, entries, 0.5, 1.5, 0.5, 1.0))
    assert not bad["holder"].passed


def test_misdeclared_lambda_min_fails():
    f = expression_field(1, [["1 + 0.5*sin(x1)"]], 0.8, 1.5, 1.0, 1.0)
    rep = validate_field(f)
    assert not rep["elliptic_lower"].passed
    assert rep["elliptic_lower"].worst == pytest.approx(0.5, abs=1e-3)


def test_generator_trivial_cases():
    assert apply_generator(corpus_field("identity-2d"), quadratic(2, 0.5), [0.3, 7.0]) == pytest.approx(2.0)
    assert apply_generator(constant_field([[2.0]]), quadratic(1, 1.0), [1.7]) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        apply_generator(corpus_field("identity-1d"), quadratic(2), [0.0, 0.0])


def test_generator_matches_finite_differences():
    f = corpus_field("smooth-2d")
    g = gaussian(2, 0.8, center=[0.3, -0.2])
    x = np.zeros(2)

    def fd_hess(h):
        out = np.empty((2, 2))
        e = np.eye(2) * h
        for i in range(2):
            for j in range(2):
                out[i, j] = (g(x + e[i] + e[j]) - g(x + e[i] - e[j]) - g(x - e[i] + e[j]) + g(x - e[i] - e[j])) / (4 * h * h)
        return out

    h1, h2 = fd_hess(2e-3), fd_hess(1e-3)
    fd = np.sum(f.matrices(x[None])[0] * (h2 + (h2 - h1) / 3.0))
    assert apply_generator(f, g, x) == pytest.approx(fd, rel=1e-6)


@given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), x=st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_generator_linear(alpha, beta, x):
    f = corpus_field("rotation-2d")
    g1, g2 = gaussian(2, 1.0), gaussian(2, 0.5, center=[1.0, 0.0])
    x = np.asarray(x)
    combo = alpha * apply_generator(f, g1, x) + beta * apply_generator(f, g2, x)
    hess = alpha * g1.hess(x[None])[0] + beta * g2.hess(x[None])[0]
    direct = float(np.sum(f.matrices(x[None])[0] * hess))
    assert combo == pytest.approx(direct, rel=1e-12, abs=1e-14)


@given(c=st.floats(0.1, 10), x=st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_generator_scalar_field_is_scaled_laplacian(c, x):
    g = gaussian(2, 1.0)
    x = np.asarray(x)
    r2 = float(x @ x)
    laplacian = (r2 - 2.0) * np.exp(-0.5 * r2)
    assert apply_generator(constant_field(c * np.eye(2)), g, x) == pytest.approx(c * laplacian, rel=1e-12, abs=1e-14)


def test_tensor_grid_shape_and_order():
    g = tensor_grid(2, 3, 1.0)
    assert g.shape == (9, 2)
    np.testing.assert_array_equal(g[:3, 0], [-1.0, -1.0, -1.0])
    np.testing.assert_array_equal(g[:3, 1], [-1.0, 0.0, 1.0])
