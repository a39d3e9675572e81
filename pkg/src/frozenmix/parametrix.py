"""Frozen-at-target mixtures, the estimates they obey, and the approximate resolvent.

Notation: p^a(t, x, y) is the Gaussian kernel with covariance kappa t a, and
"frozen at the target" means a = a(y) with y the integration variable::

    F_tau g(x) = ∫ g(y) p^{a(y)}(tau, x, y) dy
    f_eps(x)   = ∫ G(lam, eps, x, y; a(y)) g(y) dy,   G = ∫_0^∞ e^{-lam s} p(s + eps) ds
    J_eps(x)   = ∫_0^∞ e^{-lam s} ∫ (a(y) - a(x)) : D²p^{a(y)}(s + eps, x, y) g(y) dy ds

With kappa = 2, (lam - L) f_eps = F_eps g + J_eps, and |J_eps| <= ||g|| / 2
once lam is past :func:`lambda0`.

Integrals against a compactly supported g use a Gauss-Legendre window
around x; integrals of the bare kernel over R^d (mass, moments, the
discrepancy Phi) use Gauss-Hermite in the coordinates of the dominating
Gaussian N(x, kappa t Lambda_M I). Every error bar is the gap between a
rule and the same rule with half (or double) the nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import special

from .field import CoefficientField
from .functions import TestFunction
from .integrate import (
    Estimate,
    IntegrationSpec,
    _detect_singularity,
    gauss_hermite_rule,
    integrate_spatial,
    laplace_rule,
    legendre_box_rule,
    mc_reduce,
    window_rule,
)
from .kernel import kernel_density, laplace_kernel

__all__ = [
    "MixtureQuery",
    "mixture_apply",
    "dominating_ratio",
    "Prop21Report",
    "prop21_verify",
    "Prop22Report",
    "prop22_verify",
    "frozen_discrepancy",
    "DiscrepancyGrid",
    "discrepancy_sweep",
    "Prop23Report",
    "prop23_verify",
    "ResolventTerms",
    "resolvent_terms",
    "approx_resolvent",
    "j_eps",
    "IdentityReport",
    "identity_check",
    "UnreachableThresholdError",
    "threshold_integral",
    "lambda0",
    "empirical_c4",
    "ContractionReport",
    "contraction_check",
]


def dominating_ratio(field: CoefficientField) -> float:
    """(Lambda_M / Lambda_m)^{d/2}: p^{a} <= this times the Lambda_M-Gaussian."""
    return (field.lambda_max / field.lambda_min) ** (field.dim / 2.0)


def _sigma(field: CoefficientField, tau: float, kappa: float) -> float:
    return math.sqrt(kappa * tau * field.lambda_max)


def _check_kappa(kappa):
    if kappa not in (1, 2):
        raise ValueError("kappa must be 1 or 2")


def _window_tail(field: CoefficientField, g: TestFunction, spec: IntegrationSpec) -> float:
    # mass of the dominating Gaussian outside the x ± W sigma box, times ||g||
    return dominating_ratio(field) * g.sup_norm * field.dim * math.erfc(spec.window / math.sqrt(2.0))


# -- mixtures -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixtureQuery:
    """∫ g(y) p^{a(y)}(tau, x, y) dy at one point; ``tau`` is passed as is (no squaring)."""

    field: CoefficientField
    g: TestFunction
    tau: float
    x: np.ndarray
    kappa: float = 1.0
    spec: IntegrationSpec = dc_field(default_factory=IntegrationSpec)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        _check_kappa(self.kappa)
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.shape != (self.field.dim,):
            raise ValueError(f"x must have shape ({self.field.dim},)")
        if self.g.dim != self.field.dim:
            raise ValueError("test function and field dimensions differ")
        self.g.box_radius  # raises unless g has (effective) compact support
        object.__setattr__(self, "x", x)


def mixture_apply(q: MixtureQuery) -> Estimate:
    """F_tau g(x). Not a probability average: the total mass of y -> p^{a(y)} need not be 1."""
    fld, g, x, spec = q.field, q.g, q.x, q.spec
    if spec.mode == "monte-carlo":
        local = spec.with_proposal(x, _sigma(fld, q.tau, q.kappa) ** 2 * np.eye(fld.dim))

        def integrand(y):
            _, A, det = fld.frozen(y)
            return g.value(y) * kernel_density(A, det, q.tau, q.kappa, y - x)

        return integrate_spatial(integrand, local, fld.dim)
    sigma = _sigma(fld, q.tau, q.kappa)
    vals = []
    for n in (spec.panel_nodes, 2 * spec.panel_nodes):
        y, w = window_rule(x, sigma, g.center, g.box_radius, spec, n)
        if y.shape[0] == 0:
            vals.append(0.0)
            continue
        _, A, det = fld.frozen(y)
        vals.append(float(np.sum(w * g.value(y) * kernel_density(A, det, q.tau, q.kappa, y - x))))
    err = abs(vals[1] - vals[0]) + _window_tail(fld, g, spec)
    return Estimate(vals[1], err, "quadrature", {"rule": "window", "sigma": sigma})


# -- Gauss-Hermite sweeps over (t, x) grids ----------------------------------------------


def _sweep(field: CoefficientField, xs: np.ndarray, rules, integrand, n_out: int):
    """Sum ``integrand`` over y = x + z for every x, once per (z, w) rule in ``rules``.

    ``integrand(z, a_y, A_y, det_y, a_x)`` returns ``(chunk, nodes, n_out)``.
    Returns the last rule's values and |difference| to the first.
    """
    a_x = field.matrices(xs)
    out = []
    for z, w in rules:
        chunk = max(1, (1 << 17) // w.size)
        res = np.empty((xs.shape[0], n_out))
        for s in range(0, xs.shape[0], chunk):
            y = xs[s : s + chunk, None, :] + z[None]
            a_y, A_y, det_y = field.frozen(y)
            vals = integrand(z, a_y, A_y, det_y, a_x[s : s + chunk, None])
            res[s : s + chunk] = np.einsum("cnk,n->ck", vals, w)
        out.append(res)
    return out[-1], np.abs(out[-1] - out[0])


def _gh_rules(d: int, var: float, n: int):
    return [gauss_hermite_rule(m, np.zeros(d), var * np.eye(d)) for m in (max(2, n // 2), n)]


def _gh_sweep(field: CoefficientField, t: float, xs: np.ndarray, kappa: float, n: int, integrand, n_out: int):
    """:func:`_sweep` with Gauss-Hermite rules (n and n/2 per axis) in N(0, kappa t Lambda_M I)."""
    return _sweep(field, xs, _gh_rules(field.dim, kappa * t * field.lambda_max, n), integrand, n_out)


def _moment_rule(n: int, d: int, axis: int, p: float, var: float):
    """Nodes/weights with sum(w h(z)) ≈ ∫ |z_axis|^{2p} h(z) dz.

    Along ``axis`` the factor |s|^{2p} exp(-s^2/2) becomes a generalized
    Gauss-Laguerre weight in u = s^2/2, so the cusp of |s|^{2p} at 0 is
    integrated exactly; other axes are Gauss-Hermite. Weights absorb the
    reciprocal Gaussian density, as in :func:`gauss_hermite_rule`.
    """
    sd = math.sqrt(var)
    u, wl = special.roots_genlaguerre(max(1, n // 2), p - 0.5)
    s = np.sqrt(2.0 * u)
    si = np.concatenate([s, -s])
    # |z|^{2p} exp(-z^2/2var) dz = sd^{2p+1} 2^{p-1/2} u^{p-1/2} e^{-u} du on each half-line
    logw = np.log(np.concatenate([wl, wl])) + (p - 0.5) * math.log(2.0) + (2 * p + 1) * math.log(sd)
    logw += 0.5 * si * si  # undo the exp(-s^2/2) that the generalized Laguerre weight carries
    zi, wi = sd * si, np.exp(logw)
    z1, w1 = gauss_hermite_rule(n, np.zeros(1), var * np.eye(1))
    axes = [z1[:, 0]] * d
    weights = [w1] * d
    axes[axis], weights[axis] = zi, wi
    mesh = np.meshgrid(*axes, indexing="ij")
    wmesh = np.meshgrid(*weights, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), np.prod([w.ravel() for w in wmesh], axis=0)


def _density_integrand(t, kappa):
    def integrand(z, a_y, A_y, det_y, a_x):
        return kernel_density(A_y, det_y, t, kappa, z)[..., None]

    return integrand


def _tail_rule(dim: int, r0: float, r1: float, h: float, n_r: int, n_theta: int):
    """Offsets and weights covering r0 < |z| < r1 (d = 1, 2)."""
    n_pan = max(1, int(math.ceil((r1 - r0) / h)))
    r, wr = legendre_box_rule([r0], [r1], [n_pan], n_r)
    r, wr = r[:, 0], wr
    if dim == 1:
        return np.concatenate([r, -r])[:, None], np.concatenate([wr, wr])
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    rr, th = np.meshgrid(r, theta, indexing="ij")
    ww = np.outer(wr * r, np.full(n_theta, 2.0 * np.pi / n_theta))
    z = np.stack([rr.ravel() * np.cos(th.ravel()), rr.ravel() * np.sin(th.ravel())], axis=-1)
    return z, ww.ravel()


def _tail_mass(field, t, x, radius, kappa, spec, n_r=8, n_theta=32):
    """∫_{|y-x| > radius} p^{a(y)}(t, x, y) dy with an n vs n/2 error bar."""
    d = field.dim
    sig_max = _sigma(field, t, kappa)
    sig_min = math.sqrt(kappa * t * field.lambda_min)
    r1 = radius + 12.0 * sig_max
    if d > 2:
        chol = sig_max

        def sampler(rng, size):
            z = chol * rng.standard_normal((size, d))
            _, A, det = field.frozen(x + z)
            logq = -0.5 * np.sum(z * z, axis=1) / sig_max**2 - 0.5 * d * np.log(2 * np.pi * sig_max**2)
            keep = np.sum(z * z, axis=1) > radius * radius
            return np.where(keep, kernel_density(A, det, t, kappa, z) * np.exp(-logq), 0.0)

        return mc_reduce(sampler, spec.n_samples, spec.seed)
    vals = []
    for nr, nt in ((n_r // 2, n_theta // 2), (n_r, n_theta)):
        z, w = _tail_rule(d, radius, r1, 0.5 * sig_min, nr, nt)
        _, A, det = field.frozen(x + z)
        vals.append(float(np.sum(w * kernel_density(A, det, t, kappa, z))))
    # beyond r1 the dominating Gaussian has mass below erfc(12/sqrt 2) ~ 1e-33
    return Estimate(vals[1], abs(vals[1] - vals[0]), "quadrature", {"rule": "tail"})


@dataclass
class Prop21Report:
    """(a) total mass, (b) Gaussian tail, (c) scaled coordinate moments of y -> p^{a(y)}(t, x, y)."""

    field: str
    kappa: float
    t_grid: np.ndarray
    x_grid: np.ndarray
    n_grid: np.ndarray
    p_list: tuple
    mass: np.ndarray
    mass_err: np.ndarray
    mass_bound: float
    mass_tol: float
    tail_x: np.ndarray
    tail: np.ndarray
    tail_err: np.ndarray
    c1_hat: float
    c2_hat: float
    moments: np.ndarray
    moments_err: np.ndarray
    c3_hat: dict
    c3_bound: dict
    checks: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def moment_bound(field: CoefficientField, p: float, kappa: float = 1.0) -> float:
    """(Lambda_M/Lambda_m)^{d/2} E[(kappa Lambda_M Z^2)^p] with Z standard normal."""
    return dominating_ratio(field) * (kappa * field.lambda_max) ** p * 2.0**p * math.gamma(p + 0.5) / math.sqrt(math.pi)


def prop21_verify(
    field: CoefficientField,
    t_grid,
    x_grid,
    n_grid,
    p_list,
    spec: IntegrationSpec | None = None,
    kappa: float = 1.0,
    gh_nodes: int = 32,
    moment_nodes: int = 16,
    tail_x=None,
    mass_tol: float = 1e-3,
) -> Prop21Report:
    """Evaluate the three integrals over every grid cell and compare with their analytic constants.

    The tail in (b) is over |y - x| > N sqrt(t), evaluated on ``tail_x``
    (default: the x-grid). (c_1, c_2) come from a least-squares fit of
    log max_{t,x} tail against N^2, with c_1 then raised until the fitted
    curve dominates every observation. Bound checks use value + error bar.
    """
    spec = spec or IntegrationSpec()
    _check_kappa(kappa)
    t_grid = np.asarray(t_grid, dtype=float)
    xs = np.asarray(x_grid, dtype=float).reshape(-1, field.dim)
    n_grid = np.asarray(n_grid, dtype=float)
    p_list = tuple(float(p) for p in p_list)
    tail_x = xs if tail_x is None else np.asarray(tail_x, dtype=float).reshape(-1, field.dim)
    d, n_p = field.dim, len(p_list)

    mass = np.empty((t_grid.size, xs.shape[0]))
    mass_err = np.empty_like(mass)
    mom = np.empty((t_grid.size, xs.shape[0], n_p, d))
    mom_err = np.empty_like(mom)
    for i, t in enumerate(t_grid):
        var = kappa * t * field.lambda_max
        v, e = _gh_sweep(field, t, xs, kappa, gh_nodes, _density_integrand(t, kappa), 1)
        mass[i], mass_err[i] = v[:, 0], e[:, 0]
        for k, p in enumerate(p_list):
            for ax in range(d):
                rules = [_moment_rule(m, d, ax, p, var) for m in (moment_nodes // 2, moment_nodes)]
                v, e = _sweep(field, xs, rules, _density_integrand(t, kappa), 1)
                mom[i, :, k, ax], mom_err[i, :, k, ax] = v[:, 0] / t**p, e[:, 0] / t**p

    tail = np.empty((t_grid.size, tail_x.shape[0], n_grid.size))
    tail_err = np.empty_like(tail)
    for i, t in enumerate(t_grid):
        for j, x in enumerate(tail_x):
            for k, nn in enumerate(n_grid):
                est = _tail_mass(field, t, x, nn * math.sqrt(t), kappa, spec)
                tail[i, j, k], tail_err[i, j, k] = est.value, est.abs_error
    worst = tail.max(axis=(0, 1))
    ok = worst > 0
    if np.count_nonzero(ok) >= 2:
        slope, _ = np.polyfit(n_grid[ok] ** 2, np.log(worst[ok]), 1)
        c2 = -float(slope)
        c1 = float(np.max(worst[ok] * np.exp(c2 * n_grid[ok] ** 2)))
    else:
        c1, c2 = float("nan"), float("nan")

    bound = dominating_ratio(field)
    c3_hat = {p: float(mom[:, :, k, :].max()) for k, p in enumerate(p_list)}
    c3_upper = {p: float((mom + mom_err)[:, :, k, :].max()) for k, p in enumerate(p_list)}
    c3_bound = {p: moment_bound(field, p, kappa) for p in p_list}
    checks = {
        "mass_bound": bool(np.all(mass + mass_err <= bound + mass_tol)),
        "tail_decay": bool(c2 > 0),
        "tail_monotone": bool(np.all(np.diff(tail, axis=-1) <= tail_err[..., 1:] + tail_err[..., :-1])),
        "moment_bound": all(c3_upper[p] <= c3_bound[p] * (1 + mass_tol) for p in p_list),
    }
    return Prop21Report(
        field.name, kappa, t_grid, xs, n_grid, p_list, mass, mass_err, bound, mass_tol,
        tail_x, tail, tail_err, c1, c2, mom, mom_err, c3_hat, c3_bound, checks,
    )


# -- pointwise convergence along a dyadic ladder ----------------------------------------


@dataclass
class Prop22Report:
    field: str
    g: str
    probes: np.ndarray
    taus: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    targets: np.ndarray
    final_tol: float
    sup_bound: float
    slopes: np.ndarray
    checks: dict

    @property
    def diffs(self) -> np.ndarray:
        return np.abs(self.values - self.targets[:, None])

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def prop22_verify(
    field: CoefficientField,
    g: TestFunction,
    probes,
    k_max: int = 14,
    spec: IntegrationSpec | None = None,
    kappa: float = 1.0,
    final_tol: float = 1e-2,
    bound_rtol: float = 1e-3,
) -> Prop22Report:
    """F_tau g(x) for tau = 2^0 .. 2^-k_max at each probe x.

    Convergence: |F - g(x)| at the last rung is at most ``final_tol`` and
    the least-squares slope of log|F - g(x)| against k is negative, with
    the last difference below the first. Boundedness: every |F| is at most
    (Lambda_M/Lambda_m)^{d/2} ||g|| (1 + bound_rtol).
    """
    spec = spec or IntegrationSpec()
    probes = np.asarray(probes, dtype=float).reshape(-1, field.dim)
    taus = 2.0 ** -np.arange(k_max + 1, dtype=float)
    vals = np.empty((probes.shape[0], taus.size))
    errs = np.empty_like(vals)
    for i, x in enumerate(probes):
        for k, tau in enumerate(taus):
            est = mixture_apply(MixtureQuery(field, g, tau, x, kappa, spec))
            vals[i, k], errs[i, k] = est.value, est.abs_error
    targets = g.value(probes)
    diffs = np.abs(vals - targets[:, None])
    ks = np.arange(taus.size, dtype=float)
    slopes = np.array([np.polyfit(ks, np.log(np.maximum(row, 1e-300)), 1)[0] for row in diffs])
    sup_bound = dominating_ratio(field) * g.sup_norm * (1 + bound_rtol)
    checks = {
        "final_diff": bool(np.all(diffs[:, -1] <= final_tol)),
        "trend": bool(np.all(slopes < 0) and np.all(diffs[:, -1] < diffs[:, 0])),
        "bounded": bool(np.all(np.abs(vals) <= sup_bound)),
    }
    return Prop22Report(field.name, g.name, probes, taus, vals, errs, targets, final_tol, sup_bound, slopes, checks)


# -- the discrepancy Phi_ij(t, x) --------------------------------------------------------


def frozen_discrepancy(
    field: CoefficientField, i: int, j: int, t: float, x, kappa: float = 1.0, spec: IntegrationSpec | None = None
) -> Estimate:
    """Phi_ij(t, x) = ∫ |a_ij(y) - a_ij(x)| |D_ij p^{a(y)}(t, x, y)| dy.

    Importance-weighted against N(x, kappa t Lambda_M I), which dominates
    every frozen kernel; Gauss-Hermite or Monte Carlo per ``spec.mode``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    _check_kappa(kappa)
    spec = spec or IntegrationSpec()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a_x = field.matrices(x[None])[0]
    s = kappa * t

    def integrand(y):
        a_y, A_y, det_y = field.frozen(y)
        z = y - x
        p = kernel_density(A_y, det_y, t, kappa, z)
        m = np.einsum("nij,nj->ni", A_y, z) / s
        h = p * (m[:, i] * m[:, j] - A_y[:, i, j] / s)
        return np.abs(a_y[:, i, j] - a_x[i, j]) * np.abs(h)

    return integrate_spatial(integrand, spec.with_proposal(x, s * field.lambda_max * np.eye(field.dim)), field.dim)


@dataclass
class DiscrepancyGrid:
    """Phi on a (t, x) grid, with two majorants evaluated on the same nodes.

    ``genbnd`` replaces |D_ij p| by p (kappa t)^{-1} [|y-x|^2 / (kappa t Lambda_m^2) + 1/Lambda_m];
    ``chain`` further bounds |a_ij(y) - a_ij(x)| by c1 min(1, |y-x|^alpha) and
    integrates through the scaled radial moments of the frozen kernel.
    """

    field: str
    kappa: float
    t: np.ndarray
    x: np.ndarray
    phi: np.ndarray
    phi_err: np.ndarray
    genbnd: np.ndarray
    chain: np.ndarray

    def phi_bar(self) -> np.ndarray:
        """max over x and (i, j), one value per t."""
        return self.phi.max(axis=(1, 2, 3))


def discrepancy_sweep(
    field: CoefficientField, t_grid, x_grid, kappa: float = 1.0, gh_nodes: int = 32
) -> DiscrepancyGrid:
    _check_kappa(kappa)
    t_grid = np.asarray(t_grid, dtype=float)
    xs = np.asarray(x_grid, dtype=float).reshape(-1, field.dim)
    d = field.dim
    lm = field.lambda_min
    alpha, c1 = field.holder_alpha, field.holder_c1
    qs = (1.0 + alpha / 2, alpha / 2, 1.0, 0.0)
    nt, nx = t_grid.size, xs.shape[0]
    phi = np.zeros((nt, nx, d, d))
    phi_err = np.zeros_like(phi)
    gen = np.zeros_like(phi)
    chain = np.zeros((nt, nx))
    if field.is_constant:
        # a(y) - a(x) vanishes identically, so every integrand is exactly zero
        return DiscrepancyGrid(field.name, kappa, t_grid, xs, phi, phi_err, gen, chain)
    for k, t in enumerate(t_grid):
        s = kappa * t

        def integrand(z, a_y, A_y, det_y, a_x):
            p = kernel_density(A_y, det_y, t, kappa, z)
            m = np.einsum("...ij,...j->...i", A_y, z) / s
            h = p[..., None, None] * (m[..., :, None] * m[..., None, :] - A_y / s)
            b = np.abs(a_y - a_x)
            r2 = np.sum(z * z, axis=-1)
            env = p / s * (r2 / (s * lm * lm) + 1.0 / lm)
            c = b.shape[0]
            cols = [(b * np.abs(h)).reshape(c, -1, d * d), (b * env[..., None, None]).reshape(c, -1, d * d)]
            cols += [(p * (r2 / t) ** q)[..., None] for q in qs]
            return np.concatenate(cols, axis=-1)

        v, e = _gh_sweep(field, t, xs, kappa, gh_nodes, integrand, 2 * d * d + len(qs))
        phi[k] = v[:, : d * d].reshape(nx, d, d)
        phi_err[k] = e[:, : d * d].reshape(nx, d, d)
        gen[k] = v[:, d * d : 2 * d * d].reshape(nx, d, d)
        m_hi, m_lo, m_1, m_0 = (v[:, 2 * d * d + i] for i in range(4))
        small = t ** (alpha / 2 - 1) * (m_hi / (kappa * lm * lm) + m_lo / lm)
        large = (m_1 / (kappa * lm * lm) + m_0 / lm) / t
        chain[k] = c1 / kappa * np.minimum(small, large)
    return DiscrepancyGrid(field.name, kappa, t_grid, xs, phi, phi_err, gen, chain)


def empirical_c4(grid: DiscrepancyGrid, alpha: float) -> tuple[float, float]:
    """(sup_{t<=1} t^{1-alpha/2} Phi_bar(t), sup_{t>=1} t Phi_bar(t)); 0 when a branch is empty."""
    pb = grid.phi_bar()
    small = grid.t <= 1.0
    c4 = float(np.max(pb[small] * grid.t[small] ** (1 - alpha / 2))) if np.any(small) else 0.0
    c4p = float(np.max(pb[~small] * grid.t[~small])) if np.any(~small) else 0.0
    return c4, c4p


@dataclass
class Prop23Report:
    field: str
    alpha: float
    grid: DiscrepancyGrid
    slope_small: float
    slope_small_x0: float
    slope_large: float
    c4_hat: float
    c4p_hat: float
    slope_tol: float
    checks: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def prop23_verify(
    field: CoefficientField,
    t_small,
    t_large,
    x_grid,
    kappa: float = 1.0,
    gh_nodes: int = 32,
    slope_tol: float = 0.05,
    majorant_rtol: float = 1e-12,
) -> Prop23Report:
    """Scaling of Phi: slope >= alpha/2 - 1 - tol on ``t_small``, t Phi bounded on ``t_large``.

    Slopes are least-squares fits of log Phi_bar against log t. Boundedness
    of t Phi on the large branch means the fitted slope of Phi is at most
    -1 + tol. The majorant chain Phi <= genbnd <= chain is checked cell by cell.
    """
    t_small = np.asarray(t_small, dtype=float)
    t_large = np.asarray(t_large, dtype=float)
    if t_small.size < 2 or t_large.size < 2:
        raise ValueError("each t branch needs at least two points for a slope fit")
    alpha = field.holder_alpha
    grid = discrepancy_sweep(field, np.concatenate([t_small, t_large]), x_grid, kappa, gh_nodes)
    pb = grid.phi_bar()
    ns = t_small.size
    xs = grid.x
    i0 = int(np.argmin(np.sum(xs * xs, axis=1)))
    pb0 = grid.phi[:, i0].max(axis=(1, 2))
    constant = not np.all(pb > 0)
    if constant:
        slope_small = slope_small_x0 = slope_large = float("nan")
    else:
        slope_small = float(np.polyfit(np.log(t_small), np.log(pb[:ns]), 1)[0])
        slope_small_x0 = float(np.polyfit(np.log(t_small), np.log(pb0[:ns]), 1)[0])
        slope_large = float(np.polyfit(np.log(t_large), np.log(pb[ns:]), 1)[0])
    c4, c4p = empirical_c4(grid, alpha)
    lo = 1.0 + majorant_rtol
    checks = {
        "small_t_slope": constant or slope_small >= alpha / 2 - 1 - slope_tol,
        "large_t_bounded": constant or slope_large <= -1 + slope_tol,
        "phi_le_genbnd": bool(np.all(grid.phi <= grid.genbnd * lo + 1e-300)),
        "genbnd_le_chain": bool(np.all(grid.genbnd.max(axis=(2, 3)) <= grid.chain * lo + 1e-300)),
    }
    return Prop23Report(field.name, alpha, grid, slope_small, slope_small_x0, slope_large, c4, c4p, slope_tol, checks)


# -- approximate resolvent and the correction J ----------------------------------------------


def _nested_nodes(field, g, lam, eps, x0, kappa, spec, fine: bool):
    """Time-outer, space-inner rule: for each Laplace node, a window around x0.

    Returns nodes Y with a(Y), A(Y), det a(Y), combined weights w_t w_y g(Y),
    and the kernel time per node.
    """
    n_t = spec.time_nodes * (2 if fine else 1)
    n_s = spec.panel_nodes * (2 if fine else 1)
    t, wt = laplace_rule(lam, n_t, scale=eps, horizon_factor=spec.horizon_factor)
    tau = t + eps
    ys, ws, ts = [], [], []
    for tk, wk in zip(tau, wt):
        y, w = window_rule(x0, _sigma(field, tk, kappa), g.center, g.box_radius, spec, n_s)
        ys.append(y)
        ws.append(w * wk)
        ts.append(np.full(w.size, tk))
    Y, W, T = np.concatenate(ys), np.concatenate(ws), np.concatenate(ts)
    wg = W * g.value(Y) if Y.shape[0] else W
    keep = wg != 0.0
    Y, wg, T = Y[keep], wg[keep], T[keep]
    return (Y, wg, T) + field.frozen(Y)


def _terms_at(field, nodes, kappa, points, want_j=True):
    """f, a(x):D^2 f and J at each point from one nested rule."""
    Y, wg, T, a_y, A_y, det_y = nodes
    a_pts = field.matrices(points)
    s = kappa * T
    out = np.zeros((points.shape[0], 3))
    if Y.shape[0] == 0:
        return out
    for i, (x, a_x) in enumerate(zip(points, a_pts)):
        diff = Y - x
        p = kernel_density(A_y, det_y, T, kappa, diff)
        m = np.einsum("nij,nj->ni", A_y, diff) / s[:, None]
        lx = np.einsum("ni,ij,nj->n", m, a_x, m) - np.einsum("ij,nji->n", a_x, A_y) / s
        out[i, 0] = np.dot(wg, p)
        out[i, 1] = np.dot(wg, p * lx)
        if want_j:
            b = a_y - a_x
            jx = np.einsum("ni,nij,nj->n", m, b, m) - np.einsum("nij,nji->n", b, A_y) / s
            out[i, 2] = np.dot(wg, p * jx)
    return out


@dataclass(frozen=True)
class ResolventTerms:
    """f_eps(x), a(x):D^2 f_eps(x) (analytic kernel Hessian) and J_eps(x), plus f on a stencil."""

    f: Estimate
    lf: Estimate
    j: Estimate
    stencil: np.ndarray | None = None


def _truncation(field, g, lam, eps, kappa, spec) -> tuple[float, float]:
    """Crude bounds on the mass the windows drop: for f, and for Hessian-weighted terms."""
    tail_f = _window_tail(field, g, spec) / lam
    w2 = spec.window**2
    hess = (field.lambda_max * (w2 + 2 + field.dim) / field.lambda_min**2 + 1 / field.lambda_min) / (kappa * eps)
    return tail_f, tail_f * hess * field.dim**2 * 2 * field.lambda_max


def resolvent_terms(
    field: CoefficientField,
    g: TestFunction,
    lam: float,
    eps: float,
    x,
    kappa: float = 2.0,
    spec: IntegrationSpec | None = None,
    offsets=None,
    want_j: bool = True,
) -> ResolventTerms:
    """All nested-quadrature quantities at x, sharing one set of nodes built around x.

    ``offsets`` (k, d) adds f_eps at x + offsets on the fine rule, which is
    what finite-difference stencils need: every stencil point then sees the
    same discrete operator.
    """
    if not lam > 0 or not eps > 0:
        raise ValueError("lambda and eps must be positive")
    _check_kappa(kappa)
    spec = spec or IntegrationSpec()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if field.is_constant:
        want_j = False
    res = []
    stencil = None
    for fine in (False, True):
        nodes = _nested_nodes(field, g, lam, eps, x, kappa, spec, fine)
        res.append(_terms_at(field, nodes, kappa, x[None], want_j)[0])
        if fine and offsets is not None:
            pts = x + np.asarray(offsets, dtype=float).reshape(-1, field.dim)
            stencil = _terms_at(field, nodes, kappa, pts, want_j=False)[:, 0]
    lo, hi = res
    tf, th = _truncation(field, g, lam, eps, kappa, spec)
    detail = {"rule": "laplace x window", "time_nodes": spec.time_nodes, "panel_nodes": spec.panel_nodes}
    f = Estimate(float(hi[0]), float(abs(hi[0] - lo[0])) + tf, "quadrature", detail)
    lf = Estimate(float(hi[1]), float(abs(hi[1] - lo[1])) + th, "quadrature", detail)
    if want_j:
        j = Estimate(float(hi[2]), float(abs(hi[2] - lo[2])) + th, "quadrature", detail)
    else:
        j = Estimate(0.0, 0.0, "exact", {"reason": "constant field"} if field.is_constant else {})
    return ResolventTerms(f, lf, j, stencil)


def approx_resolvent(
    field: CoefficientField, g: TestFunction, lam: float, eps: float, x, kappa: float = 2.0, spec=None
) -> Estimate:
    """f_eps(x) = ∫ G(lam, eps, x, y; a(y)) g(y) dy, integrated time-outer (Fubini)."""
    return resolvent_terms(field, g, lam, eps, x, kappa, spec, want_j=False).f


def j_eps(field: CoefficientField, g: TestFunction, lam: float, eps: float, x, kappa: float = 2.0, spec=None) -> Estimate:
    """Signed J_eps(x); the time integrand first goes through the singularity detector."""
    if not lam > 0 or not eps > 0:
        raise ValueError("lambda and eps must be positive")
    spec = spec or IntegrationSpec()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not field.is_constant:

        def integrand(t):
            out = []
            for tk in np.atleast_1d(t):
                tau = tk + eps
                y, w = window_rule(x, _sigma(field, tau, kappa), g.center, g.box_radius, spec)
                nodes = (y, w * g.value(y), np.full(w.size, tau)) + field.frozen(y)
                out.append(_terms_at(field, nodes, kappa, x[None])[0, 2])
            return np.asarray(out)

        _detect_singularity(integrand, lam, spec.horizon_factor)
    return resolvent_terms(field, g, lam, eps, x, kappa, spec).j


# -- the resolvent identities -----------------------------------------------------------------


def _fd_stencil(d: int, h: float) -> np.ndarray:
    pts = [np.zeros(d)]
    e = np.eye(d)
    for i in range(d):
        pts += [h * e[i], -h * e[i]]
    for i in range(d):
        for j in range(i + 1, d):
            for si in (1, -1):
                for sj in (1, -1):
                    pts.append(h * (si * e[i] + sj * e[j]))
    return np.array(pts)


def _fd_hessian(vals: np.ndarray, d: int, h: float) -> np.ndarray:
    """Central second differences from values laid out as in :func:`_fd_stencil`."""
    hs = np.empty((d, d))
    f0 = vals[0]
    for i in range(d):
        hs[i, i] = (vals[1 + 2 * i] - 2 * f0 + vals[2 + 2 * i]) / h**2
    k = 1 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            pp, pm, mp, mm = vals[k : k + 4]
            hs[i, j] = hs[j, i] = (pp - pm - mp + mm) / (4 * h * h)
            k += 4
    return hs


@dataclass
class IdentityReport:
    field: str
    lam: float
    eps: float
    kappa: float
    frozen_rows: list
    decomposition_rows: list
    tolerances: dict

    @property
    def frozen_max_residual(self) -> float:
        return max((abs(r["residual"]) for r in self.frozen_rows), default=0.0)

    @property
    def checks(self) -> dict:
        return {
            "frozen_residual": all(r["passed"] for r in self.frozen_rows),
            "frozen_refinement": all(r["monotone"] for r in self.frozen_rows),
            "decomposition": all(r["passed"] for r in self.decomposition_rows),
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def frozen_identity_residuals(a, lam, eps, x, y, kappa=2.0, levels=(2, 4, 8), horizon_factor=40.0):
    """lam G - a:D^2 G - p(eps) at (x, y) for each time-rule order in ``levels``."""
    a = np.asarray(a, dtype=float)
    A = np.linalg.inv(a)
    det = float(np.linalg.det(a))
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    p_eps = float(kernel_density(A, det, eps, kappa, diff))
    out = []
    for n in levels:
        G, H = laplace_kernel(A, det, lam, eps, kappa, diff[None], n=n, hess=True, horizon_factor=horizon_factor)
        out.append(float(lam * G[0] - np.sum(a * H[0]) - p_eps))
    return out, p_eps


def identity_check(
    field: CoefficientField,
    g: TestFunction,
    lam: float,
    eps: float,
    x_grid,
    kappa: float = 2.0,
    spec: IntegrationSpec | None = None,
    frozen_tol: float = 1e-5,
    fd_step: float = 0.02,
    decomposition_atol: float = 1e-9,
) -> IdentityReport:
    """(i) the frozen identity (lam - M^{a(y)}) G = p(eps) at pairs (x, y) near each grid x;
    (ii) (lam - L) f_eps = F_eps g + J_eps, with L f_eps from a Richardson-extrapolated
    finite-difference Hessian of f_eps.

    The refinement check in (i) requires |residual| to be non-increasing over
    time-rule orders 2, 4, 8 up to a roundoff floor of 64 ulp of p(eps).
    """
    if kappa != 2:
        raise ValueError("the resolvent identity holds only for kappa = 2")
    spec = spec or IntegrationSpec()
    xs = np.asarray(x_grid, dtype=float).reshape(-1, field.dim)
    d = field.dim
    sig = math.sqrt(kappa * eps * field.lambda_max)
    e1 = np.zeros(d)
    e1[0] = 1.0
    shifts = [0.0 * e1, sig * e1, 3.0 * sig * e1, -2.0 * sig * np.ones(d) / math.sqrt(d)]
    frozen_rows = []
    for x in xs:
        for sh in shifts:
            y = x + sh
            a = field.matrices(y[None])[0]
            res, p_eps = frozen_identity_residuals(a, lam, eps, x, y, kappa, horizon_factor=spec.horizon_factor)
            floor = 64 * np.finfo(float).eps * max(p_eps, 1.0) * (1 + lam)
            mono = all(abs(b) <= abs(a_) + floor for a_, b in zip(res, res[1:]))
            frozen_rows.append(
                {
                    "x": x.tolist(),
                    "y": y.tolist(),
                    "p_eps": p_eps,
                    "residual": res[-1],
                    "residual_levels": res,
                    "monotone": bool(mono),
                    "passed": bool(abs(res[-1]) <= frozen_tol),
                }
            )

    h = fd_step * math.sqrt(kappa * eps * field.lambda_min)
    st1, st2 = _fd_stencil(d, h), _fd_stencil(d, h / 2)
    decomp_rows = []
    for x in xs:
        terms = resolvent_terms(field, g, lam, eps, x, kappa, spec, offsets=np.concatenate([st1, st2]))
        v1, v2 = terms.stencil[: st1.shape[0]], terms.stencil[st1.shape[0] :]
        h1, h2 = _fd_hessian(v1, d, h), _fd_hessian(v2, d, h / 2)
        hr = h2 + (h2 - h1) / 3.0
        a_x = field.matrices(x[None])[0]
        lf_fd = float(np.sum(a_x * hr))
        fd_err = float(abs(np.sum(a_x * (hr - h2))))
        lhs = lam * terms.f.value - lf_fd
        i_eps = mixture_apply(MixtureQuery(field, g, eps, x, kappa, spec))
        rhs = i_eps.value + terms.j.value
        tol = lam * terms.f.abs_error + terms.lf.abs_error + fd_err + i_eps.abs_error + terms.j.abs_error
        resid = lhs - rhs
        decomp_rows.append(
            {
                "x": x.tolist(),
                "lhs": lhs,
                "I": i_eps.value,
                "J": terms.j.value,
                "residual": resid,
                "tolerance": tol + decomposition_atol,
                "lf_fd": lf_fd,
                "lf_analytic": terms.lf.value,
                "passed": bool(abs(resid) <= tol + decomposition_atol),
            }
        )
    tolerances = {"frozen_tol": frozen_tol, "fd_step": fd_step, "decomposition_atol": decomposition_atol}
    return IdentityReport(field.name, lam, eps, kappa, frozen_rows, decomp_rows, tolerances)


# -- the contraction threshold ------------------------------------------------------------------


class UnreachableThresholdError(ValueError):
    """B(lam) stays above 1/2 over the whole search bracket."""


def threshold_integral(lam: float, alpha: float, d: int, c4: float) -> float:
    """B(lam) = d^2 c4 ∫_0^∞ e^{-lam t} t^{-1} min(t^{alpha/2}, 1) dt in closed form.

    The [0, 1] piece is lam^{-alpha/2} gamma(alpha/2, lam) (lower incomplete
    gamma), the [1, ∞) piece is the exponential integral E1(lam).
    """
    s = alpha / 2.0
    head = lam**-s * special.gamma(s) * special.gammainc(s, lam)
    return float(d * d * c4 * (head + special.exp1(lam)))


def lambda0(alpha: float, d: int, c4_hat: float, rtol: float = 1e-10, lo: float = 1e-8, max_log2: int = 60) -> float:
    """The root of B(lam) = 1/2, by bisection in log lam.

    The upper end doubles from ``lo`` up to 2^max_log2; beyond that the
    threshold is declared unreachable. If B(lo) is already below 1/2 the
    lower end halves until it is not (B blows up like log(1/lam) at 0).
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if not c4_hat > 0:
        raise ValueError("c4_hat must be positive")

    def b(lam):
        return threshold_integral(lam, alpha, d, c4_hat) - 0.5

    while b(lo) <= 0:
        lo *= 0.5
        if lo < 1e-300:
            raise UnreachableThresholdError("B(lam) < 1/2 even as lam -> 0")
    hi = lo
    while b(hi) > 0:
        hi *= 2.0
        if hi > 2.0**max_log2:
            raise UnreachableThresholdError(
                f"B(lam) > 1/2 up to lam = 2^{max_log2} (alpha={alpha}, d={d}, c4={c4_hat:g})"
            )
    lo = hi / 2.0  # the last rung that still had B > 1/2
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if b(mid) > 0:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


@dataclass
class ContractionReport:
    field: str
    lam: float
    lambda0_hat: float | None
    c4_hat: float
    j_sup: float
    ratio: float
    grid: np.ndarray
    eps_list: tuple
    g_norm: float
    rows: list
    tolerances: dict
    note: str = ""

    @property
    def checks(self) -> dict:
        return {
            "contraction": bool(self.ratio <= self.tolerances["contraction_bound"] and math.isfinite(self.lam)),
            "majorant": all(r["passed_majorant"] for r in self.rows) and bool(self.rows),
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def contraction_check(
    field: CoefficientField,
    g: TestFunction,
    eps_list,
    x_grid,
    t_grid,
    kappa: float = 2.0,
    spec: IntegrationSpec | None = None,
    safety: float = 1.0,
    lam_factor: float = 2.0,
    default_lam: float = 1.0,
    gh_nodes: int = 32,
    majorant_nodes: int = 16,
    contraction_bound: float = 0.5,
) -> ContractionReport:
    """J_eps on the x-grid at lam = lam_factor * lambda0(alpha, d, safety * c4_hat).

    c4_hat is sup over ``t_grid`` and the x-grid of the scaled Phi (same
    kappa as J). The Phi-assembled majorant d^2 ||g|| ∫ e^{-lam t} Phi_bar(eps + t) dt
    is evaluated on the same Laplace nodes that J uses. A constant field
    has c4_hat = 0; there lam = ``default_lam`` and J vanishes identically.
    """
    spec = spec or IntegrationSpec()
    xs = np.asarray(x_grid, dtype=float).reshape(-1, field.dim)
    eps_list = tuple(float(e) for e in eps_list)
    d = field.dim
    tolerances = {
        "contraction_bound": contraction_bound,
        "safety": safety,
        "lam_factor": lam_factor,
        "majorant_rtol": 0.0,
        "gh_nodes": gh_nodes,
        "majorant_nodes": majorant_nodes,
    }
    if field.is_constant:
        c4, lam0, lam = 0.0, None, default_lam
    else:
        grid = discrepancy_sweep(field, t_grid, xs, kappa, gh_nodes)
        c4 = max(empirical_c4(grid, field.holder_alpha))
        try:
            lam0 = lambda0(field.holder_alpha, d, safety * c4)
        except UnreachableThresholdError as exc:
            return ContractionReport(
                field.name, float("nan"), float("inf"), c4, float("nan"), float("inf"), xs, eps_list,
                g.sup_norm, [], tolerances, note=str(exc),
            )
        lam = lam_factor * lam0
    rows = []
    for eps in eps_list:
        if field.is_constant:
            maj = 0.0
        else:
            t, w = laplace_rule(lam, spec.time_nodes, scale=eps, horizon_factor=spec.horizon_factor)
            pb = discrepancy_sweep(field, t + eps, xs, kappa, majorant_nodes).phi_bar()
            maj = float(d * d * g.sup_norm * np.dot(w, pb))
        for x in xs:
            j = resolvent_terms(field, g, lam, eps, x, kappa, spec).j
            rows.append(
                {
                    "eps": eps,
                    "x": x.tolist(),
                    "j": j.value,
                    "j_err": j.abs_error,
                    "majorant": maj,
                    "passed_majorant": bool(abs(j.value) + j.abs_error <= maj),
                }
            )
    j_sup = max(abs(r["j"]) + r["j_err"] for r in rows) if rows else 0.0
    ratio = j_sup / g.sup_norm if g.sup_norm > 0 else 0.0
    return ContractionReport(field.name, lam, lam0, c4, j_sup, ratio, xs, eps_list, g.sup_norm, rows, tolerances)
