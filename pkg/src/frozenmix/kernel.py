"""Constant-coefficient Gaussian kernels p^a(t, x, y) and friends.

The kernel carries a convention factor ``kappa``: its covariance is
``kappa * t * a``. With ``kappa = 1`` the density is the textbook
normalisation (2πt)^{-d/2} (det a)^{-1/2} exp(-(y-x)^T A (y-x) / 2t); with
``kappa = 2`` it is the transition density of the process whose generator
is sum_ij a_ij D_ij, so that ∂p/∂t = sum_ij a_ij D_ij p holds exactly.

Batched helpers (``kernel_density``, ``kernel_hessian``, ``laplace_kernel``)
take stacks of inverse matrices so that each quadrature node can carry its
own frozen coefficient a(y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import SymPosDefMatrix
from .integrate import Estimate, IntegrationSpec, integrate_spatial, integrate_time_laplace, laplace_rule, window_rule

__all__ = [
    "KernelParams",
    "kernel_density",
    "kernel_hessian",
    "laplace_kernel",
    "density",
    "hessian",
    "transition_apply",
    "time_laplace_kernel",
    "sample",
    "chapman_kolmogorov",
]


@dataclass(frozen=True, eq=False)
class KernelParams:
    a: SymPosDefMatrix
    t: float
    kappa: float = 1.0

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"time must be positive, got {self.t}")
        if self.kappa not in (1, 2):
            raise ValueError("kappa must be 1 or 2")
        if not isinstance(self.a, SymPosDefMatrix):
            object.__setattr__(self, "a", SymPosDefMatrix.from_array(self.a))

    @property
    def dim(self) -> int:
        return self.a.dim

    @property
    def cov(self) -> np.ndarray:
        return self.kappa * self.t * np.asarray(self.a.entries)


def kernel_density(A, det, tau, kappa, diff) -> np.ndarray:
    """Density at ``diff = y - x`` for stacks of inverses ``A`` and determinants ``det``.

    All arguments broadcast against each other (``A``: ``(..., d, d)``,
    ``diff``: ``(..., d)``, the rest scalar-shaped).
    """
    diff = np.asarray(diff, dtype=float)
    d = diff.shape[-1]
    s = kappa * np.asarray(tau, dtype=float)
    q = np.einsum("...i,...ij,...j->...", diff, A, diff)
    return (2.0 * np.pi * s) ** (-0.5 * d) / np.sqrt(det) * np.exp(-0.5 * q / s)


def kernel_hessian(A, det, tau, kappa, diff, density_out: bool = False):
    """Second x-derivatives p (m m^T - (kappa tau)^{-1} A) with m = A (y - x) / (kappa tau).

    With ``kappa = 1`` this is t^{-1} p [ (y-x)^T A_{.i} A_{.j} (y-x) / t - A_ij ].
    """
    diff = np.asarray(diff, dtype=float)
    s = kappa * np.asarray(tau, dtype=float)
    p = kernel_density(A, det, tau, kappa, diff)
    m = np.einsum("...ij,...j->...i", A, diff) / s[..., None]
    h = p[..., None, None] * (m[..., :, None] * m[..., None, :] - A / s[..., None, None])
    return (h, p) if density_out else h


def density(params: KernelParams, x, y) -> float:
    x, y = _pair(params.dim, x, y)
    return float(kernel_density(params.a.inv, params.a.det, params.t, params.kappa, y - x))


def hessian(params: KernelParams, x, y) -> np.ndarray:
    """D_ij in x of the density, as a ``(d, d)`` array."""
    x, y = _pair(params.dim, x, y)
    return kernel_hessian(params.a.inv, params.a.det, params.t, params.kappa, y - x)


def _pair(dim, x, y):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != (dim,) or y.shape != (dim,):
        raise ValueError(f"points must have shape ({dim},)")
    return x, y


def transition_apply(params: KernelParams, f, x, spec: IntegrationSpec | None = None) -> Estimate:
    """P_t^a f(x) = ∫ p^a(t, x, y) f(y) dy.

    Gauss-Hermite in the kernel's own coordinates when f is wide compared
    to the kernel, a Gauss-Legendre window over f's support otherwise.
    """
    spec = spec or IntegrationSpec()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = params.dim
    A, det = params.a.inv, params.a.det
    sigma = math.sqrt(params.kappa * params.t * float(np.max(params.a.eigvalsh())))
    radius = f.support_radius
    if np.isfinite(radius) and sigma > radius / 8.0:
        nodes, w = window_rule(x, sigma, f.center, radius, spec)
        nodes2, w2 = window_rule(x, sigma, f.center, radius, spec, 2 * spec.panel_nodes)
        if nodes.shape[0] == 0:
            return Estimate(0.0, 0.0, "quadrature", {"rule": "window", "empty": True})
        v1 = np.sum(w * f.value(nodes) * kernel_density(A, det, params.t, params.kappa, nodes - x))
        v2 = np.sum(w2 * f.value(nodes2) * kernel_density(A, det, params.t, params.kappa, nodes2 - x))
        return Estimate(float(v2), float(abs(v2 - v1)), "quadrature", {"rule": "window"})
    local = spec.with_proposal(x, params.cov)
    return integrate_spatial(
        lambda y: f.value(y) * kernel_density(A, det, params.t, params.kappa, y - x), local, d
    )


def laplace_kernel(A, det, lam, eps, kappa, diff, n: int = 8, hess: bool = False, horizon_factor: float = 40.0):
    """∫_0^∞ e^{-lam s} p(s + eps, x, y) ds for a stack of ``diff = y - x``.

    Returns ``G`` with shape ``diff.shape[:-1]`` (and, if ``hess``, the
    time-integrated Hessian with two extra trailing axes).
    """
    t, w = laplace_rule(lam, n, scale=eps, horizon_factor=horizon_factor)
    tau = t + eps
    diff = np.asarray(diff, dtype=float)
    A = np.asarray(A, dtype=float)
    det = np.asarray(det, dtype=float)
    # time axis last for the density, third from last for the Hessian
    shape = diff.shape[:-1]
    dd = diff[..., None, :]
    AA = A[..., None, :, :] if A.ndim > 2 else A
    de = det[..., None] if det.ndim else det
    if hess:
        h, p = kernel_hessian(AA, de, tau, kappa, dd, density_out=True)
        G = np.einsum("...k,k->...", p, w)
        H = np.einsum("...kij,k->...ij", h, w)
        return G.reshape(shape), H.reshape(shape + A.shape[-2:])
    p = kernel_density(AA, de, tau, kappa, dd)
    return np.einsum("...k,k->...", p, w).reshape(shape)


def time_laplace_kernel(
    a: SymPosDefMatrix, lam: float, eps: float, x, y, kappa: float = 2, spec: IntegrationSpec | None = None
) -> Estimate:
    """G(lam, eps, x, y; a) = ∫_0^∞ e^{-lam s} p^a(s + eps, x, y) ds."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if not isinstance(a, SymPosDefMatrix):
        a = SymPosDefMatrix.from_array(a)
    x, y = _pair(a.dim, x, y)
    diff = y - x

    def f(s):
        return kernel_density(a.inv, a.det, np.asarray(s) + eps, kappa, diff)

    return integrate_time_laplace(f, lam, spec, scale=eps)


def sample(params: KernelParams, x, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw y ~ N(x, kappa t a) from the caller's stream."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    chol = np.linalg.cholesky(params.cov)
    if size is None:
        return x + chol @ rng.standard_normal(params.dim)
    return x + rng.standard_normal((size, params.dim)) @ chol.T


def chapman_kolmogorov(a: SymPosDefMatrix, s: float, t: float, x, y, kappa: float = 1, n: int = 64) -> tuple[float, float]:
    """(∫ p(s, x, z) p(t, z, y) dz, p(s + t, x, y)), the former by Gauss-Hermite in N(x, kappa s a)."""
    x, y = _pair(a.dim, x, y)
    spec = IntegrationSpec(nodes_per_axis=n, target_abs_err=1e-14, max_nodes_per_axis=n).with_proposal(
        x, kappa * s * np.asarray(a.entries)
    )
    lhs = integrate_spatial(
        lambda z: kernel_density(a.inv, a.det, s, kappa, z - x) * kernel_density(a.inv, a.det, t, kappa, y - z),
        spec,
        a.dim,
    )
    rhs = kernel_density(a.inv, a.det, s + t, kappa, y - x)
    return lhs.value, float(rhs)
