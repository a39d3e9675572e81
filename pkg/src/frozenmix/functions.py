"""C² test functions with analytic gradients and Hessians.

All evaluators are vectorised over an ``(n, d)`` array of points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["TestFunction", "bump", "poly_bump", "gaussian", "constant", "quadratic", "corpus_functions"]

Evaluator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A twice differentiable g with value/grad/hess and its sup norm.

    ``support_radius`` is measured from ``center``; it is ``inf`` for
    functions without compact support, in which case ``effective_radius``
    bounds the region carrying all but ~1e-20 of the function.
    """

    __test__ = False  # not a pytest class

    dim: int
    value: Evaluator
    grad: Evaluator
    hess: Evaluator
    support_radius: float
    sup_norm: float
    center: np.ndarray
    name: str = "g"
    effective_radius: float | None = None

    def __call__(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        if pts.size == self.dim and pts.ndim <= 1:
            return float(self.value(pts.reshape(1, self.dim))[0])
        return self.value(pts.reshape(-1, self.dim)).reshape(pts.shape[:-1])

    @property
    def box_radius(self) -> float:
        if np.isfinite(self.support_radius):
            return self.support_radius
        if self.effective_radius is None:
            raise ValueError(f"{self.name} has no compact support and no effective radius")
        return self.effective_radius

    def scaled(self, factor: float) -> "TestFunction":
        return TestFunction(
            self.dim,
            lambda x: factor * self.value(x),
            lambda x: factor * self.grad(x),
            lambda x: factor * self.hess(x),
            self.support_radius,
            abs(factor) * self.sup_norm,
            self.center,
            f"{factor:g}*{self.name}",
            self.effective_radius,
        )


def _radial(dim, center, radius, amplitude, profile, name, support, sup, eff=None) -> TestFunction:
    """Build g(y) = A * q(u) with u = |y - c|^2 / R^2 from q, q', q''."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (dim,)).copy()
    R2 = radius * radius

    def parts(x):
        z = np.asarray(x, dtype=float).reshape(-1, dim) - c
        u = np.einsum("ni,ni->n", z, z) / R2
        q, dq, d2q = profile(u)
        return z, q, dq, d2q

    def value(x):
        z = np.asarray(x, dtype=float).reshape(-1, dim) - c
        return amplitude * profile(np.einsum("ni,ni->n", z, z) / R2, values_only=True)

    def grad(x):
        z, _, dq, _ = parts(x)
        return amplitude * (2.0 / R2) * dq[:, None] * z

    def hess(x):
        z, _, dq, d2q = parts(x)
        outer = np.einsum("ni,nj->nij", z, z)
        return amplitude * (
            (4.0 / (R2 * R2)) * d2q[:, None, None] * outer + (2.0 / R2) * dq[:, None, None] * np.eye(dim)
        )

    return TestFunction(dim, value, grad, hess, support, sup, c, name, eff)


def _bump_profile(u, values_only=False):
    if values_only:
        w = 1.0 - u
        with np.errstate(divide="ignore"):
            return np.exp(np.where(w > 0, 1.0 - 1.0 / np.where(w > 0, w, 1.0), -np.inf))
    inside = u < 1.0
    q = np.zeros_like(u)
    dq = np.zeros_like(u)
    d2q = np.zeros_like(u)
    w = 1.0 - u[inside]
    e = np.exp(1.0 - 1.0 / w)
    q[inside] = e
    dq[inside] = -e / w**2
    d2q[inside] = e * (1.0 / w**4 - 2.0 / w**3)
    return q, dq, d2q


def bump(dim: int, radius: float = 2.0, center=0.0, amplitude: float = 1.0) -> TestFunction:
    """C-infinity bump A exp(1 - 1/(1 - |y-c|^2/R^2)), equal to A at the centre."""
    return _radial(dim, center, radius, amplitude, _bump_profile, f"bump(R={radius:g})", radius, abs(amplitude))


def _poly_profile(u, values_only=False):
    w = np.maximum(1.0 - u, 0.0)
    if values_only:
        return w**3
    return w**3, -3.0 * w**2, 6.0 * w


def poly_bump(dim: int, radius: float = 2.0, center=0.0, amplitude: float = 1.0) -> TestFunction:
    """C² bump A (1 - |y-c|^2/R^2)^3 on the ball, zero outside."""
    return _radial(dim, center, radius, amplitude, _poly_profile, f"poly_bump(R={radius:g})", radius, abs(amplitude))


def gaussian(dim: int, width: float = 1.0, center=0.0, amplitude: float = 1.0) -> TestFunction:
    """A exp(-|y-c|^2 / (2 w^2)); not compactly supported (effective radius 10 w)."""

    def prof(u, values_only=False):
        e = np.exp(-0.5 * u)
        if values_only:
            return e
        return e, -0.5 * e, 0.25 * e

    return _radial(
        dim, center, width, amplitude, prof, f"gaussian(w={width:g})", np.inf, abs(amplitude), 10.0 * width
    )


def constant(dim: int, level: float = 1.0) -> TestFunction:
    """The constant function; unbounded support."""

    def value(x):
        return np.full(np.asarray(x).reshape(-1, dim).shape[0], float(level))

    def grad(x):
        return np.zeros_like(np.asarray(x, dtype=float).reshape(-1, dim))

    def hess(x):
        return np.zeros((np.asarray(x).reshape(-1, dim).shape[0], dim, dim))

    return TestFunction(dim, value, grad, hess, np.inf, abs(level), np.zeros(dim), f"const({level:g})")


def quadratic(dim: int, scale: float = 0.5) -> TestFunction:
    """scale * |y|^2: unbounded, used only for pointwise generator checks."""

    def value(x):
        x = np.asarray(x, dtype=float).reshape(-1, dim)
        return scale * np.sum(x * x, axis=1)

    def grad(x):
        return 2.0 * scale * np.asarray(x, dtype=float).reshape(-1, dim)

    def hess(x):
        n = np.asarray(x).reshape(-1, dim).shape[0]
        return np.broadcast_to(2.0 * scale * np.eye(dim), (n, dim, dim)).copy()

    return TestFunction(dim, value, grad, hess, np.inf, np.inf, np.zeros(dim), f"{scale:g}|x|^2")


def corpus_functions(dim: int, n: int = 10) -> list[TestFunction]:
    """A fixed list of ``n`` test functions with sup norm <= 1.

    Mixes smooth and C² bumps of several radii, centres and signs so that
    resolvent comparisons see more than one shape.
    """
    out = []
    radii = (1.0, 1.5, 2.0, 2.5, 3.0)
    for k in range(n):
        c = np.zeros(dim)
        c[0] = 0.5 * ((k % 5) - 2)
        if dim > 1:
            c[1] = 0.25 * ((k % 3) - 1)
        amp = (1.0 if k % 2 == 0 else -0.8) * (1.0 - 0.05 * k)
        make = bump if k % 3 != 2 else poly_bump
        out.append(make(dim, radius=radii[k % 5], center=c, amplitude=amp))
    return out
