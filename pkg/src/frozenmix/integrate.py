"""Quadrature and Monte Carlo engine shared by the kernel and parametrix code.

Three kinds of integral show up:

* Gaussian-weighted integrals over R^d, done with tensor Gauss-Hermite in the
  coordinates of a Gaussian proposal (or importance-sampled Monte Carlo);
* integrals against compactly supported test functions, done with composite
  Gauss-Legendre on a box window;
* Laplace integrals in time, done on a graded panel grid plus a
  Gauss-Laguerre tail.

Every public routine returns an :class:`Estimate` whose ``abs_error`` is the
difference between the last two refinement levels (quadrature) or three
standard errors (Monte Carlo).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Estimate",
    "IntegrationSpec",
    "IntegrationError",
    "SingularityError",
    "gauss_hermite_rule",
    "legendre_box_rule",
    "window_rule",
    "integrate_spatial",
    "laplace_rule",
    "laplace_panels",
    "integrate_time_laplace",
    "mc_reduce",
    "spawn_generators",
]


class IntegrationError(RuntimeError):
    """Quadrature failed; ``diagnostics`` holds whatever partial results exist."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class SingularityError(IntegrationError):
    """The time integrand blows up at least as fast as 1/t at the origin."""


@dataclass(frozen=True)
class Estimate:
    value: float
    abs_error: float
    method: str
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.abs_error) or self.abs_error < 0:
            raise ValueError(f"abs_error must be finite and non-negative, got {self.abs_error}")
        if self.method not in ("quadrature", "monte-carlo", "exact"):
            raise ValueError(f"unknown method {self.method!r}")

    def __float__(self) -> float:
        return float(self.value)

    def contains(self, x: float, slack: float = 0.0) -> bool:
        return abs(self.value - x) <= self.abs_error + slack

    def __add__(self, other: "Estimate") -> "Estimate":
        method = self.method if self.method == other.method else "monte-carlo"
        return Estimate(self.value + other.value, self.abs_error + other.abs_error, method)

    def scale(self, c: float) -> "Estimate":
        return Estimate(c * self.value, abs(c) * self.abs_error, self.method, dict(self.detail))


@dataclass(frozen=True)
class IntegrationSpec:
    """How to integrate: mode, node budgets, proposal, seed and target error.

    ``center``/``cov`` describe the Gaussian proposal. Callers that know the
    geometry of their integrand (the parametrix code does) fill them in via
    :meth:`with_proposal`; ``None`` means standard normal.
    """

    mode: str = "tensor"
    nodes_per_axis: int = 64
    n_samples: int = 100_000
    center: tuple | None = None
    cov: tuple | None = None
    seed: int = 0
    target_abs_err: float = 1e-8
    max_nodes_per_axis: int = 256
    time_nodes: int = 8
    window: float = 10.0
    panel_width: float = 2.0
    panel_nodes: int = 6
    horizon_factor: float = 40.0

    def __post_init__(self):
        if self.mode not in ("tensor", "monte-carlo"):
            raise ValueError(f"mode must be 'tensor' or 'monte-carlo', got {self.mode!r}")
        if self.nodes_per_axis < 2 or self.n_samples < 2 or self.time_nodes < 2:
            raise ValueError("node and sample counts must be >= 2")
        if self.target_abs_err <= 0:
            raise ValueError("target_abs_err must be positive")
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
                raise ValueError("proposal covariance is not symmetric")
            if np.linalg.eigvalsh(cov)[0] <= 0:
                raise ValueError("proposal covariance is not positive definite")

    def with_proposal(self, center, cov) -> "IntegrationSpec":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        s = np.atleast_2d(np.asarray(cov, dtype=float))
        return replace(self, center=tuple(c.tolist()), cov=tuple(map(tuple, s.tolist())))

    def proposal(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        c = np.zeros(dim) if self.center is None else np.asarray(self.center, dtype=float)
        s = np.eye(dim) if self.cov is None else np.asarray(self.cov, dtype=float)
        if c.shape != (dim,) or s.shape != (dim, dim):
            raise ValueError(f"proposal does not match dimension {dim}")
        return c, s

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "nodes_per_axis": self.nodes_per_axis,
            "n_samples": self.n_samples,
            "center": None if self.center is None else list(self.center),
            "cov": None if self.cov is None else [list(r) for r in self.cov],
            "seed": self.seed,
            "target_abs_err": self.target_abs_err,
            "max_nodes_per_axis": self.max_nodes_per_axis,
            "time_nodes": self.time_nodes,
            "window": self.window,
            "panel_width": self.panel_width,
            "panel_nodes": self.panel_nodes,
            "horizon_factor": self.horizon_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntegrationSpec":
        d = dict(d)
        if d.get("center") is not None:
            d["center"] = tuple(d["center"])
        if d.get("cov") is not None:
            d["cov"] = tuple(tuple(r) for r in d["cov"])
        return cls(**d)


# -- Gauss-Hermite in proposal coordinates -------------------------------------------


@lru_cache(maxsize=64)
def _hermite_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    # probabilists' nodes; log-weights so that exp(z^2/2) never overflows
    x, w = np.polynomial.hermite.hermgauss(n)
    z = np.sqrt(2.0) * x
    with np.errstate(divide="ignore"):
        logw = np.log(w) - 0.5 * np.log(np.pi) + 0.5 * z * z + 0.5 * np.log(2 * np.pi)
    return z, logw


@lru_cache(maxsize=64)
def _legendre_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def gauss_hermite_rule(n: int, center, cov) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes/weights for plain Lebesgue integrals over R^d.

    Nodes are ``center + L z`` with ``L L^T = cov``; the weights absorb the
    proposal density, so ``sum(w * h(nodes))`` approximates ``∫ h(y) dy`` and
    is exact when ``h`` is the proposal density times a low-degree polynomial.
    """
    c = np.atleast_1d(np.asarray(center, dtype=float))
    s = np.atleast_2d(np.asarray(cov, dtype=float))
    d = c.shape[0]
    z1, lw1 = _hermite_1d(n)
    grids = np.meshgrid(*([z1] * d), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=-1)
    lw = sum(g.ravel() for g in np.meshgrid(*([lw1] * d), indexing="ij"))
    chol = np.linalg.cholesky(s)
    nodes = c + z @ chol.T
    weights = np.exp(lw) * abs(np.prod(np.diag(chol)))
    return nodes, weights


def legendre_box_rule(lo, hi, panels, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite tensor Gauss-Legendre on the box ``[lo, hi]``.

    ``panels`` is either a panel count per axis or, per axis, an explicit
    increasing array of breakpoints (which then overrides ``lo``/``hi``).
    """
    x1, w1 = _legendre_1d(n)
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    d = lo.shape[0]
    axes_x, axes_w = [], []
    for k in range(d):
        p = panels[k] if isinstance(panels, (list, tuple)) else panels
        if np.ndim(p) == 0:
            edges = np.linspace(lo[k], hi[k], int(p) + 1)
        else:
            edges = np.asarray(p, dtype=float)
        a, b = edges[:-1, None], edges[1:, None]
        half = 0.5 * (b - a)
        axes_x.append((0.5 * (a + b) + half * x1).ravel())
        axes_w.append((half * w1).ravel())
    return _tensor(axes_x, axes_w)


def _tensor(axes_x, axes_w) -> tuple[np.ndarray, np.ndarray]:
    if len(axes_x) == 1:
        return axes_x[0][:, None], axes_w[0]
    if len(axes_x) == 2:
        (x0, x1), (w0, w1) = axes_x, axes_w
        nodes = np.empty((x0.size * x1.size, 2))
        nodes[:, 0] = np.repeat(x0, x1.size)
        nodes[:, 1] = np.tile(x1, x0.size)
        return nodes, np.outer(w0, w1).ravel()
    gx = np.meshgrid(*axes_x, indexing="ij")
    gw = np.meshgrid(*axes_w, indexing="ij")
    nodes = np.stack([g.ravel() for g in gx], axis=-1)
    return nodes, np.prod(np.stack([g.ravel() for g in gw], axis=-1), axis=-1)


def window_rule(x, sigma: float, box_center, box_radius: float, spec: "IntegrationSpec", n: int | None = None):
    """Gauss-Legendre nodes/weights on the overlap of a kernel window and a support box.

    The window is ``x ± spec.window * sigma`` per axis, the box
    ``box_center ± box_radius``. Panels have width ``spec.panel_width`` times
    ``min(sigma, box_radius / 4)`` and are aligned so that ``x`` is a panel
    edge; each carries ``n`` (default ``spec.panel_nodes``) points. An empty
    overlap gives zero-length arrays.
    """
    n = n or spec.panel_nodes
    x = np.atleast_1d(np.asarray(x, dtype=float))
    c = np.broadcast_to(np.asarray(box_center, dtype=float), x.shape)
    d = x.shape[0]
    reach = spec.window * sigma
    h = spec.panel_width * min(sigma, box_radius / 4.0)
    x1, w1 = _legendre_1d(n)
    axes_x, axes_w = [], []
    for k in range(d):
        xk, ck = float(x[k]), float(c[k])
        lo, hi = max(xk - reach, ck - box_radius), min(xk + reach, ck + box_radius)
        if hi <= lo:
            return np.zeros((0, d)), np.zeros(0)
        k_lo, k_hi = math.floor((lo - xk) / h), math.ceil((hi - xk) / h)
        if k_hi - k_lo > 512:
            raise IntegrationError("window needs more than 512 panels per axis", sigma=sigma, h=h)
        e = np.clip(xk + h * np.arange(k_lo, k_hi + 1), lo, hi)
        half = 0.5 * (e[1:] - e[:-1])[:, None]
        axes_x.append((0.5 * (e[1:] + e[:-1])[:, None] + half * x1).ravel())
        axes_w.append((half * w1).ravel())
    return _tensor(axes_x, axes_w)


def _checked(values: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values)
    if np.any(bad):
        k = int(np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1))[0])
        raise IntegrationError(f"non-finite integrand at node {nodes[k].tolist()}", node=nodes[k].tolist())
    return values


def integrate_spatial(integrand: Callable[[np.ndarray], np.ndarray], spec: IntegrationSpec, dim: int | None = None) -> Estimate:
    """∫ integrand(y) dy over R^d.

    ``integrand`` maps an ``(n, d)`` array to ``(n,)``. In tensor mode the
    node count doubles from ``nodes_per_axis`` until two successive levels
    agree to ``target_abs_err`` (or ``max_nodes_per_axis`` is hit). The finest
    level is reported; without convergence its error is the larger of the
    last two deltas. Monte Carlo mode samples
    the proposal and reports three standard errors.
    """
    if dim is None:
        dim = 1 if spec.center is None else len(spec.center)
    center, cov = spec.proposal(dim)
    if spec.mode == "monte-carlo":
        chol = np.linalg.cholesky(cov)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))

        def sampler(rng, size):
            z = rng.standard_normal((size, dim))
            y = center + z @ chol.T
            logq = -0.5 * np.sum(z * z, axis=1) - 0.5 * (dim * np.log(2 * np.pi) + logdet)
            return _checked(integrand(y), y) * np.exp(-logq)

        return mc_reduce(sampler, spec.n_samples, spec.seed)

    def level(n):
        nodes, w = gauss_hermite_rule(n, center, cov)
        return float(np.sum(w * _checked(integrand(nodes), nodes)))

    n = max(2, spec.nodes_per_axis // 2)
    prev = level(n)
    deltas = []
    while True:
        n *= 2
        cur = level(n)
        deltas.append(abs(cur - prev))
        if deltas[-1] <= spec.target_abs_err or 2 * n > max(spec.max_nodes_per_axis, spec.nodes_per_axis):
            break
        prev = cur
    # kinked integrands refine erratically, so an unconverged level takes the larger of two deltas
    converged = deltas[-1] <= spec.target_abs_err
    value, err, n_used = cur, deltas[-1] if converged else max(deltas[-2:]), n
    return Estimate(value, err, "quadrature", {"rule": "gauss-hermite", "nodes_per_axis": n_used, "dim": dim})


# -- Laplace integrals in time ---------------------------------------------------------


def _time_edges(lam: float, scale: float, horizon: float, breakpoints: Sequence[float]) -> np.ndarray:
    b = min(1.0 / lam, horizon)
    if scale > 0:
        h = min(scale / 4.0, b)
        k = max(0, int(math.ceil(math.log2(b / h))))
        edges = [0.0] + [b * 2.0 ** (-j) for j in range(k, -1, -1)]
    else:
        # geometric grading 2^-64 below b resolves t^(-1+delta) spikes at the origin
        edges = [0.0] + [b * 2.0 ** (-j) for j in range(64, -1, -1)]
    # e^{-lam t} drops by e^{-4} per panel here; Gauss-Legendre of order 8 is ~1e-9 relative
    n_uniform = max(0, int(math.ceil((horizon - b) * lam / 4.0)))
    if n_uniform:
        edges.extend(np.linspace(b, horizon, n_uniform + 1)[1:].tolist())
    for bp in breakpoints:
        if 0.0 < bp < horizon:
            edges.append(float(bp))
    return np.unique(np.asarray(edges))


_LAGUERRE_ONLY = 50.0


@lru_cache(maxsize=64)
def _laguerre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.laguerre.laggauss(n)


def laplace_panels(
    lam: float,
    n: int,
    scale: float = 0.0,
    breakpoints: Sequence[float] = (),
    horizon_factor: float = 40.0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """:func:`laplace_rule` split into its panels, one ``(nodes, weights)`` pair each.

    The Gauss-Laguerre tail is the last panel.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    u, wl = _laguerre(n)
    if scale * lam >= _LAGUERRE_ONLY:
        # the integrand varies on the scale ``scale`` >> 1/lam: plain Gauss-Laguerre
        return [(u / lam, wl / lam)]
    horizon = horizon_factor / lam
    edges = _time_edges(lam, scale, horizon, tuple(breakpoints))
    x1, w1 = _legendre_1d(n)
    a, b = edges[:-1, None], edges[1:, None]
    half = 0.5 * (b - a)
    t = 0.5 * (a + b) + half * x1
    w = half * w1 * np.exp(-lam * t)
    panels = list(zip(t, w))
    panels.append((horizon + u / lam, wl * math.exp(-lam * horizon) / lam))
    return panels


def laplace_rule(
    lam: float,
    n: int,
    scale: float = 0.0,
    breakpoints: Sequence[float] = (),
    horizon_factor: float = 40.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for ∫_0^∞ e^{-lam t} f(t) dt ≈ sum(w * f(nodes)).

    The exponential is folded into the weights. Panels are graded
    geometrically towards 0 (down to ``scale/4`` when the integrand is
    known to be regular below ``scale``), then uniform with width <= 4/lam
    up to T = horizon_factor/lam; Gauss-Laguerre in the variable lam (t - T)
    handles [T, ∞), which is exact for polynomial growth of low degree.
    When ``scale * lam >= 50`` the whole half-line is one Gauss-Laguerre rule.
    """
    panels = laplace_panels(lam, n, scale, breakpoints, horizon_factor)
    return np.concatenate([p[0] for p in panels]), np.concatenate([p[1] for p in panels])


def _detect_singularity(f, lam: float, horizon_factor: float) -> None:
    t0 = min(1.0, horizon_factor) / lam * 2.0**-60
    t1 = t0 * 2.0**8
    v = np.abs(np.asarray(f(np.array([t0, t1])), dtype=float).reshape(2, -1)).max(axis=1)
    if np.all(v > 0) and np.all(np.isfinite(v)):
        slope = math.log(v[1] / v[0]) / math.log(t1 / t0)
        if slope <= -1.0 + 1e-6:
            raise SingularityError(
                f"integrand behaves like t^{slope:.3f} at 0, which is not integrable", slope=slope
            )
    elif not np.all(np.isfinite(v)):
        raise SingularityError("integrand is not finite near t = 0", values=v.tolist())


def integrate_time_laplace(
    f: Callable[[np.ndarray], np.ndarray],
    lam: float,
    spec: IntegrationSpec | None = None,
    scale: float = 0.0,
    breakpoints: Sequence[float] = (),
) -> Estimate:
    """∫_0^∞ e^{-lam t} f(t) dt for f with at most t^{-1+δ} blow-up at 0.

    Refines the per-panel Gauss-Legendre order (doubling from
    ``spec.time_nodes``) until two levels agree to ``spec.target_abs_err``.
    """
    spec = spec or IntegrationSpec()
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if scale <= 0:
        _detect_singularity(f, lam, spec.horizon_factor)

    def level(n):
        t, w = laplace_rule(lam, n, scale, breakpoints, spec.horizon_factor)
        vals = np.asarray(f(t), dtype=float)
        if not np.all(np.isfinite(vals)):
            k = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise IntegrationError(f"non-finite time integrand at t={t[k]:g}", t=float(t[k]))
        return float(np.dot(w, vals))

    n = spec.time_nodes
    prev = level(n)
    best = None
    while True:
        n *= 2
        cur = level(n)
        delta = abs(cur - prev)
        if best is None or delta < best[1]:
            best = (cur, delta, n)
        if delta <= spec.target_abs_err or n >= 128:
            break
        prev = cur
    value, err, n_used = best
    return Estimate(value, err, "quadrature", {"rule": "graded-legendre+laguerre", "nodes_per_panel": n_used})


# -- Monte Carlo -------------------------------------------------------------------------


_BLOCK = 1 << 16


def spawn_generators(seed: int, n_blocks: int) -> list[np.random.Generator]:
    """Independent, seed-derived streams, one per fixed-size block."""
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1))
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n_blocks)]


def mc_reduce(sampler: Callable[[np.random.Generator, int], np.ndarray], n: int, seed: int) -> Estimate:
    """Mean of ``n`` draws of ``sampler(rng, size)`` with a 3-standard-error bar.

    Draws are partitioned into fixed blocks, each fed by its own substream
    of ``seed``, so the result depends only on ``(n, seed)``.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    n_blocks = -(-n // _BLOCK)
    gens = spawn_generators(seed, n_blocks)
    parts = []
    for k, rng in enumerate(gens):
        size = min(_BLOCK, n - k * _BLOCK)
        parts.append(np.asarray(sampler(rng, size), dtype=float).reshape(size))
    x = np.concatenate(parts)
    mean = float(np.sum(x) / n)
    var = float(np.sum((x - mean) ** 2) / (n - 1))
    return Estimate(mean, 3.0 * math.sqrt(var / n), "monte-carlo", {"n_samples": n, "seed": int(seed)})
