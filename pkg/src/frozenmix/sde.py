"""Euler-Maruyama realisations of the martingale problem for L = sum a_ij D_ij.

Two numerical constructions of "a solution" differ in how the diffusion
matrix is factored (lower-triangular Cholesky vs the symmetric square
root), in the step size and in the seed. Uniqueness predicts that their
resolvent functionals

    S_lam g = E ∫_0^∞ e^{-lam t} g(X_t) dt

agree; :func:`uniqueness_gap` measures how far apart they are, against
Monte Carlo error bars plus a Richardson estimate of the time-step bias.

Paths are simulated in fixed blocks, each with its own substream of the
scheme seed, so results depend only on (scheme, field, observables).
Coarser step sizes are coupled to the finest one by summing its Brownian
increments, which makes level differences low-variance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .field import CoefficientField, SymPosDefMatrix, apply_generator
from .functions import TestFunction
from .integrate import Estimate, spawn_generators

__all__ = [
    "FactorizationError",
    "SimulationError",
    "factor_diffusion",
    "batch_factor",
    "SimScheme",
    "ResolventEstimate",
    "simulate_levels",
    "simulate_resolvent",
    "martingale_residual",
    "martingale_residuals",
    "UniquenessReport",
    "uniqueness_gap",
    "BiasOrderReport",
    "bias_order",
    "marginal_covariance",
]

METHODS = ("cholesky", "spectral")
_BLOCK = 1 << 14
_LOG_LIMIT = 1 << 30


class FactorizationError(ValueError):
    """The matrix handed to a factorization is not symmetric positive definite."""


class SimulationError(RuntimeError):
    """A path left the finite numbers."""


def factor_diffusion(a, method: str = "cholesky", kappa: float = 2.0) -> np.ndarray:
    """sigma with sigma sigma^T = kappa a.

    ``cholesky`` returns the lower-triangular factor, ``spectral`` the
    symmetric square root V diag(sqrt(kappa lambda)) V^T.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    try:
        m = a if isinstance(a, SymPosDefMatrix) else SymPosDefMatrix.from_array(a)
    except ValueError as exc:
        raise FactorizationError(str(exc)) from None
    return batch_factor(np.asarray(m.entries)[None], method, kappa)[0]


def batch_factor(a: np.ndarray, method: str, kappa: float = 2.0) -> np.ndarray:
    """Factor a stack ``(n, d, d)`` at once; closed forms for d <= 2."""
    m = kappa * a
    d = m.shape[-1]
    if d == 1:
        if np.any(m <= 0):
            raise FactorizationError("non-positive diffusion coefficient")
        return np.sqrt(m)
    if d == 2:
        a11, a12, a22 = m[:, 0, 0], m[:, 0, 1], m[:, 1, 1]
        det = a11 * a22 - a12 * a12
        if np.any(a11 <= 0) or np.any(det <= 0):
            raise FactorizationError("matrix is not positive definite")
        out = np.zeros_like(m)
        if method == "cholesky":
            l11 = np.sqrt(a11)
            out[:, 0, 0] = l11
            out[:, 1, 0] = a12 / l11
            out[:, 1, 1] = np.sqrt(det / a11)
        else:
            # sqrt(M) = (M + s I) / sqrt(tr M + 2 s) with s = sqrt(det M)
            s = np.sqrt(det)
            t = np.sqrt(a11 + a22 + 2 * s)
            out[:, 0, 0] = (a11 + s) / t
            out[:, 1, 1] = (a22 + s) / t
            out[:, 0, 1] = out[:, 1, 0] = a12 / t
        return out
    if method == "cholesky":
        try:
            return np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(str(exc)) from None
    lam, vec = np.linalg.eigh(m)
    if np.any(lam <= 0):
        raise FactorizationError("matrix is not positive definite")
    return np.einsum("nij,nj,nkj->nik", vec, np.sqrt(lam), vec)


@dataclass(frozen=True)
class SimScheme:
    """One numerical construction of the process: factorization, step, horizon, paths, seed."""

    factorization: str = "cholesky"
    dt: float = 0.02
    horizon: float = 10.0
    n_paths: int = 100_000
    seed: int = 0
    kappa: float = 2.0

    def __post_init__(self):
        if self.factorization not in METHODS:
            raise ValueError(f"factorization must be one of {METHODS}")
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        if self.n_paths < 10_000:
            raise ValueError("n_paths must be at least 1e4")
        if self.kappa not in (1, 2):
            raise ValueError("kappa must be 1 or 2")

    @property
    def scheme_id(self) -> str:
        return f"{self.factorization}/dt={self.dt:g}/T={self.horizon:g}/n={self.n_paths}/seed={self.seed}"

    def check_lambda(self, lam: float) -> None:
        if lam * self.horizon < 20:
            raise ValueError(f"horizon {self.horizon:g} is shorter than 20/lambda = {20 / lam:g}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimScheme":
        return cls(**d)


@dataclass(frozen=True)
class ResolventEstimate:
    value: Estimate
    lam: float
    g_id: str
    scheme_id: str


@dataclass
class LevelResult:
    """Per-level means and 3-SE bars of the discounted observables, plus coupled differences.

    ``mean[j, k]`` is level j (step ``dt * 2^j``), observable k;
    ``diff[j, k]`` estimates level j+1 minus level j on shared noise.
    """

    dts: np.ndarray
    mean: np.ndarray
    err: np.ndarray
    diff: np.ndarray
    diff_err: np.ndarray
    horizon: float
    n_paths: int


def _mean_err(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    mean = x.mean(axis=0)
    err = 3.0 * x.std(axis=0, ddof=1) / math.sqrt(n)
    return mean, err


def simulate_levels(
    field: CoefficientField,
    observables,
    lam: float,
    w,
    scheme: SimScheme,
    levels: int = 2,
    path_log: str | None = None,
) -> LevelResult:
    """Coupled Euler-Maruyama at steps dt, 2 dt, ..., 2^(levels-1) dt.

    Each observable h contributes the left-Riemann sum sum_k e^{-lam t_k} h(X_k) dt
    per path; its O(dt) bias is what the coupled levels measure. ``path_log``
    optionally writes each path's final state and finest-level payoffs as CSV
    (refused above 1 GiB).
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    d = field.dim
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if w.shape != (d,):
        raise ValueError(f"start point must have shape ({d},)")
    stride = 1 << (levels - 1)
    n_fine = stride * int(math.ceil(scheme.horizon / (scheme.dt * stride)))
    n_obs = len(observables)
    if path_log is not None and scheme.n_paths * (d + n_obs) * 25 > _LOG_LIMIT:
        raise ValueError("path log would exceed 1 GiB")
    n_blocks = -(-scheme.n_paths // _BLOCK)
    gens = spawn_generators(scheme.seed, n_blocks)
    payoffs = np.empty((scheme.n_paths, levels, n_obs))
    finals = np.empty((scheme.n_paths, d)) if path_log else None
    sqdt = math.sqrt(scheme.dt)
    for b, rng in enumerate(gens):
        lo = b * _BLOCK
        size = min(_BLOCK, scheme.n_paths - lo)
        x = np.broadcast_to(w, (levels, size, d)).copy()
        dw = np.zeros((levels, size, d))
        acc = np.zeros((levels, size, n_obs))
        for k in range(n_fine):
            xi = rng.standard_normal((size, d)) * sqdt
            dw += xi
            for j in range(levels):
                step = 1 << j
                if (k + 1) % step:
                    continue
                dt_j = scheme.dt * step
                t_m = (k + 1 - step) * scheme.dt
                xj = x[j]
                disc = math.exp(-lam * t_m) * dt_j
                for o, h in enumerate(observables):
                    acc[j, :, o] += disc * h(xj)
                sig = batch_factor(field.matrices(xj), scheme.factorization, scheme.kappa)
                xj += np.einsum("nij,nj->ni", sig, dw[j])
                dw[j] = 0.0
                if not np.all(np.isfinite(xj)):
                    raise SimulationError(
                        f"non-finite state at step {k + 1} (level {j}, block {b}, seed {scheme.seed})"
                    )
        payoffs[lo : lo + size] = np.swapaxes(acc, 0, 1)
        if finals is not None:
            finals[lo : lo + size] = x[0]
    if path_log is not None:
        cols = [f"x{i + 1}" for i in range(d)] + [f"payoff{o}" for o in range(n_obs)]
        data = np.concatenate([finals, payoffs[:, 0, :]], axis=1)
        np.savetxt(path_log, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
    mean, err = _mean_err(payoffs.reshape(scheme.n_paths, -1))
    mean, err = mean.reshape(levels, n_obs), err.reshape(levels, n_obs)
    if levels > 1:
        dm, de = _mean_err((payoffs[:, 1:] - payoffs[:, :-1]).reshape(scheme.n_paths, -1))
        dm, de = dm.reshape(levels - 1, n_obs), de.reshape(levels - 1, n_obs)
    else:
        dm = de = np.zeros((0, n_obs))
    dts = scheme.dt * 2.0 ** np.arange(levels)
    return LevelResult(dts, mean, err, dm, de, n_fine * scheme.dt, scheme.n_paths)


def _truncation(sup: float, lam: float, horizon: float) -> float:
    return sup * math.exp(-lam * horizon) / lam


def simulate_resolvent(field: CoefficientField, g: TestFunction, lam: float, w, scheme: SimScheme) -> ResolventEstimate:
    """S_lam g(w) by Euler-Maruyama: 3-SE bar plus the truncation bound ||g|| e^{-lam T} / lam.

    ``detail["bias"]`` holds the Richardson step-bias allowance from a coupled 2 dt level.
    """
    scheme.check_lambda(lam)
    res = simulate_levels(field, [g.value], lam, w, scheme, levels=2)
    err = float(res.err[0, 0]) + _truncation(g.sup_norm, lam, res.horizon)
    detail = {"n_paths": scheme.n_paths, "dt": scheme.dt, "bias": _bias(res, 0)}
    est = Estimate(float(res.mean[0, 0]), err, "monte-carlo", detail)
    return ResolventEstimate(est, lam, g.name, scheme.scheme_id)


def _bias(res: LevelResult, k: int) -> float:
    """Richardson estimate of the finest level's step bias, padded by its own 3-SE bar."""
    if res.diff.shape[0] == 0:
        return 0.0
    return float(abs(res.diff[0, k]) + res.diff_err[0, k])


def martingale_residual(
    field: CoefficientField, f: TestFunction, lam: float, w, scheme: SimScheme
) -> tuple[Estimate, float]:
    """f(w) - S_lam(lam f - L f)(w), with L f evaluated along the paths.

    Returns the residual (3-SE bar plus truncation) and a Richardson bias
    allowance from the coupled 2 dt level.
    """
    return martingale_residuals(field, [f], lam, w, scheme)[0]


def martingale_residuals(field: CoefficientField, fs, lam: float, w, scheme: SimScheme) -> list:
    """:func:`martingale_residual` for several f on one set of paths."""
    scheme.check_lambda(lam)
    w = np.atleast_1d(np.asarray(w, dtype=float))

    def payoff(f):
        return lambda x: lam * f.value(x) - apply_generator(field, f, x)

    res = simulate_levels(field, [payoff(f) for f in fs], lam, w, scheme, levels=2)
    out = []
    for k, f in enumerate(fs):
        # the tail after T needs sup |lam f - L f|; L f is bounded on a grid over f's support
        trunc = _truncation(lam * f.sup_norm + _generator_sup(field, f), lam, res.horizon)
        value = f(w) - float(res.mean[0, k])
        est = Estimate(value, float(res.err[0, k]) + trunc, "monte-carlo", {"dt": scheme.dt})
        out.append((est, _bias(res, k)))
    return out


def _generator_sup(field: CoefficientField, f: TestFunction, n: int = 41) -> float:
    try:
        r = f.box_radius
    except ValueError:
        # unbounded support is only accepted for functions with vanishing Hessian
        if np.any(f.hess(np.atleast_2d(f.center)) != 0):
            raise
        return 0.0
    axis = np.linspace(-r, r, n)
    mesh = np.meshgrid(*([axis] * field.dim), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1) + f.center
    hs = np.abs(f.hess(pts)).max()
    return float(field.lambda_max * field.dim * field.dim * hs)


@dataclass
class UniquenessReport:
    field: str
    lam: float
    w: list
    scheme_a: str
    scheme_b: str
    rows: list
    theta_hat: float

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)


def uniqueness_gap(
    field: CoefficientField,
    g_corpus,
    lam: float,
    w,
    scheme_a: SimScheme,
    scheme_b: SimScheme,
) -> UniquenessReport:
    """|S^A g - S^B g| for every g, against 3 sqrt(se_A^2 + se_B^2) + both bias allowances + truncation."""
    scheme_a.check_lambda(lam)
    scheme_b.check_lambda(lam)
    obs = [g.value for g in g_corpus]
    ra = simulate_levels(field, obs, lam, w, scheme_a, levels=2)
    rb = ra if scheme_b == scheme_a else simulate_levels(field, obs, lam, w, scheme_b, levels=2)
    rows = []
    for k, g in enumerate(g_corpus):
        sa, sb = float(ra.mean[0, k]), float(rb.mean[0, k])
        se_a, se_b = ra.err[0, k] / 3.0, rb.err[0, k] / 3.0
        trunc = _truncation(g.sup_norm, lam, ra.horizon) + _truncation(g.sup_norm, lam, rb.horizon)
        allowance = 3.0 * math.sqrt(se_a**2 + se_b**2) + _bias(ra, k) + _bias(rb, k) + trunc
        gap = abs(sa - sb)
        rows.append(
            {
                "g": g.name,
                "s_a": sa,
                "s_b": sb,
                "gap": gap,
                "se_a": float(se_a),
                "se_b": float(se_b),
                "bias_a": _bias(ra, k),
                "bias_b": _bias(rb, k),
                "allowance": float(allowance),
                "passed": bool(gap <= allowance),
            }
        )
    theta = max((r["gap"] for r in rows), default=0.0)
    return UniquenessReport(
        field.name, lam, np.atleast_1d(w).tolist(), scheme_a.scheme_id, scheme_b.scheme_id, rows, theta
    )


@dataclass
class BiasOrderReport:
    field: str
    g: str
    dts: np.ndarray
    values: np.ndarray
    diffs: np.ndarray
    diff_errs: np.ndarray
    ratios: np.ndarray
    ratio_range: tuple

    @property
    def passed(self) -> bool:
        lo, hi = self.ratio_range
        return bool(np.all((self.ratios >= lo) & (self.ratios <= hi)))


def bias_order(
    field: CoefficientField,
    g: TestFunction,
    lam: float,
    w,
    scheme: SimScheme,
    halvings: int = 3,
    ratio_range: tuple = (1.5, 3.0),
) -> BiasOrderReport:
    """|S(h) - S(h/2)| over ``halvings`` successive halvings of h, on coupled paths.

    ``scheme.dt`` is the finest step; the coarsest is dt 2^(halvings+1), so
    there are ``halvings`` ratios of successive differences. Weak order one
    predicts each ratio to be 2.
    """
    scheme.check_lambda(lam)
    res = simulate_levels(field, [g.value], lam, w, scheme, levels=halvings + 2)
    # diff[j] = level j+1 - level j; list from the coarsest pair down to the finest
    diffs = np.abs(res.diff[::-1, 0])
    errs = res.diff_err[::-1, 0]
    ratios = diffs[:-1] / diffs[1:]
    return BiasOrderReport(field.name, g.name, res.dts[::-1], res.mean[::-1, 0], diffs, errs, ratios, tuple(ratio_range))


def marginal_covariance(field: CoefficientField, w, t: float, scheme: SimScheme) -> tuple[np.ndarray, np.ndarray]:
    """Empirical covariance of X_t (Euler, ``scheme.dt``) and the reference kappa a(w) t.

    Exact in law for constant a, so only sampling error separates the two.
    """
    d = field.dim
    w = np.atleast_1d(np.asarray(w, dtype=float))
    n_steps = max(1, int(round(t / scheme.dt)))
    dt = t / n_steps
    n_blocks = -(-scheme.n_paths // _BLOCK)
    xs = []
    for b, rng in enumerate(spawn_generators(scheme.seed, n_blocks)):
        size = min(_BLOCK, scheme.n_paths - b * _BLOCK)
        x = np.broadcast_to(w, (size, d)).copy()
        for _ in range(n_steps):
            sig = batch_factor(field.matrices(x), scheme.factorization, scheme.kappa)
            x += np.einsum("nij,nj->ni", sig, rng.standard_normal((size, d)) * math.sqrt(dt))
        xs.append(x)
    x = np.concatenate(xs)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    ref = scheme.kappa * t * field.matrices(w[None])[0]
    return cov, ref
