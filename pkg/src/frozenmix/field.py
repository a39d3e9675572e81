"""Variable diffusion coefficients a(x), their validation, and L f = a : D²f.

Fields are evaluated in batches: ``field.matrices(points)`` maps an ``(n, d)``
array to ``(n, d, d)``. Everything downstream (kernels, quadrature, SDE paths)
works on those batches, so a field is just a vectorised callable plus the
ellipticity/Hölder metadata it claims to satisfy.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .expr import compile_expression

__all__ = [
    "SymPosDefMatrix",
    "CoefficientField",
    "FieldSampling",
    "CheckResult",
    "ValidationReport",
    "batch_inverse_det",
    "tensor_grid",
    "eval_field",
    "validate_field",
    "apply_generator",
    "constant_field",
    "expression_field",
    "corpus_field",
    "CORPUS",
]

MatrixFn = Callable[[np.ndarray], np.ndarray]


def _as_points(x, dim: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, -1) if pts.shape[0] == dim else pts.reshape(-1, 1)
    if pts.shape[-1] != dim:
        raise ValueError(f"point dimension {pts.shape[-1]} does not match field dimension {dim}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinates")
    return pts


def batch_inverse_det(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse and determinant of a stack of ``(..., d, d)`` matrices.

    Closed forms for d <= 2 keep the hot loops (quadrature nodes, SDE paths)
    free of LAPACK call overhead.
    """
    d = a.shape[-1]
    if d == 1:
        det = a[..., 0, 0].copy()
        return 1.0 / a, det
    if d == 2:
        a11, a12, a21, a22 = a[..., 0, 0], a[..., 0, 1], a[..., 1, 0], a[..., 1, 1]
        det = a11 * a22 - a12 * a21
        inv = np.empty_like(a)
        inv[..., 0, 0] = a22 / det
        inv[..., 0, 1] = -a12 / det
        inv[..., 1, 0] = -a21 / det
        inv[..., 1, 1] = a11 / det
        return inv, det
    return np.linalg.inv(a), np.linalg.det(a)


@dataclass(frozen=True, eq=False)
class SymPosDefMatrix:
    """A symmetric positive definite matrix with cached inverse and determinant."""

    entries: np.ndarray
    inv: np.ndarray
    det: float

    @classmethod
    def from_array(cls, a) -> "SymPosDefMatrix":
        arr = np.atleast_2d(np.asarray(a, dtype=float))
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("matrix has non-finite entries")
        scale = max(np.max(np.abs(arr)), 1.0)
        if np.max(np.abs(arr - arr.T)) > 1e-12 * scale:
            raise ValueError("matrix is not symmetric")
        arr = 0.5 * (arr + arr.T)
        if np.linalg.eigvalsh(arr)[0] <= 0.0:
            raise ValueError("matrix is not positive definite")
        inv, det = batch_inverse_det(arr)
        inv = 0.5 * (inv + inv.T)
        arr.setflags(write=False)
        inv.setflags(write=False)
        return cls(arr, inv, float(det))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def __repr__(self) -> str:
        return f"SymPosDefMatrix({self.entries.tolist()!r})"


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """A diffusion-coefficient field x -> a(x) with the constants it claims.

    ``lambda_min``/``lambda_max`` are the ellipticity bounds, and
    ``holder_c1``/``holder_alpha`` the modulus |a_ij(x) - a_ij(y)| <= c1 (1 ^ |x-y|^alpha).
    ``spec`` is a JSON-able description used to round-trip configs.
    """

    dim: int
    func: MatrixFn
    lambda_min: float
    lambda_max: float
    holder_c1: float
    holder_alpha: float
    name: str = "custom"
    spec: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if not 0.0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if not 0.0 < self.holder_alpha <= 1.0:
            raise ValueError("holder_alpha must lie in (0, 1]")
        if self.holder_c1 < 0.0:
            raise ValueError("holder_c1 must be non-negative")

    def matrices(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, self.dim)
        a = np.asarray(self.func(flat), dtype=float).reshape(flat.shape[0], self.dim, self.dim)
        return a.reshape(pts.shape[:-1] + (self.dim, self.dim))

    def frozen(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(a, A, det a)`` at each point, with A = a^{-1}."""
        a = self.matrices(points)
        inv, det = batch_inverse_det(a)
        return a, inv, det

    @property
    def is_constant(self) -> bool:
        return self.spec.get("kind") == "constant" or bool(self.spec.get("constant"))

    def __call__(self, x) -> SymPosDefMatrix:
        return eval_field(self, x)


def eval_field(field: CoefficientField, x) -> SymPosDefMatrix:
    """Evaluate a(x) at a single point."""
    pts = _as_points(x, field.dim)
    if pts.shape[0] != 1:
        raise ValueError("eval_field takes a single point; use field.matrices for batches")
    return SymPosDefMatrix.from_array(field.matrices(pts)[0])


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class FieldSampling:
    """Where ``validate_field`` looks: a tensor grid plus seeded random pairs."""

    grid_n: int = 41
    box: float = 5.0
    n_pairs: int = 10_000
    seed: int = 0
    min_log_sep: float = -6.0
    max_log_sep: float = 1.0

    def __post_init__(self):
        if self.grid_n < 2 or self.n_pairs < 0 or self.box <= 0:
            raise ValueError("sampling spec must be nonempty")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    bound: float
    witness: tuple


@dataclass(frozen=True)
class ValidationReport:
    field: str
    checks: tuple[CheckResult, ...]
    c1_hat: float
    eig_min: float
    eig_max: float
    n_points: int
    n_pairs: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def tensor_grid(dim: int, n: int, box: float) -> np.ndarray:
    """The n^dim tensor grid on [-box, box]^dim, last axis fastest."""
    axis = np.linspace(-box, box, n)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _sample_pairs(dim: int, sampling: FieldSampling) -> tuple[np.ndarray, np.ndarray]:
    # grid-neighbour pairs along every axis, then seeded pairs with log-uniform separations
    n = sampling.grid_n
    xs, ys = [], []
    pts = tensor_grid(dim, n, sampling.box).reshape((n,) * dim + (dim,))
    for k in range(dim):
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[k] = slice(0, n - 1)
        hi[k] = slice(1, n)
        xs.append(pts[tuple(lo)].reshape(-1, dim))
        ys.append(pts[tuple(hi)].reshape(-1, dim))
    # the origin against a ladder of nearby points catches moduli worse than claimed at 0
    ladder = 10.0 ** np.linspace(sampling.min_log_sep, sampling.max_log_sep, 29)
    e1 = np.zeros(dim)
    e1[0] = 1.0
    xs.append(np.zeros((ladder.size, dim)))
    ys.append(ladder[:, None] * e1)
    if sampling.n_pairs:
        rng = np.random.default_rng(sampling.seed)
        x = rng.uniform(-sampling.box, sampling.box, size=(sampling.n_pairs, dim))
        u = rng.normal(size=(sampling.n_pairs, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = 10.0 ** rng.uniform(sampling.min_log_sep, sampling.max_log_sep, size=sampling.n_pairs)
        xs.append(x)
        ys.append(x + r[:, None] * u)
    return np.concatenate(xs), np.concatenate(ys)


def validate_field(field: CoefficientField, sampling: FieldSampling | None = None) -> ValidationReport:
    """Check ellipticity, the Hölder modulus and the column-norm bounds on samples.

    Violations are reported, never raised; each check carries the worst
    sampled value and the point (or pair) where it occurred.
    """
    sampling = sampling or FieldSampling()
    d = field.dim
    pts = tensor_grid(d, sampling.grid_n, sampling.box)
    px, py = _sample_pairs(d, sampling)
    pts = np.concatenate([pts, px, py])
    a = field.matrices(pts)
    checks = []

    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(-1, -2))
    k = int(np.argmax(asym))
    checks.append(CheckResult("symmetry", bool(asym[k] == 0.0), float(asym[k]), 0.0, (pts[k].tolist(),)))

    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    eig = np.linalg.eigvalsh(sym)
    lo, hi = eig[:, 0], eig[:, -1]
    k_lo, k_hi = int(np.argmin(lo)), int(np.argmax(hi))
    checks.append(
        CheckResult(
            "elliptic_lower",
            bool(lo[k_lo] >= field.lambda_min * (1 - 1e-12)),
            float(lo[k_lo]),
            field.lambda_min,
            (pts[k_lo].tolist(),),
        )
    )
    checks.append(
        CheckResult(
            "elliptic_upper",
            bool(hi[k_hi] <= field.lambda_max * (1 + 1e-12)),
            float(hi[k_hi]),
            field.lambda_max,
            (pts[k_hi].tolist(),),
        )
    )

    col_a = np.max(np.sqrt(np.sum(sym**2, axis=-2)), axis=-1)
    k = int(np.argmax(col_a))
    checks.append(
        CheckResult(
            "column_norm_a",
            bool(col_a[k] <= field.lambda_max * (1 + 1e-12)),
            float(col_a[k]),
            field.lambda_max,
            (pts[k].tolist(),),
        )
    )
    good = lo > 0
    inv = np.full_like(sym, np.inf)
    inv[good] = np.linalg.inv(sym[good])
    col_inv = np.max(np.sqrt(np.sum(inv**2, axis=-2)), axis=-1)
    k = int(np.argmax(col_inv))
    checks.append(
        CheckResult(
            "column_norm_inverse",
            bool(col_inv[k] <= (1 + 1e-12) / field.lambda_min),
            float(col_inv[k]),
            1.0 / field.lambda_min,
            (pts[k].tolist(),),
        )
    )

    ax, ay = field.matrices(px), field.matrices(py)
    dist = np.linalg.norm(px - py, axis=1)
    keep = dist > 0
    diff = np.max(np.abs(ax - ay), axis=(-1, -2))[keep]
    modulus = np.minimum(1.0, dist[keep] ** field.holder_alpha)
    ratio = diff / modulus
    excess = diff - field.holder_c1 * modulus
    k = int(np.argmax(excess))
    kr = int(np.argmax(ratio))
    c1_hat = float(ratio[kr])
    wx, wy = px[keep][k], py[keep][k]
    checks.append(
        CheckResult(
            "holder",
            bool(c1_hat <= field.holder_c1 * (1 + 1e-12) + 1e-15),
            c1_hat,
            field.holder_c1,
            (wx.tolist(), wy.tolist()),
        )
    )
    return ValidationReport(
        field=field.name,
        checks=tuple(checks),
        c1_hat=c1_hat,
        eig_min=float(lo[k_lo]),
        eig_max=float(hi[k_hi]),
        n_points=int(pts.shape[0]),
        n_pairs=int(px.shape[0]),
    )


# -- the operator ---------------------------------------------------------------


def apply_generator(field: CoefficientField, f, x) -> np.ndarray | float:
    """L f(x) = sum_ij a_ij(x) D_ij f(x).

    ``x`` may be a single point or an ``(n, d)`` batch; a batch returns an array.
    """
    if getattr(f, "dim", field.dim) != field.dim:
        raise ValueError(f"test function has dimension {f.dim}, field has {field.dim}")
    pts = np.asarray(x, dtype=float)
    single = pts.ndim <= 1 and pts.size == field.dim
    pts = _as_points(pts, field.dim)
    a = field.matrices(pts)
    h = f.hess(pts)
    out = np.einsum("nij,nij->n", a, h)
    return float(out[0]) if single else out


# -- constructors and the built-in corpus ------------------------------------------


def constant_field(a, name: str | None = None, c1: float = 0.0) -> CoefficientField:
    m = SymPosDefMatrix.from_array(a)
    eig = m.eigvalsh()
    entries = np.array(m.entries)

    def func(points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(entries, (points.shape[0],) + entries.shape).copy()

    return CoefficientField(
        dim=m.dim,
        func=func,
        lambda_min=float(eig[0]),
        lambda_max=float(eig[-1]),
        holder_c1=c1,
        holder_alpha=1.0,
        name=name or "constant",
        spec={"kind": "constant", "matrix": entries.tolist()},
    )


def expression_field(
    dim: int,
    entries: Sequence[Sequence[str]],
    lambda_min: float,
    lambda_max: float,
    holder_c1: float,
    holder_alpha: float,
    name: str = "inline",
) -> CoefficientField:
    """Build a field from per-entry closed-form expressions (upper triangle is mirrored)."""
    if len(entries) != dim or any(len(row) != dim for row in entries):
        raise ValueError(f"entries must be a {dim}x{dim} table of expressions")
    compiled = {}
    for i in range(dim):
        for j in range(i, dim):
            compiled[i, j] = compile_expression(str(entries[i][j]), dim)

    def func(points: np.ndarray) -> np.ndarray:
        out = np.empty((points.shape[0], dim, dim))
        for (i, j), fn in compiled.items():
            v = fn(points)
            out[:, i, j] = v
            out[:, j, i] = v
        return out

    return CoefficientField(
        dim=dim,
        func=func,
        lambda_min=lambda_min,
        lambda_max=lambda_max,
        holder_c1=holder_c1,
        holder_alpha=holder_alpha,
        name=name,
        spec={
            "kind": "expression",
            "dim": dim,
            "entries": [[str(e) for e in row] for row in entries],
            "lambda_min": lambda_min,
            "lambda_max": lambda_max,
            "holder_c1": holder_c1,
            "holder_alpha": holder_alpha,
        },
    )


def _holder_field(dim: int, alpha: float) -> CoefficientField:
    def func(points: np.ndarray) -> np.ndarray:
        r = np.sqrt(np.sum(points * points, axis=1))
        s = 1.0 + 0.5 * np.minimum(1.0, r**alpha)
        return s[:, None, None] * np.eye(dim)

    # |min(1,r^a) - min(1,s^a)| <= min(1, |r-s|^a) by subadditivity of r^a
    return CoefficientField(dim, func, 1.0, 1.5, 0.5, alpha, name=f"holder-{dim}d-a{alpha:g}")


def _smooth_field() -> CoefficientField:
    def func(points: np.ndarray) -> np.ndarray:
        out = np.zeros((points.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 + 0.5 * np.sin(points[:, 0])
        out[:, 1, 1] = 1.0 + 0.5 * np.cos(points[:, 1])
        return out

    # Lipschitz 1/2 locally, but sin swings by 1 over distances > 1, hence c1 = 1
    return CoefficientField(2, func, 0.5, 1.5, 1.0, 1.0, name="smooth-2d")


def _rotation_field() -> CoefficientField:
    def func(points: np.ndarray) -> np.ndarray:
        theta = 0.25 * np.pi * np.sin(points[:, 0])
        c, s = np.cos(theta), np.sin(theta)
        out = np.empty((points.shape[0], 2, 2))
        out[:, 0, 0] = c * c + 2.0 * s * s
        out[:, 1, 1] = s * s + 2.0 * c * c
        out[:, 0, 1] = out[:, 1, 0] = c * s
        return out

    return CoefficientField(2, func, 1.0, 2.0, 1.0, 1.0, name="rotation-2d")


_BUILDERS: dict[str, Callable[[], CoefficientField]] = {
    "identity-1d": lambda: constant_field(np.eye(1), name="identity-1d"),
    "identity-2d": lambda: constant_field(np.eye(2), name="identity-2d"),
    "smooth-2d": _smooth_field,
    "holder-1d-a0.25": lambda: _holder_field(1, 0.25),
    "holder-1d-a0.5": lambda: _holder_field(1, 0.5),
    "holder-2d-a0.25": lambda: _holder_field(2, 0.25),
    "holder-2d-a0.5": lambda: _holder_field(2, 0.5),
    "rotation-2d": _rotation_field,
}

CORPUS: tuple[str, ...] = tuple(_BUILDERS)


def corpus_field(name: str) -> CoefficientField:
    """Look up a built-in field by name (see ``CORPUS``)."""
    try:
        fld = _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown field {name!r}; choose from {', '.join(CORPUS)}") from None
    if fld.spec.get("kind") != "constant":
        object.__setattr__(fld, "spec", {"kind": "corpus", "name": name})
    else:
        object.__setattr__(fld, "spec", {"kind": "corpus", "name": name, "constant": True})
    return fld
