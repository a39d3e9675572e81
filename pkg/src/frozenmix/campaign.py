"""Check families: run a module's verifier over the configured fields and emit rows.

Each ``run_*`` function takes an :class:`ExperimentConfig` and returns a
list of :class:`Row`. Row verdicts come from the recorded numbers alone
(see :mod:`frozenmix.report`), so a family's CSV is its own evidence.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ExperimentConfig, resolve_field, resolve_function
from .field import FieldSampling, SymPosDefMatrix, tensor_grid, validate_field
from .functions import corpus_functions
from .integrate import IntegrationSpec, integrate_spatial
from .kernel import chapman_kolmogorov, kernel_density, kernel_hessian
from .parametrix import (
    contraction_check,
    discrepancy_sweep,
    empirical_c4,
    identity_check,
    lambda0,
    prop21_verify,
    prop22_verify,
    prop23_verify,
)
from .report import Row
from .sde import SimScheme, bias_order, marginal_covariance, martingale_residuals, uniqueness_gap

__all__ = ["FAMILIES", "run_family"]

KERNEL_MATRICES = ([[1.0]], [[2.5]], [[1.0, 0.0], [0.0, 1.0]], [[1.5, 0.4], [0.4, 0.8]], [[2.0, -0.7], [-0.7, 1.0]])


def _e1(d: int, r: float) -> np.ndarray:
    x = np.zeros(d)
    x[0] = r
    return x


def _x(v) -> list:
    return [float(c) for c in np.atleast_1d(v)]


# -- validate-field ------------------------------------------------------------------

_RELATION = {
    "symmetry": ("<=", lambda b: 0.0),
    "elliptic_lower": (">=", lambda b: b * (1 - 1e-12)),
    "elliptic_upper": ("<=", lambda b: b * (1 + 1e-12)),
    "column_norm_a": ("<=", lambda b: b * (1 + 1e-12)),
    "column_norm_inverse": ("<=", lambda b: b * (1 + 1e-12)),
    "holder": ("<=", lambda b: b * (1 + 1e-12) + 1e-15),
}


def run_validate(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.validate
    sampling = FieldSampling(grid_n=sec.grid_n, box=sec.box, n_pairs=sec.n_pairs, seed=cfg.seed)
    rows = []
    for fld in cfg.section_fields("validate"):
        rep = validate_field(fld, sampling)
        for c in rep.checks:
            rel, bound = _RELATION[c.name]
            rows.append(Row("validate-field", c.name, fld.name, {"witness": list(c.witness)}, c.worst, bound(c.bound), rel))
    return rows


# -- kernel-checks -------------------------------------------------------------------


def _fd_hessian_x(A, det, t, kappa, diff, h):
    """Central second differences of p in x (diff = y - x), one step size."""
    d = diff.size
    H = np.empty((d, d))
    e = np.eye(d) * h
    for i in range(d):
        for j in range(d):
            pts = [diff - e[i] - e[j], diff - e[i] + e[j], diff + e[i] - e[j], diff + e[i] + e[j]]
            v = kernel_density(A, det, t, kappa, np.array(pts))
            H[i, j] = (v[0] - v[1] - v[2] + v[3]) / (4 * h * h)
    return H


def run_kernel(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.kernel
    rows = []
    for k, entries in enumerate(KERNEL_MATRICES):
        a = SymPosDefMatrix.from_array(entries)
        d = a.dim
        name = f"a{k}"
        for t in sec.times:
            for kappa in (1, 2):
                inputs = {"a": entries, "t": t, "kappa": kappa}
                sig = math.sqrt(kappa * t * float(a.eigvalsh()[-1]))
                x = np.zeros(d)
                diff = np.full(d, 0.3 * sig)
                diff[0] = 0.7 * sig
                # normalization with a proposal wider than the kernel, so the rule is not exact by design
                spec = IntegrationSpec(nodes_per_axis=sec.gh_nodes, max_nodes_per_axis=sec.gh_nodes).with_proposal(
                    x, 1.5 * kappa * t * np.asarray(a.entries)
                )
                est = integrate_spatial(lambda y: kernel_density(a.inv, a.det, t, kappa, y - x), spec, d)
                rows.append(Row("kernel-checks", "normalization", name, inputs, abs(est.value - 1.0), sec.normalization_tol, "<=", est.abs_error))

                H = kernel_hessian(a.inv, a.det, t, kappa, diff)
                h = 1e-2 * sig
                h1 = _fd_hessian_x(a.inv, a.det, t, kappa, diff, h)
                h2 = _fd_hessian_x(a.inv, a.det, t, kappa, diff, h / 2)
                fd = h2 + (h2 - h1) / 3.0
                scale = float(np.max(np.abs(H)))
                rel = float(np.max(np.abs(fd - H))) / scale
                rows.append(Row("kernel-checks", "hessian_fd", name, inputs, rel, sec.hessian_rtol, "<="))

                lhs, rhs = chapman_kolmogorov(a, t, 0.5 * t, x, x + diff, kappa=kappa, n=sec.gh_nodes)
                rows.append(Row("kernel-checks", "chapman_kolmogorov", name, inputs, abs(lhs - rhs), sec.ck_tol, "<="))

                if kappa == 2:
                    # d/dt p = sum a_ij D_ij p, Richardson-extrapolated central difference in t
                    def dpdt(ht):
                        p = kernel_density(a.inv, a.det, np.array([t - ht, t + ht]), kappa, diff)
                        return (p[1] - p[0]) / (2 * ht)

                    ht = 1e-2 * t
                    dt_fd = dpdt(ht / 2) + (dpdt(ht / 2) - dpdt(ht)) / 3.0
                    gen = float(np.sum(np.asarray(a.entries) * H))
                    rel = abs(dt_fd - gen) / max(abs(gen), float(kernel_density(a.inv, a.det, t, kappa, diff)) / t)
                    rows.append(Row("kernel-checks", "generator_identity", name, inputs, rel, sec.generator_rtol, "<="))
    return rows


# -- prop21 --------------------------------------------------------------------------


def _exact_moment(a_ii: float, p: float, kappa: float) -> float:
    return (kappa * a_ii) ** p * 2.0**p * math.gamma(p + 0.5) / math.sqrt(math.pi)


def run_prop21(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.prop21
    spec = cfg.integration_spec()
    rows = []
    for fld in cfg.section_fields("prop21"):
        d, name = fld.dim, fld.name
        xs = tensor_grid(d, sec.x_n, sec.box)
        r = prop21_verify(
            fld, sec.t_grid, xs, sec.n_grid, sec.p_list, spec, sec.kappa, sec.gh_nodes, sec.moment_nodes,
            tensor_grid(d, sec.tail_x_n, sec.box), sec.mass_tol,
        )
        bound = r.mass_bound + sec.mass_tol
        for i, t in enumerate(r.t_grid):
            for j, x in enumerate(xs):
                rows.append(Row("prop21", "mass", name, {"t": float(t), "x": _x(x)}, r.mass[i, j], bound, "<=", r.mass_err[i, j]))
        worst = r.tail.max(axis=(0, 1))
        for k, nn in enumerate(r.n_grid):
            rows.append(Row("prop21", "tail_max", name, {"N": float(nn)}, worst[k]))
        rows.append(Row("prop21", "tail_c1", name, {}, r.c1_hat))
        rows.append(Row("prop21", "tail_decay", name, {}, r.c2_hat, 0.0, ">"))
        step = np.diff(r.tail, axis=-1) - (r.tail_err[..., 1:] + r.tail_err[..., :-1])
        rows.append(Row("prop21", "tail_monotone", name, {}, float(step.max()) if step.size else 0.0, 0.0, "<="))
        for k, p in enumerate(r.p_list):
            m, e = r.moments[:, :, k, :], r.moments_err[:, :, k, :]
            upper = float((m + e).max())
            rows.append(
                Row("prop21", "moment_bound", name, {"p": p}, r.c3_hat[p], r.c3_bound[p] * (1 + sec.mass_tol), "<=", upper - r.c3_hat[p])
            )
            if fld.is_constant:
                a = fld.matrices(np.zeros((1, d)))[0]
                for ax in range(d):
                    exact = _exact_moment(a[ax, ax], p, sec.kappa)
                    dev = float(np.abs(m[..., ax] - exact).max())
                    rows.append(
                        Row("prop21", "moment_exact", name, {"p": p, "axis": ax, "exact": exact}, dev, sec.exact_tol, "<=", float(e[..., ax].max()))
                    )
    return rows


# -- prop22 --------------------------------------------------------------------------


def run_prop22(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.prop22
    spec = cfg.integration_spec()
    rows = []
    for fld in cfg.section_fields("prop22"):
        d, name = fld.dim, fld.name
        g = resolve_function(cfg.g, d)
        probes = np.array([_e1(d, o) for o in sec.probe_offsets])
        r = prop22_verify(fld, g, probes, sec.k_max, spec, sec.kappa, sec.final_tol, sec.bound_rtol)
        diffs = r.diffs
        for i, x in enumerate(probes):
            for k, tau in enumerate(r.taus):
                inputs = {"x": _x(x), "tau": float(tau)}
                rows.append(Row("prop22", "ladder", name, inputs, r.values[i, k], float("nan"), "info", r.errors[i, k]))
                rows.append(Row("prop22", "bounded", name, inputs, abs(r.values[i, k]), r.sup_bound, "<=", r.errors[i, k]))
            inputs = {"x": _x(x), "target": float(r.targets[i])}
            rows.append(Row("prop22", "final_diff", name, inputs, diffs[i, -1], sec.final_tol, "<=", r.errors[i, -1]))
            rows.append(Row("prop22", "trend_slope", name, inputs, r.slopes[i], 0.0, "<"))
            rows.append(Row("prop22", "trend_endpoints", name, inputs, diffs[i, -1] - diffs[i, 0], 0.0, "<"))
    return rows


# -- prop23 --------------------------------------------------------------------------


def run_prop23(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.prop23
    rows = []
    for fld in cfg.section_fields("prop23"):
        d, name, alpha = fld.dim, fld.name, fld.holder_alpha
        xs = tensor_grid(d, sec.x_n, sec.box)
        r = prop23_verify(fld, sec.t_small, sec.t_large, xs, sec.kappa, sec.gh_nodes, sec.slope_tol, sec.majorant_rtol)
        grid = r.grid
        pb = grid.phi_bar()
        lo = 1.0 + sec.majorant_rtol
        ns = len(sec.t_small)
        for k, t in enumerate(grid.t):
            branch = "small" if k < ns else "large"
            inputs = {"t": float(t), "branch": branch}
            rows.append(Row("prop23", "phi_bar", name, inputs, pb[k], float("nan"), "info", float(grid.phi_err[k].max())))
            rows.append(Row("prop23", "phi_scaled", name, inputs, pb[k] * t ** (1 - alpha / 2)))
            rows.append(Row("prop23", "phi_times_t", name, inputs, pb[k] * t))
            rows.append(Row("prop23", "phi_le_genbnd", name, inputs, float((grid.phi[k] - grid.genbnd[k] * lo).max()), 0.0, "<="))
            gb = grid.genbnd[k].max(axis=(1, 2))
            rows.append(Row("prop23", "genbnd_le_chain", name, inputs, float((gb - grid.chain[k] * lo).max()), 0.0, "<="))
        if np.all(pb > 0):
            rows.append(Row("prop23", "small_t_slope", name, {"alpha": alpha}, r.slope_small, alpha / 2 - 1 - sec.slope_tol, ">="))
            rows.append(Row("prop23", "small_t_slope_x0", name, {"alpha": alpha}, r.slope_small_x0))
            rows.append(Row("prop23", "large_t_slope", name, {"alpha": alpha}, r.slope_large, -1 + sec.slope_tol, "<="))
        else:
            rows.append(Row("prop23", "phi_identically_zero", name, {}, float(pb.max()), 0.0, "<="))
        rows.append(Row("prop23", "c4_hat", name, {"alpha": alpha}, r.c4_hat))
        rows.append(Row("prop23", "c4p_hat", name, {"alpha": alpha}, r.c4p_hat))
    return rows


# -- resolvent-identity --------------------------------------------------------------


def run_identity(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.identity
    spec = cfg.integration_spec()
    rows = []
    for fld in cfg.section_fields("identity"):
        d, name = fld.dim, fld.name
        g = resolve_function(cfg.g, d)
        xs = np.array([_e1(d, o) for o in sec.x_offsets])
        r = identity_check(fld, g, sec.lam, sec.eps, xs, 2.0, spec, sec.frozen_tol, sec.fd_step, sec.decomposition_atol)
        base = {"lam": sec.lam, "eps": sec.eps}
        for fr in r.frozen_rows:
            inputs = {**base, "x": fr["x"], "y": fr["y"]}
            rows.append(Row("resolvent-identity", "frozen_residual", name, inputs, abs(fr["residual"]), sec.frozen_tol, "<="))
            lv = [abs(v) for v in fr["residual_levels"]]
            growth = max(b - a for a, b in zip(lv, lv[1:]))
            floor = 64 * np.finfo(float).eps * max(fr["p_eps"], 1.0) * (1 + sec.lam)
            rows.append(Row("resolvent-identity", "frozen_refinement", name, inputs, growth, floor, "<="))
        for dr in r.decomposition_rows:
            inputs = {**base, "x": dr["x"]}
            rows.append(Row("resolvent-identity", "decomposition", name, inputs, abs(dr["residual"]), dr["tolerance"], "<="))
    return rows


# -- contraction ---------------------------------------------------------------------


def _contraction_grid(cfg: ExperimentConfig, d: int) -> np.ndarray:
    sec = cfg.contraction
    return tensor_grid(d, sec.x_n_1d if d == 1 else sec.x_n_2d, sec.box)


def _contraction_spec(cfg: ExperimentConfig) -> IntegrationSpec:
    return IntegrationSpec(**{**cfg.integration, **cfg.contraction.integration})


def run_contraction(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.contraction
    spec = _contraction_spec(cfg)
    rows = []
    for fld in cfg.section_fields("contraction"):
        d, name = fld.dim, fld.name
        g = resolve_function(cfg.g, d)
        xs = _contraction_grid(cfg, d)
        r = contraction_check(
            fld, g, sec.eps_list, xs, sec.t_grid, 2.0, spec, sec.safety, sec.lam_factor, sec.default_lam,
            sec.gh_nodes, sec.majorant_nodes, sec.contraction_bound,
        )
        rows.append(Row("contraction", "c4_hat", name, {}, r.c4_hat))
        if r.note:
            rows.append(Row("contraction", "lambda0", name, {"note": r.note}, float("inf"), float("inf"), "<"))
            continue
        rows.append(Row("contraction", "lambda0", name, {}, r.lambda0_hat if r.lambda0_hat is not None else float("nan")))
        rows.append(Row("contraction", "lambda", name, {}, r.lam))
        bound = sec.contraction_bound * g.sup_norm
        for row in r.rows:
            inputs = {"eps": row["eps"], "x": row["x"], "lam": r.lam}
            rows.append(Row("contraction", "contraction", name, inputs, abs(row["j"]), bound, "<=", row["j_err"]))
            rows.append(Row("contraction", "majorant", name, inputs, abs(row["j"]), row["majorant"], "<=", row["j_err"]))
    return rows


# -- uniqueness ----------------------------------------------------------------------


def _scheme(spec: dict, lam: float, lam_horizon: float, n_paths: int, seed: int) -> SimScheme:
    return SimScheme(
        factorization=spec["factorization"],
        dt=spec["lam_dt"] / lam,
        horizon=lam_horizon / lam,
        n_paths=n_paths,
        seed=(seed + spec.get("seed_offset", 0)) % 2**64,
    )


def _lambda0_hat(cfg: ExperimentConfig, fld) -> float:
    sec = cfg.contraction
    grid = discrepancy_sweep(fld, sec.t_grid, _contraction_grid(cfg, fld.dim), 2.0, sec.gh_nodes)
    return lambda0(fld.holder_alpha, fld.dim, sec.safety * max(empirical_c4(grid, fld.holder_alpha)))


def run_uniqueness(cfg: ExperimentConfig) -> list[Row]:
    sec = cfg.uniqueness
    rows = []
    for fld in cfg.section_fields("uniqueness"):
        d, name = fld.dim, fld.name
        w = _e1(d, sec.start_offset)
        corpus = corpus_functions(d, sec.n_functions)
        lams = [float(v) for v in sec.lams]
        if sec.lambda0_factor is not None and not fld.is_constant:
            lam0 = _lambda0_hat(cfg, fld)
            rows.append(Row("uniqueness", "lambda0", name, {}, lam0))
            lams.append(sec.lambda0_factor * lam0)
        for lam in lams:
            sa = _scheme(sec.scheme_a, lam, sec.lam_horizon, sec.n_paths, cfg.seed)
            sb = _scheme(sec.scheme_b, lam, sec.lam_horizon, sec.n_paths, cfg.seed)
            u = uniqueness_gap(fld, corpus, lam, w, sa, sb)
            for r in u.rows:
                inputs = {"g": r["g"], "lam": lam, "w": _x(w), "s_a": r["s_a"], "s_b": r["s_b"], "scheme_a": sa.scheme_id, "scheme_b": sb.scheme_id}
                rows.append(Row("uniqueness", "gap", name, inputs, r["gap"], r["allowance"], "<="))
            rows.append(Row("uniqueness", "theta_hat", name, {"lam": lam}, u.theta_hat))
            for f, (est, bias) in zip(corpus, martingale_residuals(fld, corpus[: sec.n_residual_functions], lam, w, sa)):
                inputs = {"f": f.name, "lam": lam, "w": _x(w), "scheme": sa.scheme_id, "bias": bias}
                rows.append(Row("uniqueness", "martingale_residual", name, inputs, abs(est.value), est.abs_error + bias, "<="))

    fld = resolve_field(sec.bias_field)
    d = fld.dim
    g = resolve_function(cfg.g, d)
    scheme = SimScheme("cholesky", sec.bias_lam_dt / sec.bias_lam, sec.lam_horizon / sec.bias_lam, sec.n_paths, cfg.seed)
    rep = bias_order(fld, g, sec.bias_lam, _e1(d, sec.start_offset), scheme, sec.bias_halvings, tuple(sec.bias_ratio_range))
    for h, diff, err in zip(rep.dts, rep.diffs, rep.diff_errs):
        rows.append(Row("uniqueness", "bias_difference", fld.name, {"dt_coarse": float(h), "lam": sec.bias_lam}, diff, float("nan"), "info", err))
    lo, hi = sec.bias_ratio_range
    for k, ratio in enumerate(rep.ratios):
        inputs = {"halving": k + 1, "lam": sec.bias_lam, "g": g.name}
        rows.append(Row("uniqueness", "bias_ratio_lower", fld.name, inputs, ratio, lo, ">="))
        rows.append(Row("uniqueness", "bias_ratio_upper", fld.name, inputs, ratio, hi, "<="))

    for ref in sec.cov_fields:
        fld = resolve_field(ref)
        w = _e1(fld.dim, sec.start_offset)
        for method in ("cholesky", "spectral"):
            scheme = SimScheme(method, sec.cov_dt, 1.0, sec.cov_paths, cfg.seed)
            for t in sec.cov_times:
                cov, ref_cov = marginal_covariance(fld, w, t, scheme)
                rel = float(np.linalg.norm(cov - ref_cov) / np.linalg.norm(ref_cov))
                rows.append(Row("uniqueness", "marginal_covariance", fld.name, {"t": t, "factorization": method}, rel, sec.cov_rtol, "<="))
    return rows


FAMILIES = {
    "validate-field": run_validate,
    "kernel-checks": run_kernel,
    "prop21": run_prop21,
    "prop22": run_prop22,
    "prop23": run_prop23,
    "resolvent-identity": run_identity,
    "contraction": run_contraction,
    "uniqueness": run_uniqueness,
}


def run_family(name: str, cfg: ExperimentConfig) -> list[Row]:
    try:
        fn = FAMILIES[name]
    except KeyError:
        raise KeyError(f"unknown check family {name!r}") from None
    return fn(cfg)
