"""Forward/backward mean derivatives of path ensembles and their complex combination.

Estimation conditions on the current state only (a Markov surrogate for the
past/future filtrations), which is exact for the Markov diffusions this
package simulates. This is the central modeling decision of the estimator
layer; it is what turns conditional expectations into regressions.

Two main routes produce a derivative field:

* regression: Nadaraya-Watson (Gaussian kernel, Silverman bandwidth) of the
  forward or backward difference quotients on the current state, with a
  k-nearest-neighbour fallback in thin regions;
* analytic: the density formula, complex derivative = b - c + i c with
  c = div_a(p) / (2 p) evaluated pathwise, exact for Gaussian families.

Zero-noise ensembles take a dedicated branch: difference quotients are exact,
forward and backward derivatives coincide in the limit, and the complex
derivative is the (real) central quotient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .density import DiracDensityModel, GaussianDensityModel, KdeDensityModel, silverman_bandwidth
from .diffusion import DiffusionModel, PathEnsemble, TimeGrid
from .exceptions import CapabilityError, EstimationError, InputError
from .stats import mean_stderr

Array = np.ndarray


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of the regression estimators.

    ``h_steps`` is the difference-quotient step in grid units (bias O(h)).
    ``times`` restricts estimation to selected grid times; None means every
    admissible interior time (expensive at large N * M).
    """

    h_steps: int = 1
    regression: str = "nw"  # "nw" | "knn"
    bandwidth_rule: object = "silverman"
    bandwidth_scale: float = 1.0
    knn_k: int = 64
    min_effective: float = 10.0
    mask_low_density: bool = True
    times: Sequence[float] | None = None

    def __post_init__(self):
        if self.h_steps < 1:
            raise InputError("h must be a positive integer multiple of the grid step")
        if self.regression not in ("nw", "knn"):
            raise InputError(f"unknown regression rule {self.regression!r}")
        if self.regression == "knn" and self.knn_k < 10:
            raise InputError("k must be >= 10 for k-nearest-neighbour regression")


@dataclass
class DerivativeField:
    """Per-path, per-time complex d-vector estimates of one derivative operator.

    ``operator`` is one of D (forward), Dstar (backward), Dc (complex),
    DcBar (conjugate complex), Dc2 (second). ``valid`` marks usable entries;
    boundary times and low-density points are masked out. ``stderr`` holds a
    per-time aggregate standard-error diagnostic where the method provides one.
    """

    grid: TimeGrid
    operator: str
    method: str
    values: Array  # (N, M+1, p) complex
    valid: Array  # (N, M+1) bool
    stderr: Array | None = None
    warnings: list = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def out_dim(self) -> int:
        return self.values.shape[2]

    def conjugate(self) -> "DerivativeField":
        """Conjugate field; for real ensembles DcBar is exactly conj(Dc)."""
        flip = {"Dc": "DcBar", "DcBar": "Dc", "D": "D", "Dstar": "Dstar", "Dc2": "Dc2Bar"}
        return replace(self, values=np.conj(self.values),
                       operator=flip.get(self.operator, self.operator + "Bar"))

    def masked_fraction(self, interior_only: bool = True) -> float:
        sl = slice(1, -1) if interior_only else slice(None)
        block = self.valid[:, sl]
        return float(1.0 - block.mean()) if block.size else 1.0

    def valid_time_indices(self) -> Array:
        return np.flatnonzero(self.valid.any(axis=0))

    def at_time(self, t: float) -> tuple[Array, Array]:
        m = self.grid.index_of(t)
        return self.values[:, m, :], self.valid[:, m]


def _check_compatible(a: DerivativeField, b: DerivativeField) -> None:
    if a.grid != b.grid or a.values.shape != b.values.shape:
        raise InputError("derivative fields do not share grid and ensemble shape")


def _estimation_indices(grid: TimeGrid, cfg: EstimatorConfig, forward: bool) -> list[int]:
    k = cfg.h_steps
    if cfg.times is not None:
        idx = [grid.index_of(t) for t in cfg.times]
    else:
        idx = list(range(grid.steps + 1))
    lo = 0 if forward else k
    hi = grid.steps - k if forward else grid.steps
    out = [m for m in idx if lo <= m <= hi]
    if cfg.times is not None and len(out) < len(idx):
        raise InputError("requested estimation times fall outside the admissible range")
    return out


# ---------------------------------------------------------------------------
# regression backends
# ---------------------------------------------------------------------------

def _knn_mean(sources: Array, responses: Array, queries: Array, k: int):
    k = min(k, sources.shape[0])
    tree = cKDTree(sources)
    _, idx = tree.query(queries, k=k)
    if k == 1:
        idx = idx[:, None]
    picked = responses[idx]  # (q, k, p)
    est = picked.mean(axis=1)
    se = np.sqrt(np.sum(picked.real.var(axis=1, ddof=1) + picked.imag.var(axis=1, ddof=1),
                        axis=1) / k)
    return est, se


def _nw_mean(sources: Array, responses: Array, queries: Array, bandwidth: Array,
             chunk: int | None = None):
    """Nadaraya-Watson estimate at each query, with effective-size diagnostics.

    The per-query variance is the weighted residual variance divided by the
    kernel effective sample size, sum(w^2) * resid_var / sum(w)^2.
    """
    nq = queries.shape[0]
    n_src = sources.shape[0]
    p = responses.shape[1]
    if chunk is None:
        chunk = max(16, int(2_000_000 / max(n_src, 1)))
    est = np.empty((nq, p), dtype=responses.dtype)
    se = np.empty(nq)
    eff = np.empty(nq)
    scaled_src = sources / bandwidth
    scaled_q = queries / bandwidth
    resp_sq = np.sum(np.abs(responses) ** 2, axis=1)
    for s in range(0, nq, chunk):
        e = min(s + chunk, nq)
        z = scaled_q[s:e, None, :] - scaled_src[None, :, :]
        w = np.exp(-0.5 * np.einsum("qnd,qnd->qn", z, z))
        sw = w.sum(axis=1)
        sw2 = np.einsum("qn,qn->q", w, w)
        good = sw > 0
        blk = np.zeros((e - s, p), dtype=responses.dtype)
        blk[good] = (w[good] @ responses) / sw[good, None]
        resid_var = np.zeros(e - s)
        resid_var[good] = np.maximum(
            (w[good] @ resp_sq) / sw[good] - np.sum(np.abs(blk[good]) ** 2, axis=1), 0.0
        )
        var = np.zeros(e - s)
        var[good] = resid_var[good] * sw2[good] / sw[good] ** 2
        est[s:e] = blk
        se[s:e] = np.sqrt(var)
        with np.errstate(divide="ignore", invalid="ignore"):
            eff[s:e] = np.where(sw2 > 0, sw**2 / sw2, 0.0)
    return est, se, eff


def _regress(sources: Array, responses: Array, cfg: EstimatorConfig):
    """Conditional-mean estimate of responses given sources, at the sources.

    Returns (estimates, per-query stderr, valid mask). Degenerate conditioning
    (zero spread, the zero-noise branch) returns the raw responses: the
    conditional expectation given the state is the path value itself.
    """
    n, d = sources.shape
    sd = sources.std(axis=0)
    if np.all(sd == 0.0):
        return responses.copy(), np.zeros(n), np.ones(n, dtype=bool)
    if n < 100:
        raise EstimationError("regression estimators need at least 100 paths")

    if cfg.regression == "knn":
        est, se = _knn_mean(sources, responses, sources, cfg.knn_k)
        return est, se, np.ones(n, dtype=bool)

    if isinstance(cfg.bandwidth_rule, str):
        if cfg.bandwidth_rule != "silverman":
            raise InputError(f"unknown bandwidth rule {cfg.bandwidth_rule!r}")
        bw = silverman_bandwidth(sources)
    else:
        bw = np.broadcast_to(np.asarray(cfg.bandwidth_rule, dtype=float), (d,)).copy()
    bw = bw * cfg.bandwidth_scale
    if np.any(bw <= 0):
        raise EstimationError("degenerate bandwidth; data has zero spread in some dimension")

    est, se, eff = _nw_mean(sources, responses, sources, bw)
    valid = np.ones(n, dtype=bool)
    thin = eff < cfg.min_effective
    if np.any(thin):
        if cfg.knn_k <= n:
            est[thin], se[thin] = _knn_mean(sources, responses, sources[thin], cfg.knn_k)
        elif cfg.mask_low_density:
            valid[thin] = False
    return est, se, valid


def _difference_field(ens: PathEnsemble, cfg: EstimatorConfig, forward: bool) -> DerivativeField:
    grid = ens.grid
    k = cfg.h_steps
    h = k * grid.dt
    N, T, d = ens.values.shape
    values = np.zeros((N, T, d), dtype=complex)
    valid = np.zeros((N, T), dtype=bool)
    stderr = np.full(T, np.nan)
    for m in _estimation_indices(grid, cfg, forward):
        x = ens.values[:, m, :]
        if forward:
            resp = (ens.values[:, m + k, :] - x) / h
        else:
            resp = (x - ens.values[:, m - k, :]) / h
        est, se, ok = _regress(x, resp, cfg)
        values[:, m, :] = est
        valid[:, m] = ok
        stderr[m] = float(np.median(se)) if se.size else np.nan
    return DerivativeField(
        grid=grid,
        operator="D" if forward else "Dstar",
        method="regression",
        values=values,
        valid=valid,
        stderr=stderr,
    )


def forward_derivative(ens: PathEnsemble, cfg: EstimatorConfig | None = None) -> DerivativeField:
    """Regression estimate of E[(X_{t+h} - X_t)/h | X_t], undefined near t_M."""
    return _difference_field(ens, cfg or EstimatorConfig(), forward=True)


def backward_derivative(ens: PathEnsemble, cfg: EstimatorConfig | None = None) -> DerivativeField:
    """Regression estimate of E[(X_t - X_{t-h})/h | X_t], undefined near t_0."""
    return _difference_field(ens, cfg or EstimatorConfig(), forward=False)


def complex_derivative(fwd: DerivativeField, bwd: DerivativeField) -> DerivativeField:
    """(D + Dstar)/2 + i (D - Dstar)/2 pointwise; mask is the intersection."""
    _check_compatible(fwd, bwd)
    if fwd.operator != "D" or bwd.operator != "Dstar":
        raise InputError("complex_derivative expects a forward and a backward field")
    values = 0.5 * (fwd.values + bwd.values) + 0.5j * (fwd.values - bwd.values)
    stderr = None
    if fwd.stderr is not None and bwd.stderr is not None:
        with np.errstate(invalid="ignore"):
            stderr = 0.5 * np.sqrt(fwd.stderr**2 + bwd.stderr**2) * np.sqrt(2.0)
    return DerivativeField(
        grid=fwd.grid,
        operator="Dc",
        method=fwd.method if fwd.method == bwd.method else "mixed",
        values=values,
        valid=fwd.valid & bwd.valid,
        stderr=stderr,
        warnings=list(dict.fromkeys(fwd.warnings + bwd.warnings)),
    )


# ---------------------------------------------------------------------------
# analytic route (density formula) and the zero-noise branch
# ---------------------------------------------------------------------------

def analytic_complex_derivative(model: DiffusionModel, dm, ens: PathEnsemble) -> DerivativeField:
    """Pathwise complex derivative b - c + i c with c = div_a(p)/(2p) at (t, X_t).

    Exact (to rounding) for Gaussian density families; entries below the
    density floor are masked. A dirac density demands a zero-noise model.
    """
    if isinstance(dm, DiracDensityModel):
        if not model.is_deterministic:
            raise InputError("dirac density paired with a noisy model")
        return deterministic_complex_derivative(ens)
    N, T, d = ens.values.shape
    values = np.zeros((N, T, d), dtype=complex)
    valid = np.zeros((N, T), dtype=bool)
    times = ens.grid.times
    for m in range(1, T - 1):
        x = ens.values[:, m, :]
        c, low = dm.drift_correction(times[m], x)
        b = np.asarray(model.drift(times[m], x), dtype=float).reshape(N, d)
        values[:, m, :] = b - c + 1j * c
        valid[:, m] = ~low
    return DerivativeField(grid=ens.grid, operator="Dc", method="analytic",
                           values=values, valid=valid)


def deterministic_complex_derivative(ens: PathEnsemble) -> DerivativeField:
    """Zero-noise branch: central difference quotient, exactly real.

    Deterministic C^1 paths have equal forward and backward derivatives, so
    the complex combination carries no imaginary part; the symmetric quotient
    estimates it with O(dt^2) bias.
    """
    N, T, d = ens.values.shape
    dt = ens.grid.dt
    values = np.zeros((N, T, d), dtype=complex)
    valid = np.zeros((N, T), dtype=bool)
    values[:, 1:-1, :] = (ens.values[:, 2:, :] - ens.values[:, :-2, :]) / (2.0 * dt)
    valid[:, 1:-1] = True
    return DerivativeField(grid=ens.grid, operator="Dc", method="dirac",
                           values=values, valid=valid)


def deterministic_second_derivative(ens: PathEnsemble) -> DerivativeField:
    """Zero-noise second derivative: compact second difference, exactly real."""
    N, T, d = ens.values.shape
    dt = ens.grid.dt
    values = np.zeros((N, T, d), dtype=complex)
    valid = np.zeros((N, T), dtype=bool)
    values[:, 1:-1, :] = (
        ens.values[:, 2:, :] - 2.0 * ens.values[:, 1:-1, :] + ens.values[:, :-2, :]
    ) / dt**2
    valid[:, 1:-1] = True
    return DerivativeField(grid=ens.grid, operator="Dc2", method="dirac",
                           values=values, valid=valid)


# ---------------------------------------------------------------------------
# functions of (t, x) and the derivative-of-function formula
# ---------------------------------------------------------------------------

@dataclass
class SpaceTimeFunction:
    """A C^{1,2} map f(t, x) with its partials, vectorized over points.

    ``value(t, X[n, d]) -> (n, p)`` complex; ``gradient -> (n, p, d)``;
    ``hessian -> (n, p, d, d)`` (may be None when the diffusion vanishes);
    ``time_partial -> (n, p)``.
    """

    dim: int
    out_dim: int
    value: Callable[[float, Array], Array]
    time_partial: Callable[[float, Array], Array] | None = None
    gradient: Callable[[float, Array], Array] | None = None
    hessian: Callable[[float, Array], Array] | None = None

    @classmethod
    def from_evaluator(cls, fn, dim: int, out_dim: int,
                       dt_step: float = 1e-5, dx_step: float = 1e-5) -> "SpaceTimeFunction":
        """Wrap a plain evaluator with central finite-difference partials."""

        def value(t, x):
            return np.asarray(fn(t, x)).reshape(x.shape[0], out_dim)

        def time_partial(t, x):
            return (value(t + dt_step, x) - value(t - dt_step, x)) / (2.0 * dt_step)

        def gradient(t, x):
            out = np.empty((x.shape[0], out_dim, dim), dtype=complex)
            for j in range(dim):
                xp = x.copy()
                xm = x.copy()
                xp[:, j] += dx_step
                xm[:, j] -= dx_step
                out[:, :, j] = (value(t, xp) - value(t, xm)) / (2.0 * dx_step)
            return out

        def hessian(t, x):
            out = np.empty((x.shape[0], out_dim, dim, dim), dtype=complex)
            f0 = value(t, x)
            for j in range(dim):
                xp = x.copy()
                xm = x.copy()
                xp[:, j] += dx_step
                xm[:, j] -= dx_step
                out[:, :, j, j] = (value(t, xp) - 2.0 * f0 + value(t, xm)) / dx_step**2
            for j in range(dim):
                for k in range(j + 1, dim):
                    xpp = x.copy()
                    xpm = x.copy()
                    xmp = x.copy()
                    xmm = x.copy()
                    for arr, sj, sk in ((xpp, 1, 1), (xpm, 1, -1), (xmp, -1, 1), (xmm, -1, -1)):
                        arr[:, j] += sj * dx_step
                        arr[:, k] += sk * dx_step
                    cross = (value(t, xpp) - value(t, xpm) - value(t, xmp) + value(t, xmm)) / (
                        4.0 * dx_step**2
                    )
                    out[:, :, j, k] = cross
                    out[:, :, k, j] = cross
            return out

        return cls(dim=dim, out_dim=out_dim, value=value, time_partial=time_partial,
                   gradient=gradient, hessian=hessian)

    @classmethod
    def affine(cls, matrix, offset=None) -> "SpaceTimeFunction":
        """f(t, x) = A x + c with exact partials (Hessian identically zero)."""
        A = np.atleast_2d(np.asarray(matrix, dtype=complex))
        p, d = A.shape
        c = np.zeros(p, dtype=complex) if offset is None else np.asarray(offset, dtype=complex)

        return cls(
            dim=d,
            out_dim=p,
            value=lambda t, x: x @ A.T + c,
            time_partial=lambda t, x: np.zeros((x.shape[0], p), dtype=complex),
            gradient=lambda t, x: np.broadcast_to(A, (x.shape[0], p, d)),
            hessian=lambda t, x: np.zeros((x.shape[0], p, d, d), dtype=complex),
        )


def derivative_of_function(
    f: SpaceTimeFunction,
    dfield: DerivativeField,
    model: DiffusionModel,
    ens: PathEnsemble,
    conjugate: bool = False,
) -> DerivativeField:
    """Apply d/dt-along-paths to f(t, X_t):

        Df = f_t + (DX . grad f) + (i/2) a^{kj} f_{kj}   evaluated at (t, X_t),

    with DX the complex derivative field. ``conjugate`` computes the
    conjugate-operator version (conjugated field, -i/2 on the trace term),
    which on complex f is NOT the complex conjugate of the plain version.
    """
    if dfield.operator != "Dc":
        raise InputError("derivative_of_function expects the complex derivative field of X")
    if f.dim != ens.dim:
        raise InputError("function dimension does not match the ensemble")
    if f.time_partial is None or f.gradient is None:
        raise InputError("function must provide time partial and gradient evaluators")
    a_const = model.diffusion_matrix_const()
    noisy = a_const is None or np.any(a_const)
    if noisy and f.hessian is None:
        raise InputError("second partials required when the diffusion matrix is nonzero")

    N, T, _ = ens.values.shape
    sign = -1.0 if conjugate else 1.0
    dvals = np.conj(dfield.values) if conjugate else dfield.values
    values = np.zeros((N, T, f.out_dim), dtype=complex)
    valid = dfield.valid.copy()
    times = ens.grid.times
    for m in range(1, T - 1):
        if not valid[:, m].any():
            continue
        x = ens.values[:, m, :]
        t = times[m]
        out = f.time_partial(t, x).astype(complex)
        out += np.einsum("nd,npd->np", dvals[:, m, :], f.gradient(t, x))
        if noisy:
            hess = f.hessian(t, x)
            a = a_const if a_const is not None else model.diffusion_matrix(t, x)
            if a.ndim == 2:
                out += sign * 0.5j * np.einsum("kj,npkj->np", a, hess)
            else:
                out += sign * 0.5j * np.einsum("nkj,npkj->np", a, hess)
        values[:, m, :] = out
    return DerivativeField(
        grid=ens.grid,
        operator="Dc2" if f.out_dim == ens.dim else "Dc[f]",
        method=dfield.method + "+function-rule",
        values=values,
        valid=valid,
        warnings=list(dfield.warnings),
    )


def complex_drift_function(model: DiffusionModel, dm) -> SpaceTimeFunction:
    """The complex derivative as a function of (t, x): g = b - (1 - i) c.

    Needs a density model with closed-form correction partials (Gaussian
    family) or a dirac density; kernel densities have no usable partials.
    Drift partials come from the affine metadata when present, otherwise from
    central finite differences.
    """
    d = model.dim
    if isinstance(dm, DiracDensityModel):
        if model.drift_matrix is not None:
            off = model.drift_offset if model.drift_offset is not None else np.zeros(d)
            return SpaceTimeFunction.affine(model.drift_matrix.astype(complex),
                                            off.astype(complex))
        return SpaceTimeFunction.from_evaluator(
            lambda t, x: np.asarray(model.drift(t, x), dtype=complex), d, d
        )
    if not isinstance(dm, GaussianDensityModel):
        raise CapabilityError(
            "analytic second-derivative route needs a Gaussian or dirac density model"
        )

    combo = 1.0 - 1.0j

    def value(t, x):
        b = np.asarray(model.drift(t, x), dtype=float).reshape(x.shape[0], d)
        c, _ = dm.drift_correction(t, x)
        return b - combo * c

    if model.drift_matrix is not None:
        def gradient(t, x):
            g = model.drift_matrix - combo * dm.correction_gradient(t)
            return np.broadcast_to(g, (x.shape[0], d, d))

        def time_partial(t, x):
            return -combo * dm.correction_time_partial(t, x)

        def hessian(t, x):
            return np.zeros((x.shape[0], d, d, d), dtype=complex)

        return SpaceTimeFunction(dim=d, out_dim=d, value=value,
                                 time_partial=time_partial, gradient=gradient,
                                 hessian=hessian)
    return SpaceTimeFunction.from_evaluator(value, d, d)


def second_derivative(
    model: DiffusionModel,
    dm,
    ens: PathEnsemble,
    dfield: DerivativeField | None = None,
    cfg: EstimatorConfig | None = None,
    nested_regression: bool = False,
) -> DerivativeField:
    """Second complex derivative of X, by the function rule applied to the
    complex-derivative function (analytic densities), by exact second
    differences (zero noise), or by opt-in nested regression (biased)."""
    if isinstance(dm, DiracDensityModel):
        if not model.is_deterministic:
            raise InputError("dirac density paired with a noisy model")
        return deterministic_second_derivative(ens)
    if isinstance(dm, GaussianDensityModel):
        f = complex_drift_function(model, dm)
        if dfield is None:
            dfield = analytic_complex_derivative(model, dm, ens)
        out = derivative_of_function(f, dfield, model, ens)
        out.operator = "Dc2"
        return out
    if nested_regression:
        if dfield is None or cfg is None:
            raise InputError("nested regression needs the first derivative field and a config")
        return _nested_second_derivative(ens, dfield, cfg)
    raise CapabilityError(
        "no second-derivative route: need an analytic density or nested_regression=True"
    )


def _nested_second_derivative(ens: PathEnsemble, dfield: DerivativeField,
                              cfg: EstimatorConfig) -> DerivativeField:
    """Regression estimate of the derivative of the (complex) first-derivative field."""
    grid = ens.grid
    k = cfg.h_steps
    h = k * grid.dt
    N, T, d = dfield.values.shape
    values = np.zeros((N, T, d), dtype=complex)
    valid = np.zeros((N, T), dtype=bool)
    field_valid_times = set(np.flatnonzero(dfield.valid.all(axis=0)))
    cand = _estimation_indices(grid, cfg, forward=True)
    for m in cand:
        if m not in field_valid_times or (m + k) not in field_valid_times \
                or (m - k) not in field_valid_times:
            continue
        x = ens.values[:, m, :]
        fwd = (dfield.values[:, m + k, :] - dfield.values[:, m, :]) / h
        bwd = (dfield.values[:, m, :] - dfield.values[:, m - k, :]) / h
        est_f, _, ok_f = _regress(x, fwd, cfg)
        est_b, _, ok_b = _regress(x, bwd, cfg)
        values[:, m, :] = 0.5 * (est_f + est_b) + 0.5j * (est_f - est_b)
        valid[:, m] = ok_f & ok_b
    return DerivativeField(
        grid=grid, operator="Dc2", method="nested-regression",
        values=values, valid=valid,
        warnings=["nested regression second derivative: bias compounds with the first stage"],
    )


# ---------------------------------------------------------------------------
# product rule
# ---------------------------------------------------------------------------

@dataclass
class ProductRuleReport:
    time: float
    lhs: complex
    lhs_stderr: float
    rhs: complex
    rhs_stderr: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.lhs_stderr, self.rhs_stderr))

    def passed(self, sigmas: float = 3.0) -> bool:
        return self.residual <= sigmas * self.combined_stderr


def product_rule_check(
    xfield: DerivativeField,
    yfield: DerivativeField,
    ens_x: PathEnsemble,
    ens_y: PathEnsemble,
    t: float,
    delta: float,
) -> ProductRuleReport:
    """Check d/dt E[X.Y] = E[DX.Y + X.DbarY] at an interior time.

    lhs is the central difference of E[X.Y] with step delta (a grid multiple);
    rhs pairs the complex derivative of X with the conjugate derivative of Y.
    The dot product is bilinear (no conjugation).
    """
    grid = ens_x.grid
    if ens_y.grid != grid or ens_x.n_paths != ens_y.n_paths:
        raise InputError("X and Y must live on the same grid and probability space")
    if xfield.operator != "Dc" or yfield.operator != "DcBar":
        raise InputError("expected the complex field of X and the conjugate field of Y")
    m = grid.index_of(t)
    k = int(round(delta / grid.dt))
    if k < 1 or abs(k * grid.dt - delta) > 1e-9:
        raise InputError("delta must be a positive grid multiple")
    if m - k < 0 or m + k > grid.steps:
        raise InputError("t +- delta leaves the grid; pick an interior time")
    if not (xfield.valid[:, m].all() and yfield.valid[:, m].all()):
        raise InputError("derivative fields are not valid at the requested time")

    xv = ens_x.values
    yv = ens_y.values
    prod_plus = np.einsum("nd,nd->n", xv[:, m + k, :], yv[:, m + k, :])
    prod_minus = np.einsum("nd,nd->n", xv[:, m - k, :], yv[:, m - k, :])
    lhs_samples = (prod_plus - prod_minus) / (2.0 * delta)
    rhs_samples = np.einsum("nd,nd->n", xfield.values[:, m, :], yv[:, m, :]) + np.einsum(
        "nd,nd->n", xv[:, m, :], yfield.values[:, m, :]
    )
    lhs, lhs_se = mean_stderr(lhs_samples.astype(complex))
    rhs, rhs_se = mean_stderr(rhs_samples)
    return ProductRuleReport(time=float(t), lhs=complex(lhs), lhs_stderr=float(lhs_se),
                             rhs=complex(rhs), rhs_stderr=float(rhs_se))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def c1_norm(ens: PathEnsemble, fwd: DerivativeField, bwd: DerivativeField) -> float:
    """sup over common valid times of ||X||_L2 + ||DX||_L2 + ||DstarX||_L2."""
    common = fwd.valid.all(axis=0) & bwd.valid.all(axis=0)
    idx = np.flatnonzero(common)
    if idx.size == 0:
        raise InputError("no common valid times")
    best = 0.0
    for m in idx:
        nx = np.sqrt(np.mean(np.sum(ens.values[:, m, :] ** 2, axis=1)))
        nf = np.sqrt(np.mean(np.sum(np.abs(fwd.values[:, m, :]) ** 2, axis=1)))
        nb = np.sqrt(np.mean(np.sum(np.abs(bwd.values[:, m, :]) ** 2, axis=1)))
        best = max(best, nx + nf + nb)
    return float(best)


def l2_modulus(dfield: DerivativeField) -> float:
    """Largest L2 jump between consecutive valid times (continuity diagnostic)."""
    idx = np.flatnonzero(dfield.valid.all(axis=0))
    if idx.size < 2:
        raise InputError("need at least two valid times")
    worst = 0.0
    for i in range(len(idx) - 1):
        if idx[i + 1] != idx[i] + 1:
            continue
        jump = dfield.values[:, idx[i + 1], :] - dfield.values[:, idx[i], :]
        worst = max(worst, float(np.sqrt(np.mean(np.sum(np.abs(jump) ** 2, axis=1)))))
    return worst


def field_to_csv(dfield: DerivativeField, ens: PathEnsemble, path,
                 times: Sequence[float] | None = None) -> None:
    """CSV with columns path, t, re_1, im_1, ..., valid, method."""
    grid = dfield.grid
    idx = [grid.index_of(t) for t in times] if times is not None else \
        list(dfield.valid_time_indices())
    d = dfield.out_dim
    header = "path,t," + ",".join(f"re_{j+1},im_{j+1}" for j in range(d)) + ",valid,method"
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for m in idx:
            tm = grid.times[m]
            for n in range(dfield.n_paths):
                comps = ",".join(
                    f"{dfield.values[n, m, j].real:.17g},{dfield.values[n, m, j].imag:.17g}"
                    for j in range(d)
                )
                fh.write(f"{n},{tm:.17g},{comps},{int(dfield.valid[n, m])},{dfield.method}\n")
