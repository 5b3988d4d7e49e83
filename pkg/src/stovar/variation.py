"""Action functional, its directional derivatives, and Euler-Lagrange residuals.

Conventions shared by every time integral in this module:

* integration runs over the window of grid times where the derivative field
  is defined, extended to the full span [a, b] by freezing the integrand at
  the nearest valid time (documented O(dt) boundary bias; it is what makes a
  constant integrand integrate to exactly (b - a) times its value);
* a path containing any masked point inside the window is excluded from the
  Monte Carlo average and the excluded fraction is reported.

Variations are deterministic C^1 curves. They carry a single derivative
evaluator, so the forward and backward derivatives coincide by construction
and the curves sit inside the space where the least-action principle holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import DiracDensityModel
from .diffusion import (DiffusionModel, PathEnsemble, TimeGrid,
                        deterministic_ensemble, point_start)
from .exceptions import CapabilityError, InputError
from .lagrangian import LagrangianSpec
from .nelson import (DerivativeField, EstimatorConfig, analytic_complex_derivative,
                     complex_drift_function, derivative_of_function,
                     deterministic_complex_derivative, second_derivative)
from .stats import mean_stderr

Array = np.ndarray


# ---------------------------------------------------------------------------
# variation processes
# ---------------------------------------------------------------------------

@dataclass
class VariationProcess:
    """Deterministic C^1 variation direction Z: J -> R^d.

    ``value`` and ``derivative`` are vectorized over a 1-d time array and
    return (T, d). The single derivative evaluator serves both the forward
    and the backward derivative, certifying the zero-gap class tag N1.
    """

    dim: int
    value: Callable[[Array], Array]
    derivative: Callable[[Array], Array]
    tag: str = "N1"
    name: str = "Z"

    def eval(self, times) -> Array:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.asarray(self.value(t), dtype=float).reshape(t.size, self.dim)
        return out

    def eval_derivative(self, times) -> Array:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        return np.asarray(self.derivative(t), dtype=float).reshape(t.size, self.dim)


def _direction(dim: int, direction) -> Array:
    if direction is None:
        e = np.zeros(dim)
        e[0] = 1.0
        return e
    return np.asarray(direction, dtype=float).reshape(dim)


def sine_variation(grid: TimeGrid, k: int = 1, amplitude: float = 1.0,
                   direction=None, dim: int = 1) -> VariationProcess:
    """Z(t) = amplitude * sin(k pi (t - a)/(b - a)) e; vanishes at both endpoints."""
    e = _direction(dim, direction)
    w = k * np.pi / (grid.b - grid.a)

    return VariationProcess(
        dim=dim,
        value=lambda t: amplitude * np.sin(w * (t - grid.a))[:, None] * e,
        derivative=lambda t: amplitude * w * np.cos(w * (t - grid.a))[:, None] * e,
        name=f"sine{k}",
    )


def bump_variation(grid: TimeGrid, amplitude: float = 1.0, direction=None,
                   dim: int = 1) -> VariationProcess:
    """Quadratic bump (t - a)(b - t), normalized to peak ``amplitude``."""
    e = _direction(dim, direction)
    scale = amplitude * 4.0 / (grid.b - grid.a) ** 2

    return VariationProcess(
        dim=dim,
        value=lambda t: scale * ((t - grid.a) * (grid.b - t))[:, None] * e,
        derivative=lambda t: scale * (grid.a + grid.b - 2.0 * t)[:, None] * e,
        name="bump",
    )


def constant_variation(direction, dim: int = 1) -> VariationProcess:
    e = _direction(dim, direction)
    return VariationProcess(
        dim=dim,
        value=lambda t: np.broadcast_to(e, (t.size, dim)).copy(),
        derivative=lambda t: np.zeros((t.size, dim)),
        name="constant",
    )


def linear_variation(grid: TimeGrid, slope: float = 1.0, direction=None,
                     dim: int = 1) -> VariationProcess:
    """Z(t) = slope * (t - midpoint) e; nonzero at both endpoints."""
    e = _direction(dim, direction)
    mid = 0.5 * (grid.a + grid.b)
    return VariationProcess(
        dim=dim,
        value=lambda t: slope * (t - mid)[:, None] * e,
        derivative=lambda t: slope * np.ones((t.size, 1)) * e,
        name="linear",
    )


def variation_from_samples(grid: TimeGrid, samples: Array,
                           name: str = "spline") -> VariationProcess:
    """Variation from grid samples, with a cubic-spline derivative."""
    from scipy.interpolate import CubicSpline

    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] != grid.n_times:
        raise InputError("samples must cover the whole grid")
    spline = CubicSpline(grid.times, samples, axis=0)
    dspline = spline.derivative()
    return VariationProcess(dim=samples.shape[1], value=spline, derivative=dspline,
                            tag="N1", name=name)


@dataclass
class VariationCertificate:
    passed: bool
    sup_value: float
    sup_derivative: float
    derivative_gap: float       # DZ - DstarZ; zero by construction for one evaluator
    fd_consistency: float       # central differences of Z vs claimed derivative


def certify_variation(z: VariationProcess, grid: TimeGrid,
                      fd_tol: float = 1e-3) -> VariationCertificate:
    """Boundedness and derivative-consistency check on the grid."""
    times = grid.times
    vals = z.eval(times)
    ders = z.eval_derivative(times)
    sup_v = float(np.abs(vals).max())
    sup_d = float(np.abs(ders).max())
    fd = (vals[2:] - vals[:-2]) / (2.0 * grid.dt)
    err = float(np.abs(fd - ders[1:-1]).max()) if fd.size else 0.0
    ok = np.isfinite(sup_v) and np.isfinite(sup_d) and err <= fd_tol * max(1.0, sup_d)
    return VariationCertificate(passed=bool(ok), sup_value=sup_v, sup_derivative=sup_d,
                                derivative_gap=0.0, fd_consistency=err)


# ---------------------------------------------------------------------------
# integration window
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegrationWindow:
    lo: int
    hi: int
    weights: Array          # trapezoid weights over [lo, hi], frozen to span [a, b]
    included: Array         # (N,) paths with no masked point inside the window

    @property
    def excluded_fraction(self) -> float:
        return float(1.0 - self.included.mean())


def integration_window(valid: Array, grid: TimeGrid) -> IntegrationWindow:
    """Window of usable times plus frozen-endpoint trapezoid weights."""
    any_valid = valid.any(axis=0)
    idx = np.flatnonzero(any_valid)
    if idx.size == 0:
        raise InputError("derivative field has no valid times")
    lo, hi = int(idx[0]), int(idx[-1])
    dt = grid.dt
    M = grid.steps
    if lo == hi:
        weights = np.array([grid.b - grid.a])
    else:
        weights = np.full(hi - lo + 1, dt)
        weights[0] = dt / 2.0 + lo * dt
        weights[-1] = dt / 2.0 + (M - hi) * dt
    included = valid[:, lo:hi + 1].all(axis=1)
    return IntegrationWindow(lo=lo, hi=hi, weights=weights, included=included)


# ---------------------------------------------------------------------------
# action
# ---------------------------------------------------------------------------

@dataclass
class ActionEstimate:
    """Monte Carlo estimate of E[ integral of L(X_t, DX_t) dt ]."""

    value: complex
    mc_stderr: float
    stderr_re: float
    stderr_im: float
    quadrature: str
    masked_fraction: float
    abs_integral_mean: float    # empirical E[ integral |L| dt ], finiteness surrogate
    n_paths: int
    reliable: bool
    warnings: list = field(default_factory=list)


def _lagrangian_per_path_integrals(ens, dfield, spec, window,
                                   shift=None, dshift=None):
    """Per-path frozen-trapezoid integrals of L(X + shift, V + dshift)."""
    times = ens.grid.times
    inc = window.included
    total = np.zeros(int(inc.sum()), dtype=complex)
    total_abs = np.zeros(total.shape[0])
    for j, m in enumerate(range(window.lo, window.hi + 1)):
        x = ens.values[inc, m, :]
        v = dfield.values[inc, m, :]
        if shift is not None:
            x = x + shift[m]
        if dshift is not None:
            v = v + dshift[m]
        lvals = spec.q.value(v) - spec.potential.value(x, spec.dim)
        w = window.weights[j]
        total += w * lvals
        total_abs += w * np.abs(lvals)
    return total, total_abs


def action(ens: PathEnsemble, dfield: DerivativeField, spec: LagrangianSpec,
           unreliable_mask_fraction: float = 0.2) -> ActionEstimate:
    """Stochastic action estimate from an ensemble and its complex derivative field."""
    if dfield.operator != "Dc":
        raise InputError("action needs the complex derivative field")
    if spec.dim != ens.dim:
        raise InputError("Lagrangian dimension does not match the ensemble")
    window = integration_window(dfield.valid, ens.grid)
    per_path, per_path_abs = _lagrangian_per_path_integrals(ens, dfield, spec, window)
    value, se = mean_stderr(per_path)
    _, se_re = mean_stderr(per_path.real)
    _, se_im = mean_stderr(per_path.imag)
    warnings = []
    frac = window.excluded_fraction
    reliable = frac <= unreliable_mask_fraction
    if not reliable:
        warnings.append(f"unreliable: {frac:.1%} of paths excluded by masking")
    abs_mean = float(per_path_abs.mean())
    if not np.isfinite(abs_mean):
        warnings.append("integrability surrogate E[∫|L|dt] is not finite")
        reliable = False
    return ActionEstimate(
        value=complex(value),
        mc_stderr=float(se),
        stderr_re=float(se_re),
        stderr_im=float(se_im),
        quadrature="trapezoid-frozen-endpoints",
        masked_fraction=frac,
        abs_integral_mean=abs_mean,
        n_paths=int(window.included.sum()),
        reliable=reliable,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# directional derivatives of the action
# ---------------------------------------------------------------------------

@dataclass
class DirectionalDerivative:
    value: complex
    stderr: float
    route: str
    eps: float | None = None
    bulk: complex | None = None
    boundary_a: complex | None = None
    boundary_b: complex | None = None
    flagged: bool = False
    note: str = ""

    def agrees_with(self, other: "DirectionalDerivative", sigmas: float = 3.0) -> bool:
        combined = float(np.hypot(self.stderr, other.stderr))
        return abs(self.value - other.value) <= sigmas * combined


def directional_derivative_fd(
    ens: PathEnsemble,
    dfield: DerivativeField,
    spec: LagrangianSpec,
    z: VariationProcess,
    eps: float | None = None,
    richardson: bool = False,
) -> DirectionalDerivative:
    """Central-difference directional derivative (F(X + eps Z) - F(X - eps Z)) / 2 eps.

    Both sides reuse the same paths and the same derivative field (common
    random numbers): the paths shift by eps Z(t) and the complex derivative
    shifts by eps Z'(t), which is exact for deterministic C^1 variations.
    """
    if z.dim != ens.dim:
        raise InputError("variation dimension mismatch")
    times = ens.grid.times
    zt = z.eval(times)
    zd = z.eval_derivative(times)
    scale = max(1.0, float(np.abs(zt).max()), float(np.abs(zd).max()))
    if eps is None:
        eps = 1e-3 / scale
    window = integration_window(dfield.valid, ens.grid)

    def quotient(e):
        plus, _ = _lagrangian_per_path_integrals(ens, dfield, spec, window,
                                                 shift=e * zt, dshift=e * zd)
        minus, _ = _lagrangian_per_path_integrals(ens, dfield, spec, window,
                                                  shift=-e * zt, dshift=-e * zd)
        return (plus - minus) / (2.0 * e), plus, minus

    per_path, plus, minus = quotient(eps)
    note = ""
    if richardson:
        half, _, _ = quotient(eps / 2.0)
        per_path = (4.0 * half - per_path) / 3.0
        note = "3-point Richardson extrapolation"
    value, se = mean_stderr(per_path)

    # cancellation guard: rounding noise of the +/- difference vs the signal
    mag = float(np.mean(np.abs(plus)) + np.mean(np.abs(minus))) / 2.0
    rounding = np.finfo(float).eps * mag / (2.0 * eps)
    flagged = rounding > 0.1 * max(abs(value), se, 1e-300)
    if flagged:
        note = (note + "; " if note else "") + "eps too small: float cancellation dominates"
    return DirectionalDerivative(value=complex(value), stderr=float(se),
                                 route="finite-difference", eps=float(eps),
                                 flagged=flagged, note=note)


def directional_derivative_formula(
    ens: PathEnsemble,
    dfield: DerivativeField,
    d2field: DerivativeField,
    spec: LagrangianSpec,
    z: VariationProcess,
) -> DirectionalDerivative:
    """Exact first-variation formula: bulk residual integral plus boundary pairing.

    dF(X, Z) = E[ integral (dL/dx - D dL/dv)(X, DX) . Z dt ]
               + E[Z . dL/dv](b) - E[Z . dL/dv](a)

    for natural L the integrand is (-gradU(X) - Q D^2 X) . Z. Boundary values
    of the momentum are frozen to the nearest valid time.
    """
    if z.tag != "N1":
        raise CapabilityError("formula route requires an N1-tagged variation")
    if dfield.operator != "Dc" or d2field.operator != "Dc2":
        raise InputError("need the complex derivative and second derivative fields")
    if z.dim != ens.dim:
        raise InputError("variation dimension mismatch")
    times = ens.grid.times
    zt = z.eval(times)
    q = spec.q.coefficients
    window = integration_window(dfield.valid & d2field.valid, ens.grid)
    inc = window.included

    bulk = np.zeros(int(inc.sum()), dtype=complex)
    for j, m in enumerate(range(window.lo, window.hi + 1)):
        x = ens.values[inc, m, :]
        res = -spec.potential.grad(x, spec.dim) - d2field.values[inc, m, :] @ q.T
        bulk += window.weights[j] * (res @ zt[m])

    za = z.eval(np.array([ens.grid.a]))[0]
    zb = z.eval(np.array([ens.grid.b]))[0]
    mom_lo = dfield.values[inc, window.lo, :] @ q.T
    mom_hi = dfield.values[inc, window.hi, :] @ q.T
    ga = mom_lo @ za
    gb = mom_hi @ zb
    total = bulk + gb - ga
    value, se = mean_stderr(total)
    return DirectionalDerivative(
        value=complex(value),
        stderr=float(se),
        route="first-variation-formula",
        bulk=complex(bulk.mean()),
        boundary_a=complex(ga.mean()),
        boundary_b=complex(gb.mean()),
    )


# ---------------------------------------------------------------------------
# Euler-Lagrange residuals
# ---------------------------------------------------------------------------

@dataclass
class ELResidualField:
    """Pathwise (dL/dx - D dL/dv)(X, DX) with a per-time mean-square summary."""

    variant: str
    values: Array           # (N, M+1, d) complex
    valid: Array            # (N, M+1) bool
    times: Array            # valid window times
    mean_sq: Array          # E[|residual|^2] per window time
    mean_sq_stderr: Array
    grad_sq: Array          # E[|gradU(X)|^2] per window time
    excluded_fraction: float
    warnings: list = field(default_factory=list)

    def ratio(self) -> float:
        """Time-averaged E|res|^2 over time-averaged E|gradU|^2."""
        denom = float(self.grad_sq.mean())
        if denom == 0.0:
            return float("inf") if self.mean_sq.mean() > 0 else 0.0
        return float(self.mean_sq.mean()) / denom


def el_residual(
    ens: PathEnsemble,
    model: DiffusionModel,
    dm,
    spec: LagrangianSpec,
    variant: str = "D-complex",
    dfield: DerivativeField | None = None,
    cfg: EstimatorConfig | None = None,
    nested_regression: bool = False,
) -> ELResidualField:
    """Stochastic Euler-Lagrange residual field for a natural Lagrangian.

    The momentum is Q DX, so its derivative is Q D^2 X for the D-complex
    variant; the D-conjugate variant applies the conjugated operator to the
    momentum as a function of (t, x) (they coincide on zero-noise ensembles).
    """
    if variant not in ("D-complex", "D-conjugate"):
        raise InputError(f"unknown residual variant {variant!r}")
    if spec.dim != ens.dim:
        raise InputError("Lagrangian dimension mismatch")
    if dfield is None:
        dfield = analytic_complex_derivative(model, dm, ens)
    q = spec.q.coefficients

    if variant == "D-complex" or isinstance(dm, DiracDensityModel):
        d2 = second_derivative(model, dm, ens, dfield=dfield, cfg=cfg,
                               nested_regression=nested_regression)
        momentum_rate = np.einsum("ntd,ed->nte", d2.values, q)
        valid = dfield.valid & d2.valid
        warnings = list(d2.warnings)
    else:
        f = complex_drift_function(model, dm)
        qf = SpaceTimeFunctionTimesMatrix(f, q)
        dbar = derivative_of_function(qf, dfield, model, ens, conjugate=True)
        momentum_rate = dbar.values
        valid = dfield.valid & dbar.valid
        warnings = list(dbar.warnings)

    N, T, d = ens.values.shape
    values = np.zeros((N, T, d), dtype=complex)
    window = integration_window(valid, ens.grid)
    inc = window.included
    times_idx = np.arange(window.lo, window.hi + 1)
    mean_sq = np.empty(times_idx.size)
    mean_se = np.empty(times_idx.size)
    grad_sq = np.empty(times_idx.size)
    times = ens.grid.times
    for j, m in enumerate(times_idx):
        gu = spec.potential.grad(ens.values[:, m, :], spec.dim)
        res = -gu - momentum_rate[:, m, :]
        values[:, m, :] = res
        sq = np.sum(np.abs(res[inc]) ** 2, axis=1)
        mu, se = mean_stderr(sq)
        mean_sq[j] = mu
        mean_se[j] = se
        grad_sq[j] = float(np.mean(np.sum(gu[inc] ** 2, axis=1)))
    return ELResidualField(
        variant=variant,
        values=values,
        valid=valid,
        times=times[times_idx],
        mean_sq=mean_sq,
        mean_sq_stderr=mean_se,
        grad_sq=grad_sq,
        excluded_fraction=window.excluded_fraction,
        warnings=warnings,
    )


def SpaceTimeFunctionTimesMatrix(f, matrix):
    """Compose a space-time function with a constant left matrix factor."""
    from .nelson import SpaceTimeFunction

    A = np.asarray(matrix, dtype=complex)

    return SpaceTimeFunction(
        dim=f.dim,
        out_dim=A.shape[0],
        value=lambda t, x: f.value(t, x) @ A.T,
        time_partial=lambda t, x: f.time_partial(t, x) @ A.T,
        gradient=lambda t, x: np.einsum("pe,ned->npd", A, f.gradient(t, x)),
        hessian=None if f.hessian is None
        else (lambda t, x: np.einsum("pe,nedk->npdk", A, f.hessian(t, x))),
    )


# ---------------------------------------------------------------------------
# classical side: solver, residual, embedding comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassicalTrajectory:
    grid: TimeGrid
    positions: Array   # (M+1, d)
    velocities: Array  # (M+1, d)


def classical_el_solve(spec: LagrangianSpec, x0, v0, grid: TimeGrid) -> ClassicalTrajectory:
    """Fourth-order Runge-Kutta solution of Q x'' = -gradU(x) on the grid."""
    q = spec.q.coefficients
    try:
        q_inv = np.linalg.inv(q)
    except np.linalg.LinAlgError as exc:
        raise InputError("quadratic form is not invertible") from exc
    if not np.all(np.isfinite(q_inv)):
        raise InputError("quadratic form is not invertible")

    d = spec.dim
    x = np.asarray(x0, dtype=float).reshape(d)
    v = np.asarray(v0, dtype=float).reshape(d)

    def accel(pos):
        return -(q_inv @ spec.potential.grad(pos[None, :], d)[0])

    M = grid.steps
    dt = grid.dt
    xs = np.empty((M + 1, d))
    vs = np.empty((M + 1, d))
    xs[0] = x
    vs[0] = v
    for m in range(M):
        k1x, k1v = v, accel(x)
        k2x, k2v = v + 0.5 * dt * k1v, accel(x + 0.5 * dt * k1x)
        k3x, k3v = v + 0.5 * dt * k2v, accel(x + 0.5 * dt * k2x)
        k4x, k4v = v + dt * k3v, accel(x + dt * k3x)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        xs[m + 1] = x
        vs[m + 1] = v
    return ClassicalTrajectory(grid=grid, positions=xs, velocities=vs)


def classical_el_residual(spec: LagrangianSpec, positions: Array, grid: TimeGrid) -> Array:
    """-gradU(x) - Q x'' on interior grid times, x'' by compact second differences.

    Returns (M-1, d), row m-1 belonging to grid time t_m.
    """
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != grid.n_times:
        raise InputError("trajectory must cover the grid")
    d2 = (x[2:] - 2.0 * x[1:-1] + x[:-2]) / grid.dt**2
    gu = spec.potential.grad(x[1:-1], spec.dim)
    return -gu - d2 @ spec.q.coefficients.T


@dataclass
class CoherenceReport:
    """Zero-noise embedding check: the stochastic pipeline residual against the
    classical one on the same trajectory samples."""

    max_difference: float
    sup_stochastic: float
    sup_classical: float
    max_imag: float
    residuals_match: bool
    residuals_small: bool
    tol_match: float
    tol_sup: float

    @property
    def passed(self) -> bool:
        return self.residuals_match and self.residuals_small


def compare_embedded_residuals(spec: LagrangianSpec, positions: Array,
                               grid: TimeGrid, tol_match: float = 1e-10,
                               tol_sup: float = 1e-3) -> CoherenceReport:
    """Run the zero-noise stochastic residual pipeline and the classical residual
    on the same trajectory and compare pointwise."""
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    ens = deterministic_ensemble(grid, x)
    zero_model = DiffusionModel(
        dim=spec.dim,
        drift=lambda t, xx: np.zeros_like(xx),
        initial=point_start(x[0]),
        dispersion_const=np.zeros((spec.dim, spec.dim)),
        description="embedded-trajectory",
    )
    dm = DiracDensityModel(dim=spec.dim)
    stoch = el_residual(ens, zero_model, dm, spec, variant="D-complex")
    m_lo = 1
    m_hi = grid.steps - 1
    stoch_vals = stoch.values[0, m_lo:m_hi + 1, :]
    classical = classical_el_residual(spec, x, grid)
    diff = float(np.abs(stoch_vals.real - classical).max())
    max_imag = float(np.abs(stoch_vals.imag).max())
    sup_s = float(np.abs(stoch_vals).max())
    sup_c = float(np.abs(classical).max())
    return CoherenceReport(
        max_difference=max(diff, max_imag),
        sup_stochastic=sup_s,
        sup_classical=sup_c,
        max_imag=max_imag,
        residuals_match=max(diff, max_imag) <= tol_match,
        residuals_small=max(sup_s, sup_c) <= tol_sup,
        tol_match=tol_match,
        tol_sup=tol_sup,
    )


def coherence_check(spec: LagrangianSpec, x0, v0, grid: TimeGrid,
                    tol_match: float = 1e-10, tol_sup: float = 1e-3) -> CoherenceReport:
    """Solve the classical dynamics, embed the solution as a zero-noise ensemble,
    and check that the stochastic and classical residuals coincide."""
    traj = classical_el_solve(spec, x0, v0, grid)
    return compare_embedded_residuals(spec, traj.positions, grid,
                                      tol_match=tol_match, tol_sup=tol_sup)
