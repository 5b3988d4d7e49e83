"""Natural Lagrangians L(x, v) = q(v) - U(x) on real positions and complex velocities.

The kinetic part q is a real symmetric quadratic form evaluated WITHOUT
conjugation, q(v) = (1/2) v.Q v, which is the holomorphic extension of the
classical kinetic energy to complex velocity arguments. All bundled analytics
(velocity gradients, momenta) rely on this natural structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import InputError

Array = np.ndarray


def _as_points(x, d: int, name: str, allow_complex: bool = False) -> tuple[Array, bool]:
    """Coerce input to an (n, d) batch; report whether it arrived as a single point."""
    arr = np.asarray(x)
    if not allow_complex and np.iscomplexobj(arr):
        raise InputError(f"{name} must be real")
    dtype = complex if allow_complex else float
    arr = arr.astype(dtype, copy=False)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise InputError(f"{name} must have dimension {d}, got shape {np.shape(x)}")
    return arr, single


@dataclass(frozen=True)
class QuadraticForm:
    """Symmetric real coefficient table for q(v) = (1/2) v.Q v over complex v."""

    coefficients: Array

    def __post_init__(self):
        q = np.asarray(self.coefficients, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise InputError("quadratic form coefficients must be a square matrix")
        if not np.allclose(q, q.T, rtol=0.0, atol=1e-12):
            raise InputError("quadratic form coefficients must be symmetric")
        object.__setattr__(self, "coefficients", 0.5 * (q + q.T))

    @property
    def dim(self) -> int:
        return self.coefficients.shape[0]

    def value(self, v) -> complex | Array:
        """q(v), bilinear in v (no conjugation)."""
        vv, single = _as_points(v, self.dim, "v", allow_complex=True)
        out = 0.5 * np.einsum("nj,jk,nk->n", vv, self.coefficients, vv)
        return out[0] if single else out

    def gradient(self, v) -> Array:
        """dq/dv = Q v, complex-linear in v."""
        vv, single = _as_points(v, self.dim, "v", allow_complex=True)
        out = vv @ self.coefficients.T
        return out[0] if single else out


@dataclass(frozen=True)
class Potential:
    """Scalar potential with a user-supplied gradient (no automatic differentiation).

    ``energy`` maps (n, d) -> (n,), ``gradient`` maps (n, d) -> (n, d).
    """

    energy: Callable[[Array], Array]
    gradient: Callable[[Array], Array]
    hessian: Callable[[Array], Array] | None = None
    smoothness: str = "C1"
    name: str = "custom"

    def value(self, x, d: int | None = None):
        xx, single = _as_points(x, d if d is not None else np.shape(x)[-1], "x")
        out = np.asarray(self.energy(xx), dtype=float).reshape(xx.shape[0])
        return out[0] if single else out

    def grad(self, x, d: int | None = None):
        xx, single = _as_points(x, d if d is not None else np.shape(x)[-1], "x")
        out = np.asarray(self.gradient(xx), dtype=float).reshape(xx.shape)
        return out[0] if single else out


def free_potential() -> Potential:
    return Potential(
        energy=lambda x: np.zeros(x.shape[0]),
        gradient=np.zeros_like,
        hessian=lambda x: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        smoothness="C2",
        name="free",
    )


def harmonic_potential(omega: float = 1.0) -> Potential:
    """U(x) = (1/2) omega^2 |x|^2."""
    w2 = float(omega) ** 2

    def hess(x):
        n, d = x.shape
        return np.broadcast_to(w2 * np.eye(d), (n, d, d)).copy()

    return Potential(
        energy=lambda x: 0.5 * w2 * np.sum(x**2, axis=1),
        gradient=lambda x: w2 * x,
        hessian=hess,
        smoothness="C2",
        name=f"harmonic(omega={omega})",
    )


def central_power_potential(k: float, alpha: float) -> Potential:
    """U(x) = k |x|^alpha, gradient k*alpha*|x|^(alpha-2) x (singular at 0 if alpha < 2)."""

    def energy(x):
        return k * np.linalg.norm(x, axis=1) ** alpha

    def gradient(x):
        r = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(r > 0, k * alpha * r ** (alpha - 2.0), 0.0)
        return coef[:, None] * x

    return Potential(energy=energy, gradient=gradient, smoothness="C1",
                     name=f"central_power(k={k},alpha={alpha})")


def tabulated_potential(radii: Array, values: Array) -> Potential:
    """Radial potential from a table, cubic-spline interpolated."""
    from scipy.interpolate import CubicSpline

    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    if radii.ndim != 1 or radii.shape != values.shape or radii.size < 4:
        raise InputError("tabulated potential needs matching 1-d tables with >= 4 rows")
    spline = CubicSpline(radii, values)
    dspline = spline.derivative()

    def energy(x):
        return spline(np.linalg.norm(x, axis=1))

    def gradient(x):
        r = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(r > 0, dspline(r) / r, 0.0)
        return coef[:, None] * x

    return Potential(energy=energy, gradient=gradient, smoothness="C1", name="tabulated")


@dataclass(frozen=True)
class LagrangianSpec:
    """Natural Lagrangian L(x, v) = q(v) - U(x) in dimension ``dim``."""

    q: QuadraticForm
    potential: Potential
    dim: int

    def __post_init__(self):
        if self.q.dim != self.dim:
            raise InputError(
                f"quadratic form dimension {self.q.dim} != Lagrangian dimension {self.dim}"
            )

    def value(self, x, v):
        """L(x, v) = q(v) - U(x); real whenever v is real."""
        xx, sx = _as_points(x, self.dim, "x")
        vv, sv = _as_points(v, self.dim, "v", allow_complex=True)
        if xx.shape[0] != vv.shape[0]:
            raise InputError("x and v batches must have equal length")
        out = self.q.value(vv) - self.potential.value(xx, self.dim)
        out = np.atleast_1d(np.asarray(out, dtype=complex))
        return out[0] if (sx and sv) else out

    def partials(self, x, v):
        """(dL/dx, dL/dv) = (-gradU(x), Q v)."""
        xx, sx = _as_points(x, self.dim, "x")
        vv, sv = _as_points(v, self.dim, "v", allow_complex=True)
        if xx.shape[0] != vv.shape[0]:
            raise InputError("x and v batches must have equal length")
        dx = -self.potential.grad(xx, self.dim)
        dv = np.atleast_2d(self.q.gradient(vv))
        if sx and sv:
            return dx[0] if dx.ndim == 2 else dx, dv[0]
        return dx, dv

    def momentum(self, v):
        """Velocity gradient dL/dv = Q v (the momentum paired with variations)."""
        return self.q.gradient(v)


def eval_lagrangian(spec: LagrangianSpec, x, v):
    return spec.value(x, v)


def partials(spec: LagrangianSpec, x, v):
    return spec.partials(x, v)


@dataclass
class AdmissibilityReport:
    passed: bool
    max_abs_imag: float
    max_gradient_rel_err: float
    n_probes: int
    failures: list = field(default_factory=list)


def check_admissible(
    spec: LagrangianSpec,
    probes: Array | None = None,
    n_probes: int = 100,
    seed: int = 0,
    grad_rtol: float = 1e-5,
    fd_step: float = 1e-6,
) -> AdmissibilityReport:
    """Probe that L is real on real arguments and that gradU matches U.

    Never raises on a failing Lagrangian; problems land in the report. The
    gradient check compares central finite differences of U against the
    supplied gradient at ``probes`` (or random standard-normal probes).
    """
    d = spec.dim
    if probes is None:
        rng = np.random.default_rng(seed)
        probes = rng.standard_normal((n_probes, 2 * d))
    probes = np.asarray(probes, dtype=float)
    if probes.ndim != 2 or probes.shape[1] != 2 * d:
        raise InputError("probes must be an (n, 2d) table of stacked (x, v) rows")
    x = probes[:, :d]
    v = probes[:, d:]

    failures: list[str] = []
    lvals = np.atleast_1d(spec.value(x, v))
    max_imag = float(np.max(np.abs(lvals.imag))) if lvals.size else 0.0
    if max_imag > 1e-10:
        failures.append(f"L not real on real arguments: max |Im L| = {max_imag:.3e}")

    grad = spec.potential.grad(x, d)
    fd = np.empty_like(grad)
    for j in range(d):
        h = fd_step * np.maximum(1.0, np.abs(x[:, j]))
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        fd[:, j] = (spec.potential.value(xp, d) - spec.potential.value(xm, d)) / (2 * h)
    scale = np.maximum(np.abs(fd), 1.0)
    rel = np.abs(grad - fd) / scale
    max_rel = float(rel.max()) if rel.size else 0.0
    if max_rel > grad_rtol:
        failures.append(f"gradU inconsistent with U: max rel err = {max_rel:.3e}")

    return AdmissibilityReport(
        passed=not failures,
        max_abs_imag=max_imag,
        max_gradient_rel_err=max_rel,
        n_probes=probes.shape[0],
        failures=failures,
    )
