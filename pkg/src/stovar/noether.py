"""One-parameter affine symmetry groups and the conserved quantity they induce.

A group element acts on states as phi_s(x) = A(s) x + c(s); its suspension
acts on ensembles pointwise in time and path. Affine groups are exactly the
ones for which the derivative-of-function formula needs no extra hypotheses,
and for them the transformed derivative field is A(s) times the original one
(conditional expectations are linear), so no re-simulation is required.

For an invariant Lagrangian and a stationary ensemble the pairing
I(t) = E[(Q DX_t) . (G X_t + g0)] is constant in time; ``constancy_test``
judges that statistically through a weighted slope fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .diffusion import DiffusionModel, PathEnsemble
from .exceptions import CapabilityError, InputError
from .lagrangian import LagrangianSpec
from .nelson import (DerivativeField, SpaceTimeFunction, analytic_complex_derivative,
                     derivative_of_function)
from .stats import SlopeFit, mean_stderr, weighted_slope
from .variation import integration_window

Array = np.ndarray


@dataclass
class OneParameterGroup:
    """Affine flow phi_s(x) = A(s) x + c(s) with generator (G, g0).

    A and c are C^2 in s; the generator satisfies A'(0) = G, c'(0) = g0, and
    for flows of the affine field v(x) = G x + g0 one has A'(s) = G A(s) and
    c'(s) = A(s) g0, which is how the s-derivatives are evaluated.
    """

    dim: int
    matrix: Callable[[float], Array]
    offset: Callable[[float], Array]
    generator: Array
    gen_offset: Array
    name: str = "custom"

    def __post_init__(self):
        self.generator = np.atleast_2d(np.asarray(self.generator, dtype=float))
        self.gen_offset = np.atleast_1d(np.asarray(self.gen_offset, dtype=float))
        if self.generator.shape != (self.dim, self.dim) or self.gen_offset.shape != (self.dim,):
            raise InputError("generator shapes do not match the group dimension")

    def matrix_at(self, s: float) -> Array:
        return np.atleast_2d(np.asarray(self.matrix(s), dtype=float))

    def offset_at(self, s: float) -> Array:
        return np.atleast_1d(np.asarray(self.offset(s), dtype=float))

    def matrix_derivative(self, s: float) -> Array:
        return self.generator @ self.matrix_at(s)

    def offset_derivative(self, s: float) -> Array:
        return self.matrix_at(s) @ self.gen_offset

    def apply(self, x: Array, s: float) -> Array:
        return x @ self.matrix_at(s).T + self.offset_at(s)

    def infinitesimal(self, x: Array) -> Array:
        """d/ds phi_s(x) at s = 0, i.e. G x + g0."""
        return x @ self.generator.T + self.gen_offset


def rotation_group(dim: int = 2, plane: tuple[int, int] = (0, 1)) -> OneParameterGroup:
    """Rotation in coordinate plane (i, j); exact trigonometric entries."""
    i, j = plane
    if not (0 <= i < dim and 0 <= j < dim and i != j):
        raise InputError("rotation plane indices out of range")
    G = np.zeros((dim, dim))
    G[i, j] = -1.0
    G[j, i] = 1.0

    def matrix(s):
        A = np.eye(dim)
        A[i, i] = np.cos(s)
        A[j, j] = np.cos(s)
        A[i, j] = -np.sin(s)
        A[j, i] = np.sin(s)
        return A

    return OneParameterGroup(
        dim=dim, matrix=matrix, offset=lambda s: np.zeros(dim),
        generator=G, gen_offset=np.zeros(dim), name=f"rotation({i},{j})",
    )


def translation_group(direction) -> OneParameterGroup:
    e = np.atleast_1d(np.asarray(direction, dtype=float))
    dim = e.size
    eye = np.eye(dim)
    return OneParameterGroup(
        dim=dim, matrix=lambda s: eye, offset=lambda s: s * e,
        generator=np.zeros((dim, dim)), gen_offset=e, name="translation",
    )


def scaling_group(dim: int = 1, rate: float = 1.0) -> OneParameterGroup:
    eye = np.eye(dim)
    return OneParameterGroup(
        dim=dim, matrix=lambda s: np.exp(rate * s) * eye,
        offset=lambda s: np.zeros(dim),
        generator=rate * eye, gen_offset=np.zeros(dim), name="scaling",
    )


def affine_group(generator, gen_offset=None, name: str = "affine") -> OneParameterGroup:
    """Flow of v(x) = G x + g0 via the augmented matrix exponential."""
    G = np.atleast_2d(np.asarray(generator, dtype=float))
    dim = G.shape[0]
    g0 = np.zeros(dim) if gen_offset is None else np.asarray(gen_offset, dtype=float).reshape(dim)
    aug = np.zeros((dim + 1, dim + 1))
    aug[:dim, :dim] = G
    aug[:dim, dim] = g0

    def matrix(s):
        return expm(s * aug)[:dim, :dim]

    def offset(s):
        return expm(s * aug)[:dim, dim]

    return OneParameterGroup(dim=dim, matrix=matrix, offset=offset,
                             generator=G, gen_offset=g0, name=name)


# ---------------------------------------------------------------------------
# group diagnostics
# ---------------------------------------------------------------------------

@dataclass
class GroupLawReport:
    max_composition_error: float
    max_inverse_error: float
    identity_exact: bool
    tol: float

    @property
    def passed(self) -> bool:
        return (self.identity_exact and self.max_composition_error <= self.tol
                and self.max_inverse_error <= self.tol)


def check_group_law(grp: OneParameterGroup, probes: Array,
                    s_values: Sequence[float] = (-1.0, -0.3, 0.2, 0.7, 1.0),
                    tol: float = 1e-9) -> GroupLawReport:
    """phi_s o phi_r = phi_{s+r}, phi_0 = id, phi_s o phi_{-s} = id on probes."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    comp_err = 0.0
    inv_err = 0.0
    for s in s_values:
        for r in s_values:
            lhs = grp.apply(grp.apply(probes, r), s)
            rhs = grp.apply(probes, s + r)
            comp_err = max(comp_err, float(np.abs(lhs - rhs).max()))
        back = grp.apply(grp.apply(probes, s), -s)
        inv_err = max(inv_err, float(np.abs(back - probes).max()))
    ident = bool(np.array_equal(grp.apply(probes, 0.0), probes))
    return GroupLawReport(max_composition_error=comp_err, max_inverse_error=inv_err,
                          identity_exact=ident, tol=tol)


def generator_consistency(grp: OneParameterGroup, probes: Array,
                          delta: float = 1e-4) -> float:
    """Max error of the central s-difference of phi against G x + g0 (O(delta^2))."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    fd = (grp.apply(probes, delta) - grp.apply(probes, -delta)) / (2.0 * delta)
    return float(np.abs(fd - grp.infinitesimal(probes)).max())


# ---------------------------------------------------------------------------
# suspension and invariance
# ---------------------------------------------------------------------------

def apply_group(ens: PathEnsemble, grp: OneParameterGroup, s: float) -> PathEnsemble:
    """Pointwise suspension action on an ensemble; s = 0 is a bitwise identity."""
    if grp.dim != ens.dim:
        raise InputError("group dimension does not match the ensemble")
    if s == 0.0:
        values = ens.values.copy()
    else:
        values = ens.values @ grp.matrix_at(s).T + grp.offset_at(s)
    return PathEnsemble(grid=ens.grid, values=values, seed=ens.seed,
                        description=f"{ens.description}|{grp.name}(s={s})")


@dataclass
class InvarianceReport:
    group: str
    s_values: list
    deviations: list          # max over times of the per-time mean deviation, per s
    max_deviation: float
    tol: float

    @property
    def invariant(self) -> bool:
        return self.max_deviation <= self.tol


def invariance_check(
    spec: LagrangianSpec,
    grp: OneParameterGroup,
    ens: PathEnsemble,
    dfield: DerivativeField,
    s_values: Sequence[float] = (0.25, 0.5, 1.0),
    tol: float = 1e-9,
) -> InvarianceReport:
    """|L(phi_s X, A(s) DX) - L(X, DX)| averaged over paths, maximized over times.

    The transformed derivative field is A(s) DX by linearity of conditional
    expectation under affine maps.
    """
    if grp.dim != ens.dim or spec.dim != ens.dim:
        raise CapabilityError("invariance check needs matching affine group and ensemble")
    window = integration_window(dfield.valid, ens.grid)
    inc = window.included
    devs = []
    for s in s_values:
        A = grp.matrix_at(s)
        c = grp.offset_at(s)
        worst = 0.0
        for m in range(window.lo, window.hi + 1):
            x = ens.values[inc, m, :]
            v = dfield.values[inc, m, :]
            base = spec.q.value(v) - spec.potential.value(x, spec.dim)
            moved = spec.q.value(v @ A.T) - spec.potential.value(x @ A.T + c, spec.dim)
            worst = max(worst, float(np.mean(np.abs(moved - base))))
        devs.append(worst)
    return InvarianceReport(group=grp.name, s_values=list(s_values), deviations=devs,
                            max_deviation=float(max(devs)), tol=tol)


@dataclass
class CommutationReport:
    group: str
    s: float
    delta_s: float
    max_discrepancy: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_discrepancy <= self.tol


def commutation_check(
    grp: OneParameterGroup,
    model: DiffusionModel,
    dm,
    ens: PathEnsemble,
    s: float = 0.0,
    delta_s: float = 1e-4,
    dfield: DerivativeField | None = None,
    tol: float = 1e-6,
) -> CommutationReport:
    """Compare the s-derivative of D(phi_s X) against D applied to d/ds phi_s(X).

    The left side differentiates A(s) DX in s by central differences; the
    right side pushes the affine map A'(s) x + c'(s) through the
    derivative-of-function rule. Agreement is O(delta_s^2) plus rounding.
    """
    if dfield is None:
        dfield = analytic_complex_derivative(model, dm, ens)
    dA = (grp.matrix_at(s + delta_s) - grp.matrix_at(s - delta_s)) / (2.0 * delta_s)
    lhs = np.einsum("ntd,ed->nte", dfield.values, dA)
    rhs_fn = SpaceTimeFunction.affine(grp.matrix_derivative(s).astype(complex),
                                      grp.offset_derivative(s).astype(complex))
    rhs = derivative_of_function(rhs_fn, dfield, model, ens)
    mask = dfield.valid & rhs.valid
    disc = np.abs(lhs - rhs.values)[mask]
    return CommutationReport(group=grp.name, s=float(s), delta_s=float(delta_s),
                             max_discrepancy=float(disc.max()) if disc.size else 0.0,
                             tol=tol)


# ---------------------------------------------------------------------------
# conserved quantity
# ---------------------------------------------------------------------------

@dataclass
class ConservedQuantitySeries:
    group: str
    times: Array
    values: Array           # complex I(t) = E[(Q DX_t) . (G X_t + g0)]
    stderr: Array
    n_paths: int
    warnings: list = field(default_factory=list)


def conserved_quantity(
    spec: LagrangianSpec,
    grp: OneParameterGroup,
    ens: PathEnsemble,
    dfield: DerivativeField,
    invariance: InvarianceReport | None = None,
) -> ConservedQuantitySeries:
    """Candidate first integral: momentum paired with the group's infinitesimal motion.

    When the supplied (or internally run) invariance check fails, the series
    is still computed but carries an inapplicability warning: without
    invariance the conservation statement does not follow.
    """
    if grp.dim != ens.dim:
        raise InputError("group dimension mismatch")
    if dfield.operator != "Dc":
        raise InputError("need the complex derivative field")
    warnings: list[str] = []
    if invariance is None:
        invariance = invariance_check(spec, grp, ens, dfield, s_values=(0.3, 0.7))
    if not invariance.invariant:
        warnings.append(
            f"lagrangian is not invariant under {grp.name} "
            f"(max deviation {invariance.max_deviation:.3e}); "
            "Noether conservation inapplicable"
        )
    window = integration_window(dfield.valid, ens.grid)
    inc = window.included
    q = spec.q.coefficients
    idx = np.arange(window.lo, window.hi + 1)
    times = ens.grid.times[idx]
    vals = np.empty(idx.size, dtype=complex)
    errs = np.empty(idx.size)
    for j, m in enumerate(idx):
        mom = dfield.values[inc, m, :] @ q.T
        direction = ens.values[inc, m, :] @ grp.generator.T + grp.gen_offset
        samples = np.einsum("nd,nd->n", mom, direction)
        mu, se = mean_stderr(samples)
        vals[j] = mu
        errs[j] = se
    return ConservedQuantitySeries(group=grp.name, times=times, values=vals,
                                   stderr=errs, n_paths=int(inc.sum()),
                                   warnings=warnings)


@dataclass
class ConstancyVerdict:
    verdict: str                 # "CONSERVED" | "DRIFTING"
    slope_re: SlopeFit
    slope_im: SlopeFit
    range_re: float
    range_im: float
    range_limit: float
    warnings: list = field(default_factory=list)

    @property
    def conserved(self) -> bool:
        return self.verdict == "CONSERVED"


def constancy_test(series: ConservedQuantitySeries, level: float = 0.99,
                   range_factor: float = 5.0) -> ConstancyVerdict:
    """CONSERVED when both slope confidence intervals contain zero and the
    series range stays within ``range_factor`` times the median stderr."""
    if series.times.size < 10:
        raise InputError("constancy test needs at least 10 interior times")
    if not np.all(np.isfinite(series.values)):
        raise InputError("degenerate conserved-quantity series")
    fit_re = weighted_slope(series.times, series.values.real, series.stderr, level=level)
    fit_im = weighted_slope(series.times, series.values.imag, series.stderr, level=level)
    rng_re = float(series.values.real.max() - series.values.real.min())
    rng_im = float(series.values.imag.max() - series.values.imag.min())
    limit = range_factor * float(np.median(series.stderr))
    ok = (fit_re.contains_zero() and fit_im.contains_zero()
          and rng_re <= limit and rng_im <= limit)
    return ConstancyVerdict(
        verdict="CONSERVED" if ok else "DRIFTING",
        slope_re=fit_re,
        slope_im=fit_im,
        range_re=rng_re,
        range_im=rng_im,
        range_limit=limit,
        warnings=list(series.warnings),
    )
