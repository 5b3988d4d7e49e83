"""Time-indexed density models p_t used by the analytic derivative formula.

Three kinds are supported: closed-form Gaussian families (mean(t), cov(t)),
kernel density estimates built from a path ensemble, and the degenerate
"dirac" branch for zero-noise ensembles where the density terms are bypassed.

Every model evaluates p_t, grad p_t and the vector with components
d/dx_j (a^{kj} p_t); the drift correction c = div_a(p) / (2 p) is what enters
the complex derivative. For Gaussian families c is computed in closed form
(no density ratio), which keeps the analytic route exact to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg as _sla

from .diffusion import PathEnsemble
from .exceptions import EstimationError, InputError

Array = np.ndarray

DENSITY_FLOOR_REL = 1e-12  # relative to the per-time maximum of p over the batch


def _as_batch(x, d: int) -> tuple[Array, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise InputError(f"points must have dimension {d}")
    return arr, single


@dataclass(frozen=True)
class GaussianDensityModel:
    """p_t = N(mean(t), cov(t)) with the (constant) diffusion matrix ``a_const``.

    ``mean_dot`` / ``cov_dot`` are the exact time derivatives; when omitted
    they are filled in by central differences, which degrades the second
    derivative route from exact to O(step^2).
    """

    dim: int
    mean: Callable[[float], Array]
    cov: Callable[[float], Array]
    a_const: Array
    mean_dot: Callable[[float], Array] | None = None
    cov_dot: Callable[[float], Array] | None = None
    kind: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "a_const", np.atleast_2d(np.asarray(self.a_const, dtype=float)))

    # -- plain density data -------------------------------------------------

    def density_at(self, t: float, x):
        """(p, grad p, div_a p, low_density_flag) at (t, rows of x)."""
        X, single = _as_batch(x, self.dim)
        mu = np.atleast_1d(np.asarray(self.mean(t), dtype=float))
        sigma = np.atleast_2d(np.asarray(self.cov(t), dtype=float))
        y = X - mu
        cho = _sla.cho_factor(sigma, lower=True)
        siy = _sla.cho_solve(cho, y.T).T
        quad = np.einsum("nj,nj->n", y, siy)
        logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
        p = np.exp(-0.5 * quad - 0.5 * logdet - 0.5 * self.dim * np.log(2.0 * np.pi))
        gradp = -p[:, None] * siy
        divap = gradp @ self.a_const.T
        low = p < DENSITY_FLOOR_REL * p.max()
        if single:
            return p[0], gradp[0], divap[0], bool(low[0])
        return p, gradp, divap, low

    # -- exact pieces for the derivative formula ----------------------------

    def drift_correction(self, t: float, x) -> tuple[Array, Array]:
        """c = div_a(p)/(2p) = -(1/2) a cov^-1 (x - mean), exact for Gaussians."""
        X, single = _as_batch(x, self.dim)
        mu = np.atleast_1d(np.asarray(self.mean(t), dtype=float))
        sigma = np.atleast_2d(np.asarray(self.cov(t), dtype=float))
        siy = _sla.cho_solve(_sla.cho_factor(sigma, lower=True), (X - mu).T).T
        c = -0.5 * siy @ self.a_const.T
        p, _, _, low = self.density_at(t, X)
        if single:
            return c[0], np.atleast_1d(low)[0]
        return c, low

    def _mean_dot(self, t: float) -> Array:
        if self.mean_dot is not None:
            return np.atleast_1d(np.asarray(self.mean_dot(t), dtype=float))
        h = 1e-6 * max(1.0, abs(t))
        return (np.asarray(self.mean(t + h)) - np.asarray(self.mean(t - h))) / (2 * h)

    def _cov_dot(self, t: float) -> Array:
        if self.cov_dot is not None:
            return np.atleast_2d(np.asarray(self.cov_dot(t), dtype=float))
        h = 1e-6 * max(1.0, abs(t))
        return (np.atleast_2d(self.cov(t + h)) - np.atleast_2d(self.cov(t - h))) / (2 * h)

    def correction_gradient(self, t: float) -> Array:
        """Spatial Jacobian of c: constant -(1/2) a cov^-1."""
        sigma = np.atleast_2d(np.asarray(self.cov(t), dtype=float))
        sigma_inv = _sla.cho_solve(_sla.cho_factor(sigma, lower=True), np.eye(self.dim))
        return -0.5 * self.a_const @ sigma_inv

    def correction_time_partial(self, t: float, x) -> Array:
        """d/dt of c(t, x) at fixed x."""
        X, single = _as_batch(x, self.dim)
        sigma = np.atleast_2d(np.asarray(self.cov(t), dtype=float))
        cho = _sla.cho_factor(sigma, lower=True)
        sigma_inv = _sla.cho_solve(cho, np.eye(self.dim))
        mu = np.atleast_1d(np.asarray(self.mean(t), dtype=float))
        y = X - mu
        d_inv = -sigma_inv @ self._cov_dot(t) @ sigma_inv
        out = -0.5 * (y @ d_inv.T - self._mean_dot(t) @ sigma_inv.T) @ self.a_const.T
        return out[0] if single else out


@dataclass(frozen=True)
class DiracDensityModel:
    """Degenerate density of a zero-noise ensemble: p = 1, all density terms vanish."""

    dim: int
    kind: str = "dirac"

    def density_at(self, t: float, x):
        X, single = _as_batch(x, self.dim)
        p = np.ones(X.shape[0])
        zeros = np.zeros_like(X)
        low = np.zeros(X.shape[0], dtype=bool)
        if single:
            return 1.0, zeros[0], zeros[0], False
        return p, zeros, zeros.copy(), low

    def drift_correction(self, t: float, x):
        X, single = _as_batch(x, self.dim)
        c = np.zeros_like(X)
        low = np.zeros(X.shape[0], dtype=bool)
        if single:
            return c[0], False
        return c, low


def silverman_bandwidth(samples: Array) -> Array:
    """Per-dimension rule-of-thumb bandwidth (4 / ((d + 2) N))^(1/(d+4)) * sd."""
    n, d = samples.shape
    sd = samples.std(axis=0, ddof=1)
    return sd * (4.0 / ((d + 2.0) * n)) ** (1.0 / (d + 4.0))


@dataclass
class KdeDensityModel:
    """Gaussian product-kernel density fitted per grid time from an ensemble."""

    source: PathEnsemble
    a_const: Array
    bandwidth_rule: object = "silverman"
    kind: str = "kde"

    def __post_init__(self):
        self.a_const = np.atleast_2d(np.asarray(self.a_const, dtype=float))
        self._cache: dict[int, tuple[Array, Array]] = {}

    @property
    def dim(self) -> int:
        return self.source.dim

    def _fit(self, t: float) -> tuple[Array, Array]:
        m = self.source.grid.index_of(t)
        if m in self._cache:
            return self._cache[m]
        samples = self.source.values[:, m, :]
        if samples.shape[0] < 100:
            raise EstimationError("kernel density fit needs at least 100 paths")
        if isinstance(self.bandwidth_rule, str):
            if self.bandwidth_rule != "silverman":
                raise InputError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
            bw = silverman_bandwidth(samples)
        else:
            bw = np.broadcast_to(np.asarray(self.bandwidth_rule, dtype=float),
                                 (samples.shape[1],)).copy()
        if np.any(bw <= 0):
            raise EstimationError(
                "degenerate (zero-variance) samples; use the dirac density branch"
            )
        self._cache[m] = (samples, bw)
        return samples, bw

    def density_at(self, t: float, x, chunk: int = 512):
        X, single = _as_batch(x, self.dim)
        samples, bw = self._fit(t)
        n_src, d = samples.shape
        norm = np.prod(np.sqrt(2.0 * np.pi) * bw)
        p = np.empty(X.shape[0])
        gradp = np.empty_like(X)
        for s in range(0, X.shape[0], chunk):
            e = min(s + chunk, X.shape[0])
            z = (X[s:e, None, :] - samples[None, :, :]) / bw  # (q, n_src, d)
            k = np.exp(-0.5 * np.einsum("qnd,qnd->qn", z, z))
            p[s:e] = k.sum(axis=1) / (n_src * norm)
            gradp[s:e] = -np.einsum("qn,qnd->qd", k, z / bw) / (n_src * norm)
        divap = gradp @ self.a_const.T
        low = p < DENSITY_FLOOR_REL * p.max()
        if single:
            return p[0], gradp[0], divap[0], bool(low[0])
        return p, gradp, divap, low

    def drift_correction(self, t: float, x):
        X, single = _as_batch(x, self.dim)
        p, gradp, divap, low = self.density_at(t, X)
        pf = np.maximum(p, DENSITY_FLOOR_REL * p.max())
        c = divap / (2.0 * pf[:, None])
        if single:
            return c[0], np.atleast_1d(low)[0]
        return c, low


DensityModel = GaussianDensityModel | DiracDensityModel | KdeDensityModel


def density_at(dm, t: float, x):
    """(p, grad p, div_a p, low_density_flag); low points should be masked upstream."""
    return dm.density_at(t, x)


def kde_fit(ens: PathEnsemble, t: float, bandwidth_rule="silverman",
            a_const=None) -> KdeDensityModel:
    """Kernel density model for ``ens`` validated at grid time ``t``."""
    if a_const is None:
        a_const = np.eye(ens.dim)
    model = KdeDensityModel(source=ens, a_const=a_const, bandwidth_rule=bandwidth_rule)
    model._fit(t)  # validates sample size and spread
    return model


def brownian_density(dim: int, sigma: float = 1.0, x0=None) -> GaussianDensityModel:
    """Law of sigma * W started at x0 at absolute time 0: N(x0, sigma^2 t I)."""
    x0 = np.zeros(dim) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    s2 = float(sigma) ** 2
    eye = np.eye(dim)
    return GaussianDensityModel(
        dim=dim,
        mean=lambda t: x0,
        cov=lambda t: s2 * t * eye,
        a_const=s2 * eye,
        mean_dot=lambda t: np.zeros(dim),
        cov_dot=lambda t: s2 * eye,
    )


def ou_stationary_density(dim: int, omega: float = 1.0, sigma: float = 1.0) -> GaussianDensityModel:
    """Stationary law of dX = -omega X dt + sigma dW: N(0, sigma^2/(2 omega) I)."""
    s2 = float(sigma) ** 2
    var = s2 / (2.0 * float(omega))
    eye = np.eye(dim)
    zero = np.zeros(dim)
    return GaussianDensityModel(
        dim=dim,
        mean=lambda t: zero,
        cov=lambda t: var * eye,
        a_const=s2 * eye,
        mean_dot=lambda t: zero,
        cov_dot=lambda t: 0.0 * eye,
    )
