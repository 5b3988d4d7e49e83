"""Diffusion models and seeded Euler-Maruyama path ensembles on a uniform grid.

Random numbers follow a per-path substream contract: path ``i`` draws from the
counter-based Philox stream ``Philox(seed).jumped(i)``, first the initial
condition, then the M Gaussian increments. Results are therefore bitwise
identical for any chunking or worker count.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import InputError, SimulationError

Array = np.ndarray

_MAGIC = b"STOVARPE"
_BINARY_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_m = a + m*dt on J = [a, b] with M = steps intervals."""

    a: float
    b: float
    steps: int

    def __post_init__(self):
        if not (self.a < self.b):
            raise InputError(f"need a < b, got a={self.a}, b={self.b}")
        if self.steps < 2:
            raise InputError("need at least 2 steps")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dt(self) -> float:
        return (self.b - self.a) / self.steps

    @property
    def times(self) -> Array:
        return np.linspace(self.a, self.b, self.steps + 1)

    @property
    def n_times(self) -> int:
        return self.steps + 1

    def index_of(self, t: float) -> int:
        """Grid index of time t; t must sit on the grid up to rounding."""
        m = int(round((float(t) - self.a) / self.dt))
        if m < 0 or m > self.steps or abs(self.a + m * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise InputError(f"time {t} is not a grid point of [{self.a}, {self.b}]")
        return m


@dataclass(frozen=True)
class InitialLaw:
    """Initial condition: point mass at ``mean`` or Gaussian(mean, cov)."""

    kind: str
    mean: Array
    cov: Array | None = None

    def __post_init__(self):
        if self.kind not in ("point", "gaussian"):
            raise InputError(f"unknown initial law kind {self.kind!r}")
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        if self.kind == "gaussian":
            if self.cov is None:
                raise InputError("gaussian initial law needs a covariance")
            cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
            if cov.shape != (self.mean.size, self.mean.size):
                raise InputError("initial covariance shape mismatch")
            object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def point_start(x0) -> InitialLaw:
    return InitialLaw("point", np.atleast_1d(np.asarray(x0, dtype=float)))


def gaussian_start(mean, cov) -> InitialLaw:
    return InitialLaw("gaussian", mean, cov)


@dataclass(frozen=True)
class DiffusionModel:
    """dX = b(t, X) dt + sigma(t, X) dW on R^d.

    ``drift`` maps (t, X[n, d]) -> (n, d). The dispersion is either the
    constant matrix ``dispersion_const`` (d, d) or the callable ``dispersion``
    returning (n, d, d). The affine metadata (``drift_matrix``,
    ``drift_offset`` with b(t, x) = B x + offset) unlocks exact analytic
    second-derivative routes; models without it fall back to finite
    differences of the drift.
    """

    dim: int
    drift: Callable[[float, Array], Array]
    initial: InitialLaw
    dispersion_const: Array | None = None
    dispersion: Callable[[float, Array], Array] | None = None
    drift_matrix: Array | None = None
    drift_offset: Array | None = None
    description: str = "custom"

    def __post_init__(self):
        if (self.dispersion_const is None) == (self.dispersion is None):
            raise InputError("provide exactly one of dispersion_const / dispersion")
        if self.initial.dim != self.dim:
            raise InputError("initial law dimension mismatch")
        if self.dispersion_const is not None:
            s = np.atleast_2d(np.asarray(self.dispersion_const, dtype=float))
            if s.shape != (self.dim, self.dim):
                raise InputError("dispersion_const must be (d, d)")
            object.__setattr__(self, "dispersion_const", s)
        if self.drift_matrix is not None:
            object.__setattr__(
                self, "drift_matrix", np.atleast_2d(np.asarray(self.drift_matrix, dtype=float))
            )
        if self.drift_offset is not None:
            object.__setattr__(
                self, "drift_offset", np.atleast_1d(np.asarray(self.drift_offset, dtype=float))
            )

    @property
    def is_deterministic(self) -> bool:
        return self.dispersion_const is not None and not np.any(self.dispersion_const)

    def dispersion_at(self, t: float, x: Array) -> Array:
        """(n, d, d) dispersion matrix at (t, each row of x)."""
        if self.dispersion_const is not None:
            return np.broadcast_to(self.dispersion_const, (x.shape[0], self.dim, self.dim))
        return np.asarray(self.dispersion(t, x), dtype=float).reshape(x.shape[0], self.dim, self.dim)

    def diffusion_matrix(self, t: float, x: Array) -> Array:
        """a = sigma sigma^T, (n, d, d), symmetric positive semi-definite."""
        s = self.dispersion_at(t, x)
        return np.einsum("nik,njk->nij", s, s)

    def diffusion_matrix_const(self) -> Array | None:
        if self.dispersion_const is None:
            return None
        return self.dispersion_const @ self.dispersion_const.T


def affine_model(
    dim: int,
    drift_matrix,
    drift_offset,
    dispersion_const,
    initial: InitialLaw,
    description: str = "affine",
) -> DiffusionModel:
    """Model with drift b(t, x) = B x + c and constant dispersion."""
    B = np.atleast_2d(np.asarray(drift_matrix, dtype=float))
    c = np.atleast_1d(np.asarray(drift_offset, dtype=float))

    def drift(t, x):
        return x @ B.T + c

    return DiffusionModel(
        dim=dim,
        drift=drift,
        initial=initial,
        dispersion_const=np.atleast_2d(np.asarray(dispersion_const, dtype=float)),
        drift_matrix=B,
        drift_offset=c,
        description=description,
    )


@dataclass(frozen=True)
class PathEnsemble:
    """N simulated paths on a grid: values[n, m, :] = X_n(t_m)."""

    grid: TimeGrid
    values: Array
    seed: int
    description: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1] != self.grid.n_times:
            raise InputError("ensemble values must have shape (N, M+1, d)")
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def at_time(self, t: float) -> Array:
        return self.values[:, self.grid.index_of(t), :]

    def shifted(self, offset: Array) -> "PathEnsemble":
        """Ensemble with every sample translated by offset[m, :] (per time)."""
        offset = np.asarray(offset, dtype=float)
        return PathEnsemble(
            grid=self.grid,
            values=self.values + offset[None, :, :],
            seed=self.seed,
            description=self.description + "+shift",
        )


def _path_stream(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)).jumped(path_index))


def _simulate_chunk(model: DiffusionModel, grid: TimeGrid, seed: int,
                    start: int, stop: int, out: Array) -> None:
    d = model.dim
    M = grid.steps
    nc = stop - start
    dt = grid.dt
    sqdt = np.sqrt(dt)
    times = grid.times

    noise = np.empty((nc, M, d))
    x0 = np.empty((nc, d))
    for i in range(nc):
        rng = _path_stream(seed, start + i)
        if model.initial.kind == "gaussian":
            z = rng.standard_normal(d)
            chol = np.linalg.cholesky(model.initial.cov)
            x0[i] = model.initial.mean + chol @ z
        else:
            x0[i] = model.initial.mean
        noise[i] = rng.standard_normal((M, d))

    out[start:stop, 0, :] = x0
    const_sigma = model.dispersion_const
    x = x0
    for m in range(M):
        t = times[m]
        b = np.asarray(model.drift(t, x), dtype=float).reshape(nc, d)
        if not np.all(np.isfinite(b)):
            bad = int(np.flatnonzero(~np.isfinite(b).all(axis=1))[0])
            raise SimulationError(
                f"non-finite drift at t={t}, path={start + bad}, x={x[bad]}"
            )
        if const_sigma is not None:
            step_noise = noise[:, m, :] @ const_sigma.T
        else:
            s = model.dispersion_at(t, x)
            if not np.all(np.isfinite(s)):
                bad = int(np.flatnonzero(~np.isfinite(s).reshape(nc, -1).all(axis=1))[0])
                raise SimulationError(
                    f"non-finite dispersion at t={t}, path={start + bad}, x={x[bad]}"
                )
            step_noise = np.einsum("nij,nj->ni", s, noise[:, m, :])
        x = x + b * dt + step_noise * sqdt
        out[start:stop, m + 1, :] = x


def simulate(
    model: DiffusionModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    threads: int = 1,
    chunk_size: int = 4096,
) -> PathEnsemble:
    """Euler-Maruyama ensemble, deterministic given (model, grid, n_paths, seed).

    X_{m+1} = X_m + b(t_m, X_m) dt + sigma(t_m, X_m) sqrt(dt) xi_m with
    independent standard normal xi_m per path. The chunk size is fixed so the
    floating-point evaluation order never depends on ``threads``.
    """
    if n_paths < 1:
        raise InputError("need at least one path")
    out = np.empty((n_paths, grid.n_times, model.dim))
    ranges = [(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]
    if threads <= 1 or len(ranges) == 1:
        for s, e in ranges:
            _simulate_chunk(model, grid, seed, s, e, out)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_simulate_chunk, model, grid, seed, s, e, out)
                       for s, e in ranges]
            for f in futures:
                f.result()
    if not np.all(np.isfinite(out)):
        raise SimulationError("simulation produced non-finite samples")
    return PathEnsemble(grid=grid, values=out, seed=int(seed),
                        description=model.description)


def deterministic_ensemble(grid: TimeGrid, trajectory: Array, n_paths: int = 1,
                           description: str = "deterministic") -> PathEnsemble:
    """Zero-noise ensemble whose every path equals the given trajectory (M+1, d)."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim == 1:
        traj = traj[:, None]
    if traj.shape[0] != grid.n_times:
        raise InputError("trajectory length must match the grid")
    values = np.broadcast_to(traj, (n_paths,) + traj.shape).copy()
    return PathEnsemble(grid=grid, values=values, seed=0, description=description)


# ---------------------------------------------------------------------------
# ensemble export / import
# ---------------------------------------------------------------------------

def ensemble_to_csv(ens: PathEnsemble, path, path_block: int = 256) -> None:
    """Long-format CSV with columns path, t, x_1..x_d."""
    d = ens.dim
    header = "path,t," + ",".join(f"x_{j + 1}" for j in range(d))
    times = ens.grid.times
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for s in range(0, ens.n_paths, path_block):
            e = min(s + path_block, ens.n_paths)
            block = ens.values[s:e]
            nb = e - s
            rows = np.empty((nb * len(times), 2 + d))
            rows[:, 0] = np.repeat(np.arange(s, e), len(times))
            rows[:, 1] = np.tile(times, nb)
            rows[:, 2:] = block.reshape(nb * len(times), d)
            np.savetxt(fh, rows, fmt=["%d", "%.17g"] + ["%.17g"] * d, delimiter=",")


def ensemble_to_binary(ens: PathEnsemble, path) -> None:
    """Compact dump: magic, version, d, N, M, a, b, seed, row-major float64 LE."""
    head = struct.pack(
        "<8sIIQQddQ",
        _MAGIC,
        _BINARY_VERSION,
        ens.dim,
        ens.n_paths,
        ens.grid.steps,
        ens.grid.a,
        ens.grid.b,
        ens.seed & 0xFFFFFFFFFFFFFFFF,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(ens.values, dtype="<f8").tobytes())


def ensemble_from_binary(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<8sIIQQddQ"))
        magic, version, d, n, steps, a, b, seed = struct.unpack("<8sIIQQddQ", head)
        if magic != _MAGIC:
            raise InputError("not a stovar ensemble dump (bad magic)")
        if version != _BINARY_VERSION:
            raise InputError(f"unsupported dump version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    grid = TimeGrid(a, b, int(steps))
    values = data.reshape(int(n), grid.n_times, int(d))
    return PathEnsemble(grid=grid, values=values, seed=int(seed), description="loaded")
