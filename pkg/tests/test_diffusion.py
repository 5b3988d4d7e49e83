import numpy as np
import pytest

import stovar as sv
from stovar.exceptions import InputError, SimulationError


def test_grid_invariants():
    grid = sv.TimeGrid(1.0, 2.0, 10)
    assert grid.dt == pytest.approx(0.1)
    assert grid.times[0] == 1.0 and grid.times[-1] == 2.0
    assert grid.index_of(1.5) == 5
    with pytest.raises(InputError):
        sv.TimeGrid(2.0, 1.0, 10)
    with pytest.raises(InputError):
        sv.TimeGrid(0.0, 1.0, 1)
    with pytest.raises(InputError):
        grid.index_of(1.234)


def test_no_dynamics_constant_paths():
    grid = sv.TimeGrid(0.5, 1.5, 20)
    model = sv.affine_model(1, [[0.0]], [0.0], [[0.0]], sv.point_start([1.0]))
    ens = sv.simulate(model, grid, 5, seed=0)
    assert np.all(ens.values == 1.0)


def test_zero_noise_tracks_exponential_decay():
    # dx = -x dt from x0 = 1 on [0.5, 1.5]; Euler error bounded by 5 dt
    grid = sv.TimeGrid(0.5, 1.5, 1000)
    model = sv.affine_model(1, [[-1.0]], [0.0], [[0.0]], sv.point_start([1.0]))
    ens = sv.simulate(model, grid, 1, seed=0)
    exact = np.exp(-(grid.times - 0.5))
    assert np.abs(ens.values[0, :, 0] - exact).max() <= 5 * grid.dt


def test_brownian_moments():
    grid = sv.TimeGrid(1.0, 2.0, 200)
    model = sv.affine_model(1, [[0.0]], [0.0], [[1.0]], sv.point_start([0.0]))
    n = 20000
    ens = sv.simulate(model, grid, n, seed=42)
    final = ens.values[:, -1, 0]
    assert abs(final.mean()) <= 3.0 / np.sqrt(n)
    increment = ens.values[:, -1, 0] - ens.values[:, 0, 0]
    assert increment.var() == pytest.approx(1.0, rel=0.05)


def test_point_start_variance_growth():
    grid = sv.TimeGrid(1.0, 2.0, 100)
    sigma = 0.7
    model = sv.affine_model(1, [[0.0]], [0.0], [[sigma]], sv.point_start([0.0]))
    n = 20000
    ens = sv.simulate(model, grid, n, seed=7)
    for t in (1.25, 1.5, 2.0):
        m = grid.index_of(t)
        var = ens.values[:, m, 0].var()
        theory = sigma**2 * (t - 1.0)
        stderr = theory * np.sqrt(2.0 / n)
        assert abs(var - theory) <= 5 * stderr


def test_translation_equivariance_same_seed():
    # constant coefficients: shifting the start commutes with simulation up to
    # floating-point addition order (exact to ~1e-12 at this scale)
    grid = sv.TimeGrid(1.0, 2.0, 100)
    base = sv.affine_model(1, [[0.0]], [0.0], [[1.0]], sv.point_start([0.0]))
    shifted = sv.affine_model(1, [[0.0]], [0.0], [[1.0]], sv.point_start([2.5]))
    a = sv.simulate(base, grid, 50, seed=9)
    b = sv.simulate(shifted, grid, 50, seed=9)
    assert np.abs(b.values - (a.values + 2.5)).max() <= 1e-12


def test_bitwise_reproducibility_and_thread_independence():
    grid = sv.TimeGrid(1.0, 2.0, 50)
    model = sv.affine_model(2, -np.eye(2), np.zeros(2), np.eye(2),
                            sv.gaussian_start(np.zeros(2), 0.5 * np.eye(2)))
    a = sv.simulate(model, grid, 300, seed=5, threads=1, chunk_size=64)
    b = sv.simulate(model, grid, 300, seed=5, threads=4, chunk_size=64)
    c = sv.simulate(model, grid, 300, seed=5, threads=2, chunk_size=64)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.values, c.values)
    d = sv.simulate(model, grid, 300, seed=6, threads=1, chunk_size=64)
    assert not np.array_equal(a.values, d.values)


def test_non_finite_drift_reports_location():
    grid = sv.TimeGrid(0.0, 1.0, 10)

    def bad_drift(t, x):
        out = np.zeros_like(x)
        if t > 0.45:
            out[:] = np.nan
        return out

    model = sv.DiffusionModel(dim=1, drift=bad_drift, initial=sv.point_start([0.0]),
                              dispersion_const=[[0.0]])
    with pytest.raises(SimulationError, match="path"):
        sv.simulate(model, grid, 3, seed=0)


def test_state_dependent_dispersion_runs():
    grid = sv.TimeGrid(0.0, 1.0, 50)
    model = sv.DiffusionModel(
        dim=1,
        drift=lambda t, x: np.zeros_like(x),
        initial=sv.point_start([1.0]),
        dispersion=lambda t, x: (0.1 * np.abs(x))[:, :, None],
    )
    ens = sv.simulate(model, grid, 20, seed=3)
    assert np.all(np.isfinite(ens.values))


def test_csv_export_roundtrip(tmp_path):
    grid = sv.TimeGrid(1.0, 2.0, 4)
    model = sv.affine_model(2, np.zeros((2, 2)), np.zeros(2), np.eye(2),
                            sv.point_start([0.0, 1.0]))
    ens = sv.simulate(model, grid, 3, seed=1)
    path = tmp_path / "ens.csv"
    sv.ensemble_to_csv(ens, path)
    raw = np.loadtxt(path, delimiter=",", skiprows=1)
    assert raw.shape == (3 * 5, 4)
    assert np.array_equal(raw[:, 2:].reshape(3, 5, 2), ens.values)
    header = path.read_text().splitlines()[0]
    assert header == "path,t,x_1,x_2"


def test_binary_roundtrip(tmp_path):
    grid = sv.TimeGrid(1.0, 2.0, 6)
    model = sv.affine_model(1, [[0.0]], [0.0], [[1.0]], sv.point_start([0.0]))
    ens = sv.simulate(model, grid, 4, seed=2)
    path = tmp_path / "ens.bin"
    sv.ensemble_to_binary(ens, path)
    back = sv.ensemble_from_binary(path)
    assert back.grid == ens.grid
    assert back.seed == ens.seed
    assert np.array_equal(back.values, ens.values)


def test_binary_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a dump" + b"\x00" * 64)
    with pytest.raises(InputError, match="magic"):
        sv.ensemble_from_binary(path)


def test_deterministic_ensemble_shapes():
    grid = sv.TimeGrid(0.0, 1.0, 10)
    traj = np.linspace(0, 1, 11)
    ens = sv.deterministic_ensemble(grid, traj, n_paths=3)
    assert ens.values.shape == (3, 11, 1)
    assert np.array_equal(ens.values[0], ens.values[2])
