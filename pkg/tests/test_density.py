import numpy as np
import pytest

import stovar as sv
from stovar.exceptions import EstimationError


def test_brownian_density_closed_form():
    dm = sv.brownian_density(1, 1.0)
    p, gradp, divap, low = sv.density_at(dm, 1.0, np.array([0.0]))
    assert p == pytest.approx(1.0 / np.sqrt(2 * np.pi), rel=1e-12)
    assert gradp == pytest.approx(0.0)
    assert divap == pytest.approx(0.0)
    assert not low


def test_gaussian_gradlog_identity():
    dm = sv.brownian_density(2, 1.5)
    t = 2.0
    x = np.array([[0.4, -1.1], [2.0, 0.3]])
    p, gradp, _, _ = sv.density_at(dm, t, x)
    cov = 1.5**2 * t * np.eye(2)
    expected = -(x @ np.linalg.inv(cov)) * p[:, None]
    assert np.allclose(gradp, expected, rtol=1e-12)


def test_ou_stationary_gradlog():
    # stationary variance sigma^2/(2 omega) = 1/2; grad log p = -2 omega x
    dm = sv.ou_stationary_density(1, 1.0, 1.0)
    p, gradp, divap, _ = sv.density_at(dm, 1.3, np.array([0.5]))
    assert gradp / p == pytest.approx(-1.0, rel=1e-12)
    # constant diffusion matrix: div_a p = a grad p
    assert divap == pytest.approx(gradp, rel=1e-12)


def test_dirac_branch():
    dm = sv.DiracDensityModel(dim=1)
    p, gradp, divap, low = sv.density_at(dm, 1.0, np.array([3.0]))
    assert p == 1.0 and gradp == 0.0 and divap == 0.0 and low is False


def test_gaussian_integrates_to_one():
    dm = sv.brownian_density(1, 1.0)
    xs = np.linspace(-12, 12, 40001)[:, None]
    p, _, _, _ = sv.density_at(dm, 1.7, xs)
    assert np.trapezoid(p, xs[:, 0]) == pytest.approx(1.0, abs=1e-6)


def test_low_density_flagging():
    dm = sv.brownian_density(1, 1.0)
    xs = np.array([[0.0], [9.0]])  # 9 sigma at t=1: below 1e-12 of the peak
    _, _, _, low = sv.density_at(dm, 1.0, xs)
    assert not low[0] and low[1]


@pytest.fixture(scope="module")
def bm_big():
    grid = sv.TimeGrid(1.0, 2.0, 10)
    model = sv.affine_model(1, [[0.0]], [0.0], [[1.0]],
                            sv.gaussian_start([0.0], [[1.0]]))
    return sv.simulate(model, grid, 20000, seed=77)


def test_kde_density_matches_gaussian(bm_big):
    kde = sv.kde_fit(bm_big, 1.0)
    p, _, _, _ = sv.density_at(kde, 1.0, np.array([0.0]))
    assert p == pytest.approx(1.0 / np.sqrt(2 * np.pi), rel=0.05)


def test_kde_rejects_degenerate_samples():
    grid = sv.TimeGrid(1.0, 2.0, 10)
    ens = sv.deterministic_ensemble(grid, np.ones(11), n_paths=200)
    with pytest.raises(EstimationError):
        sv.kde_fit(ens, 1.0)


def test_kde_needs_enough_paths():
    grid = sv.TimeGrid(1.0, 2.0, 10)
    model = sv.affine_model(1, [[0.0]], [0.0], [[1.0]], sv.point_start([0.0]))
    ens = sv.simulate(model, grid, 50, seed=1)
    with pytest.raises(EstimationError):
        sv.kde_fit(ens, 1.5)


def test_kde_gradlog_ou_stationary():
    grid = sv.TimeGrid(1.0, 2.0, 10)
    model = sv.affine_model(1, [[-1.0]], [0.0], [[1.0]],
                            sv.gaussian_start([0.0], [[0.5]]))
    ens = sv.simulate(model, grid, 20000, seed=78)
    kde = sv.kde_fit(ens, 1.0)
    p, gradp, _, _ = sv.density_at(kde, 1.0, np.array([0.5]))
    assert gradp / p == pytest.approx(-1.0, rel=0.10)


def test_kde_gradlog_converges_with_n(bm_big):
    dm = sv.brownian_density(1, 1.0)
    xs = np.linspace(-1.5, 1.5, 21)[:, None]
    t = 2.0
    p_true, grad_true, _, _ = sv.density_at(dm, t, xs)
    errs = {}
    for n in (2000, 20000):
        sub = sv.PathEnsemble(grid=bm_big.grid, values=bm_big.values[:n],
                              seed=bm_big.seed)
        kde = sv.kde_fit(sub, t)
        p, gradp, _, _ = sv.density_at(kde, t, xs)
        errs[n] = np.abs(gradp[:, 0] / p - grad_true[:, 0] / p_true).max()
    assert errs[20000] < errs[2000]


def test_silverman_bandwidth_scale():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5000, 1))
    bw = sv.silverman_bandwidth(x)
    assert bw.shape == (1,)
    assert 0.1 < bw[0] < 0.4
