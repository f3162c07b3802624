import numpy as np
import pytest

from coneglue.diffops import GridOps
from coneglue.fields import (ConSymTensorField, CovSymTensorField, FieldError,
                             InitialData, ScalarField, SymTensorField,
                             VectorField, conformal_manufactured,
                             fd_derivative, flat_data, is_positive_definite,
                             jets, k_from_momentum, load_field,
                             momentum_from_k, rough_patch, save_field,
                             schwarzschild_isotropic)
from coneglue.geometry import ConeSpec, GridParams, WeightParams, build_domain

CONE = ConeSpec((0.0, 0.0, -100.0), np.pi / 6, np.pi / 3)


def make_grid(nt=24, ntheta=12, r_max=10.0):
    return build_domain(CONE, GridParams(nt=nt, ntheta=ntheta, r_min=1.0,
                                         r_max=r_max))


def curved(grid, seed=11):
    rng = np.random.default_rng(seed)
    bump = np.exp(-((grid.r - 4) / 2) ** 2)
    g = CovSymTensorField(grid, np.eye(3)
                          + 0.2 * bump[:, None, None] * rng.standard_normal((3, 3)))
    k = CovSymTensorField(grid, 0.3 * bump[:, None, None] * rng.standard_normal((3, 3)))
    return g, k


def test_shape_validation():
    grid = make_grid(12, 8)
    with pytest.raises(FieldError):
        ScalarField(grid, np.zeros((grid.nnodes, 3)))
    with pytest.raises(FieldError):
        SymTensorField(grid, np.zeros((grid.nnodes, 3)))


def test_symmetrization_at_construction():
    grid = make_grid(12, 8)
    A = np.zeros((grid.nnodes, 3, 3))
    A[:, 0, 1] = 1.0
    T = SymTensorField(grid, A)
    assert np.allclose(T.comps[:, 0, 1], 0.5)
    assert np.allclose(T.comps[:, 1, 0], 0.5)


def test_momentum_roundtrip():
    grid = make_grid()
    g, k = curved(grid)
    pi = momentum_from_k(g, k)
    k2 = k_from_momentum(g, pi)
    assert np.abs(k2.comps - k.comps).max() < 1e-12
    # trace relation Tr_g pi = (1-n) Tr_g k
    ginv = np.linalg.inv(g.comps)
    trk = np.einsum("nab,nab->n", ginv, k.comps)
    trpi = np.einsum("nab,nab->n", g.comps, pi.comps)
    assert np.abs(trpi - (1 - 3) * trk).max() < 1e-12


def test_initial_data_exactly_one_momentum():
    grid = make_grid(12, 8)
    g, k = curved(grid)
    with pytest.raises(FieldError):
        InitialData(g)
    with pytest.raises(FieldError):
        InitialData(g, k=k, pi=momentum_from_k(g, k))


def test_fitted_decay_synthetic():
    # manufactured deviation ~ r^{-1} in the vertex chart
    grid = make_grid(32, 12, r_max=100.0)
    dev = (1.0 / grid.r)[:, None, None] * np.diag([1.0, 0.5, 0.25])
    g = CovSymTensorField(grid, np.eye(3) + 0.01 * dev)
    data = InitialData(g, pi=ConSymTensorField(
        grid, np.zeros((grid.nnodes, 3, 3)), "con"), p_decay=1.0)
    assert data.fitted_decay() == pytest.approx(1.0, abs=0.05)


def test_flat_data_trivial():
    grid = make_grid(12, 8)
    fd = flat_data(grid)
    assert np.allclose(fd.g.comps, np.eye(3))
    assert np.abs(fd.pi.comps).max() == 0.0
    assert np.abs(fd.k.comps).max() == 0.0


def test_schwarzschild_singularity_guard():
    grid = make_grid(12, 8)
    # body at |a| = 100, grid nodes ~ 95..105 from the body; m/2 must exceed
    # the closest node distance to trigger the coordinate-singularity guard
    with pytest.raises(FieldError):
        schwarzschild_isotropic(grid, m=250.0)


def test_conformal_manufactured_flat():
    grid = make_grid(12, 8)
    u = ScalarField(grid, np.ones(grid.nnodes))
    lap = ScalarField(grid, np.zeros(grid.nnodes))
    g, R = conformal_manufactured(u, lap, 3)
    assert np.allclose(g.comps, np.eye(3))
    assert np.abs(R.values).max() == 0.0
    with pytest.raises(FieldError):
        conformal_manufactured(ScalarField(grid, -u.values), lap, 3)


def test_fd_derivative_polynomials():
    grid = make_grid()
    ops = GridOps(grid)
    f = ScalarField(grid, grid.x[:, 2] ** 2)
    assert np.abs(fd_derivative(f, (2, 2), ops) - 2.0).max() < 1e-10
    assert np.abs(fd_derivative(f, (0,), ops)).max() < 1e-10
    v = VectorField(grid, np.stack([np.zeros(grid.nnodes), grid.x[:, 0],
                                    np.zeros(grid.nnodes)], 1), "con")
    d = fd_derivative(v, (0,), ops)      # d_1 of the rotation field
    assert np.abs(d[:, 1] - 1.0).max() < 1e-10
    with pytest.raises(FieldError):
        fd_derivative(f, (0, 0, 0), ops)


def test_jets_contains_derivatives():
    grid = make_grid(12, 8)
    f = ScalarField(grid, grid.x[:, 2])
    J = jets(f)
    assert np.allclose(J.d1[:, 2], 1.0, atol=1e-11)
    assert np.abs(J.d2).max() < 1e-9


def test_rough_patch_interpolation():
    grid = make_grid()
    w = WeightParams(N=12)
    data = schwarzschild_isotropic(grid, m=0.5)
    patch = rough_patch(data, w)
    # chi = 1 at Sigma_1 (theta = theta1), chi = 0 at Sigma_2
    on_s1 = np.abs(grid.thv - CONE.theta1) < 1e-12
    on_s2 = np.abs(grid.thv - CONE.theta2) < 1e-12
    assert np.abs(patch.g.comps[on_s1] - data.g.comps[on_s1]).max() < 1e-12
    assert np.abs(patch.g.comps[on_s2] - np.eye(3)).max() < 1e-12
    assert is_positive_definite(patch.g)
    assert patch.p_decay == data.p_decay


def test_rough_patch_positivity_guard():
    grid = make_grid()
    w = WeightParams(N=12)
    g, _ = curved(grid)
    # make the reference wildly non-flat so interpolation loses positivity
    bad = InitialData(CovSymTensorField(grid, 5.0 * g.comps - 6.0 * np.eye(3)),
                      pi=ConSymTensorField(grid, np.zeros((grid.nnodes, 3, 3)),
                                           "con"))
    if is_positive_definite(bad.g):
        pytest.skip("construction unexpectedly positive")
    with pytest.raises(FieldError):
        rough_patch(bad, w)


@pytest.mark.parametrize("binary", [False, True])
def test_snapshot_roundtrip(tmp_path, binary):
    grid = make_grid(12, 8)
    g, k = curved(grid)
    path = tmp_path / ("f.bin" if binary else "f.csv")
    save_field(g, path, binary=binary)
    back = load_field(path, grid)
    tol = 0.0 if binary else 1e-12
    assert np.abs(back.comps - g.comps).max() <= tol
    assert back.variance == "cov"
    s = ScalarField(grid, grid.r)
    save_field(s, path, binary=binary)
    back = load_field(path, grid)
    assert np.abs(back.values - grid.r).max() <= (0.0 if binary else 1e-12)


def test_snapshot_grid_mismatch(tmp_path):
    grid = make_grid(12, 8)
    other = make_grid(16, 8)
    s = ScalarField(grid, grid.r)
    save_field(s, tmp_path / "f.csv")
    with pytest.raises(FieldError):
        load_field(tmp_path / "f.csv", other)
