import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coneglue.constraints import phi
from coneglue.diffops import GridOps
from coneglue.fields import (ScalarField, VectorField, rough_patch,
                             schwarzschild_isotropic)
from coneglue.geometry import ConeSpec, GridParams, WeightParams, build_domain
from coneglue.norms import (EigenIterationError, NormSpec, coarea_check,
                            holder_norm, norm_report, norm_X1, norm_X2,
                            poincare_constant, sobolev_norm)

CONE = ConeSpec((0.0, 0.0, -100.0), np.pi / 6, np.pi / 3)
W = WeightParams(N=12)


def make(nt=24, ntheta=12):
    return build_domain(CONE, GridParams(nt=nt, ntheta=ntheta, r_min=1.0,
                                         r_max=10.0))


GRID = make()
OPS = GridOps(GRID)


def random_scalar(seed, boundary_zero=False):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(4)
    v = (c[0] + c[1] * np.sin(np.log(GRID.r)) + c[2] * np.cos(2 * GRID.thv)
         + c[3] * GRID.phi)
    if boundary_zero:
        v = v * GRID.phi ** 13
    return ScalarField(GRID, v)


# -- Sobolev -------------------------------------------------------------------

def test_sobolev_closed_form_oracle():
    # f = r^{-q}: integrand r^{-n} over the cone -> solid angle * ln(r_max)
    q = 1.3
    f = ScalarField(GRID, GRID.r ** (-q))
    solid = 2 * np.pi * (np.cos(CONE.theta1) - np.cos(CONE.theta2))
    exact = np.sqrt(solid * np.log(10.0))
    got = sobolev_norm(f, NormSpec(k=0, q=q), OPS)
    assert got == pytest.approx(exact, rel=1e-3)


def test_sobolev_first_order_oracle():
    # f = z: |grad f| = 1, both levels in closed form; the r^4 integrand needs
    # a finer radial grid for the quadrature to reach the tolerance
    grid = make(64, 16)
    f = ScalarField(grid, grid.x[:, 2])
    solid = 2 * np.pi * (np.cos(CONE.theta1) - np.cos(CONE.theta2))
    c3 = (np.cos(CONE.theta1) ** 3 - np.cos(CONE.theta2) ** 3) / 3.0
    q = 1.5  # level-0 weight r^{-n+2q} = 1, level-1 weight r^{-n+2(q+1)} = r^2
    lvl0 = 2 * np.pi * c3 * (10.0 ** 5 - 1.0) / 5.0   # int z^2 dv
    lvl1 = solid * (10.0 ** 5 - 1.0) / 5.0            # int |grad z|^2 r^2 dv
    exact = np.sqrt(lvl0 + lvl1)
    got = sobolev_norm(f, NormSpec(k=1, q=q), GridOps(grid))
    assert got == pytest.approx(exact, rel=2e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-8.0, 8.0, allow_nan=False))
def test_sobolev_homogeneity(seed, c):
    f = random_scalar(seed)
    spec = NormSpec(k=1, q=0.75, N=12)
    assert sobolev_norm(c * f, spec, OPS) == pytest.approx(
        abs(c) * sobolev_norm(f, spec, OPS), rel=1e-12, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_sobolev_triangle(sa, sb):
    f, g = random_scalar(sa), random_scalar(sb)
    spec = NormSpec(k=2, q=0.75)
    assert sobolev_norm(f + g, spec, OPS) <= (
        sobolev_norm(f, spec, OPS) + sobolev_norm(g, spec, OPS) + 1e-10)


def test_sobolev_inverse_weight_infinite_flag():
    f = ScalarField(GRID, np.ones(GRID.nnodes))
    val, flags = sobolev_norm(f, NormSpec(k=0, q=0.75, N=12, inverse=True),
                              OPS, with_flags=True)
    assert np.isinf(val) and flags["infinite"]


def test_sobolev_inverse_weight_finite_for_vanishing_trace():
    f = random_scalar(3, boundary_zero=True)
    val, flags = sobolev_norm(f, NormSpec(k=0, q=0.75, N=12, inverse=True),
                              OPS, with_flags=True)
    assert np.isfinite(val) and val > 0
    assert flags.get("boundary_nodes_skipped", 0) > 0


def test_sobolev_duality_pairing():
    # |int f1 f2 dv| <= ||f1||_{0,-q} ||f2||_{0,-(n-q)} (Cauchy-Schwarz in the
    # shared quadrature; the radial weights cancel exactly)
    q = 0.75
    for seed in range(5):
        f1, f2 = random_scalar(seed), random_scalar(seed + 100)
        pair = abs(np.sum(GRID.quadweight * f1.values * f2.values))
        bound = (sobolev_norm(f1, NormSpec(0, q), OPS)
                 * sobolev_norm(f2, NormSpec(0, GRID.n - q), OPS))
        assert pair <= bound * (1 + 1e-12)


# -- Holder --------------------------------------------------------------------

def test_holder_constant_field():
    f = ScalarField(GRID, np.full(GRID.nnodes, 2.5))
    assert holder_norm(f, 0, 0.5, 0.0, 0.0, OPS, samples=0) == pytest.approx(2.5)


def test_holder_weight_cancellation():
    # sup part of r^l phi^m under weight r^{-l} phi^{-m} is exactly 1
    l, m = -1.25, 3.0
    f = ScalarField(GRID, GRID.r ** l * GRID.phi ** m)
    assert holder_norm(f, 0, 0.5, l, m, OPS, samples=0) == pytest.approx(1.0)


def test_holder_homogeneity_and_coefficient_term():
    f = random_scalar(7)
    a = holder_norm(f, 1, 0.5, 0.0, 0.0, OPS, samples=8, seed=1)
    b = holder_norm(3.0 * f, 1, 0.5, 0.0, 0.0, OPS, samples=8, seed=1)
    assert b == pytest.approx(3.0 * a, rel=1e-12)
    # the sampled coefficient term only adds
    assert a >= holder_norm(f, 1, 0.5, 0.0, 0.0, OPS, samples=0)


def test_holder_infinite_flag():
    f = ScalarField(GRID, np.ones(GRID.nnodes))
    val, flags = holder_norm(f, 0, 0.5, 0.0, 2.0, OPS, with_flags=True)
    assert np.isinf(val) and flags["infinite"]


# -- composite norms -----------------------------------------------------------

def test_norm_x1_zero_and_triangle():
    z = ScalarField(GRID, np.zeros(GRID.nnodes))
    zv = VectorField(GRID, np.zeros((GRID.nnodes, 3)), "con")
    assert norm_X1(z, zv, W, OPS) == 0.0
    f1, f2 = random_scalar(1, True), random_scalar(2, True)
    v1 = VectorField(GRID, np.stack([f.values for f in
                                     (random_scalar(4, True),
                                      random_scalar(5, True),
                                      random_scalar(6, True))], 1), "con")
    zero = VectorField(GRID, np.zeros((GRID.nnodes, 3)), "con")
    lhs = norm_X1(f1 + f2, v1, W, OPS)
    rhs = norm_X1(f1, v1, W, OPS) + norm_X1(f2, zero, W, OPS)
    assert lhs <= rhs + 1e-10


def test_norm_x2_zero_and_finite():
    from coneglue.fields import CovSymTensorField, ConSymTensorField
    zh = CovSymTensorField(GRID, np.zeros((GRID.nnodes, 3, 3)))
    zw = ConSymTensorField(GRID, np.zeros((GRID.nnodes, 3, 3)), "con")
    assert norm_X2(zh, zw, W, OPS) == 0.0
    bump = (GRID.phi ** 13 * np.exp(-((GRID.r - 4) / 2) ** 2))
    h = CovSymTensorField(GRID, bump[:, None, None] * np.eye(3))
    val, flags = norm_X2(h, zw, W, OPS, with_flags=True)
    assert np.isfinite(val) and val > 0 and not flags.get("infinite")


def test_norm_x1_rough_patch_residual_finite():
    # the cutoff interpolation is flat near Sigma_2 and equals the (vacuum)
    # data near Sigma_1, so the residual is supported in the transition band
    # and the rho^{-1} norms are finite
    grid = make(32, 16)   # the cutoff transition needs this angular resolution
    ops = GridOps(grid)
    data = schwarzschild_isotropic(grid, m=0.5)
    patch = rough_patch(data, W)
    res = phi(patch.g, patch.pi, ops)
    val, flags = norm_X1(res.f, res.V, W, ops, with_flags=True)
    assert np.isfinite(val) and val > 0
    assert not flags.get("infinite")


def test_norm_report_json():
    rec = json.loads(norm_report("sobolev", {"k": 0, "q": 0.75}, 1.25,
                                 {"infinite": False}))
    assert rec["schema"] == "coneglue-norm-1"
    assert rec["norm_name"] == "sobolev"
    assert rec["value"] == 1.25
    assert rec["params"]["q"] == 0.75


# -- coarea --------------------------------------------------------------------

def test_coarea_zero():
    z = ScalarField(GRID, np.zeros(GRID.nnodes))
    lhs, rhs, mis = coarea_check(z, W, OPS)
    assert lhs == 0.0 and rhs == 0.0


def test_coarea_identity_refinement():
    mis = {}
    for nt, nth in ((64, 32), (128, 64)):
        grid = make(nt, nth)
        zeta = ScalarField(grid, 1.0 + np.exp(-((grid.r - 4) / 2) ** 2)
                           * np.sin(grid.thv))
        _, _, mis[nt] = coarea_check(zeta, W, GridOps(grid))
    assert mis[64] <= 0.01
    assert mis[128] < mis[64]


# -- Poincare constants --------------------------------------------------------

MODES = ["gradient", "hessian", "lichnerowicz", "killing", "lie_weighted"]


@pytest.mark.parametrize("mode", MODES)
def test_poincare_positive_and_stable(mode):
    vals = []
    for nt, nth in ((16, 8), (24, 12)):
        grid = make(nt, nth)
        c = poincare_constant(grid, 0.75, mode, W, GridOps(grid), rho_N=2)
        assert np.isfinite(c) and c > 0
        vals.append(c)
    assert abs(vals[1] / vals[0] - 1.0) < 0.2


def test_poincare_gradient_dense_oracle():
    # tiny grid, dense solve frozen against an independent dense eigensolve
    import scipy.linalg
    from coneglue.norms import _mode_forms
    grid = make(10, 6)
    ops = GridOps(grid)
    A, B, kern = _mode_forms(grid, 0.75, "gradient", W, ops)
    C = scipy.linalg.null_space(kern.T @ B.toarray())
    lams = scipy.linalg.eigh(C.T @ A.toarray() @ C, C.T @ B.toarray() @ C,
                             eigvals_only=True)
    expect = 1.0 / np.sqrt(lams[lams > 1e-5 * lams[-1]][0])
    got = poincare_constant(grid, 0.75, "gradient", W, ops, dense=True)
    assert got == pytest.approx(expect, rel=1e-8)


def test_poincare_dense_vs_iterative():
    grid = make(48, 24)          # 1152 nodes -> vector dofs take lobpcg path
    ops = GridOps(grid)
    it = poincare_constant(grid, 0.75, "killing", W, ops)
    dn = poincare_constant(grid, 0.75, "killing", W, ops, dense=True)
    assert it == pytest.approx(dn, rel=2e-2)


def test_poincare_zero_outer_variant():
    c_free = poincare_constant(GRID, 0.75, "gradient", W, OPS)
    c_dir = poincare_constant(GRID, 0.75, "gradient", W, OPS, zero_outer=True)
    assert np.isfinite(c_dir) and c_dir > 0
    # Dirichlet restriction shrinks the trial space
    assert c_dir <= c_free * (1 + 1e-8)


def test_poincare_unknown_mode():
    with pytest.raises(ValueError):
        poincare_constant(GRID, 0.75, "bogus", W, OPS)
