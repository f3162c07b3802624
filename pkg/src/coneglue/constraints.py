"""Constraint map Phi = (Hamiltonian, momentum), its linearization dPhi,
the formal adjoint dPhi*, the time-symmetric adjoint L*, the Killing
operator, and the quadratic remainder Q.

dPhi is obtained by forward-mode differentiation of the exact discrete
pipeline for Phi, so all lower-order couplings (pi*pi*h etc.) come out of
the product rule rather than a hand transcription, and the assembled
sparse matrix is the exact Frechet derivative of the discrete Phi.
dPhi* is the transpose of that matrix with respect to the quadrature
inner products; a closed-formula flat-background version is kept as an
independent cross-check.

The quadratic remainder is provided both by subtraction (exact by
definition) and by direct assembly of the second-order difference
formulas (Ricci difference through the D-tensor, the t-integral T-term
evaluated by Gauss-Legendre quadrature, and the explicit trace/norm
polynomials), cross-validating one another.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .diffops import GridOps
from .fields import (ConSymTensorField, CovSymTensorField, FieldError,
                     ScalarField, VectorField)
from .lintensor import LT, lt_einsum, lt_grad, lt_grad_map, lt_inv, lt_map


@dataclass
class ConstraintResidual:
    """Value of the constraint map: scalar slot f, vector slot V."""
    f: ScalarField
    V: VectorField

    @property
    def grid(self):
        return self.f.grid

    def as_vector(self):
        return np.concatenate([self.f.values, self.V.comps.ravel()])

    @classmethod
    def from_vector(cls, grid, y):
        N, n = grid.nnodes, grid.n
        return cls(ScalarField(grid, y[:N]),
                   VectorField(grid, y[N:].reshape(N, n), "con"))

    def __add__(self, other):
        return ConstraintResidual(self.f + other.f, self.V + other.V)

    def __sub__(self, other):
        return ConstraintResidual(self.f - other.f, self.V - other.V)

    def __mul__(self, c):
        return ConstraintResidual(self.f * c, self.V * c)

    __rmul__ = __mul__


@dataclass
class Deformation:
    """Metric/momentum deformation pair (h covariant, w contravariant)."""
    h: CovSymTensorField
    w: ConSymTensorField

    @property
    def grid(self):
        return self.h.grid

    def __add__(self, other):
        return Deformation(self.h + other.h, self.w + other.w)

    def __mul__(self, c):
        return Deformation(self.h * c, self.w * c)

    __rmul__ = __mul__


# -- symmetric dof bookkeeping ------------------------------------------------

def sym_pairs(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


def sym_basis(n):
    """(B, mult): B maps unique upper-triangle dofs to full n*n components
    (both symmetric slots get the dof value); mult is the inner-product
    multiplicity of each dof (1 diagonal, 2 off-diagonal)."""
    pairs = sym_pairs(n)
    nu = len(pairs)
    B = np.zeros((n * n, nu))
    mult = np.zeros(nu)
    for p, (i, j) in enumerate(pairs):
        B[i * n + j, p] = 1.0
        B[j * n + i, p] = 1.0
        mult[p] = 1.0 if i == j else 2.0
    return B, mult


def pack_sym(comps):
    """(N, n, n) symmetric components -> (N*nu,) unique dofs, node-major."""
    n = comps.shape[-1]
    idx = sym_pairs(n)
    return np.stack([comps[:, i, j] for (i, j) in idx], axis=1).ravel()


def expansion_matrices(grid):
    """(E_h, E_w, g1diag): sparse maps from the stacked dof vector
    x = [h dofs; w dofs] to full tensor components, and the diagonal of the
    dof-space quadrature Gram (quadweight times symmetric multiplicity)."""
    n, N = grid.n, grid.nnodes
    B, mult = sym_basis(n)
    nu = B.shape[1]
    E = sp.kron(sp.identity(N, format="csr"), sp.csr_matrix(B), format="csr")
    Z = sp.csr_matrix((N * n * n, N * nu))
    E_h = sp.hstack([E, Z], format="csr")
    E_w = sp.hstack([Z, E], format="csr")
    g1 = np.outer(grid.quadweight, mult).ravel()
    return E_h, E_w, np.concatenate([g1, g1])


def residual_gram_diag(grid):
    """Quadrature Gram diagonal on residual vectors [f; V]."""
    return np.concatenate([grid.quadweight, np.repeat(grid.quadweight, grid.n)])


# -- the Phi pipeline ---------------------------------------------------------

def _pipeline(gLT, piLT, ops):
    """Shared forward pass: metric -> Christoffel -> Ricci -> R -> (H, DivPi).

    Works for plain values (jac None) and for any Jacobian seeding of the
    inputs; returns the intermediate LTs for reuse.
    """
    n = ops.n
    ginv = lt_inv(gLT)
    dg = lt_grad(gLT, ops)                       # dg[n,i,j,c] = d_c g_ij
    t1 = lt_einsum("kl,lij->kij", ginv, dg)      # g^{kl} g_{li,j}
    t2 = lt_einsum("kl,lji->kij", ginv, dg)      # g^{kl} g_{lj,i}
    t3 = lt_einsum("kl,ijl->kij", ginv, dg)      # g^{kl} g_{ij,l}
    Gam = 0.5 * (t1 + t2 - t3)
    trGam = lt_map("kki->i", Gam)                # Gamma^k_{ki}
    r1 = lt_grad_map("kijk->ij", Gam, ops)       # d_k Gamma^k_ij
    r2 = lt_grad_map("kikj->ij", Gam, ops)       # d_j Gamma^k_ik
    q1 = lt_einsum("m,mij->ij", trGam, Gam)
    q2 = lt_einsum("kjm,mik->ij", Gam, Gam)
    Ric = r1 - r2 + q1 - q2
    R = lt_einsum("ij,ij->", ginv, Ric)
    trpi = lt_einsum("ij,ij->", gLT, piLT)       # Tr_g pi = g_ij pi^ij
    A = lt_einsum("ai,ij->aj", gLT, piLT)        # g_{ai} pi^{ij}
    normsq = lt_einsum("aj,ja->", A, A)          # |pi|^2_g
    H = R + (1.0 / (n - 1)) * lt_einsum(",->", trpi, trpi) - normsq
    d1 = lt_grad_map("ili->l", piLT, ops)        # d_i pi^{il}
    d2 = lt_einsum("k,kl->l", trGam, piLT)
    d3 = lt_einsum("lik,ki->l", Gam, piLT)
    Div = d1 + d2 + d3
    return {"ginv": ginv, "dg": dg, "Gam": Gam, "Ric": Ric, "R": R,
            "H": H, "Div": Div}


def _check_metric(g):
    if np.any(np.linalg.det(g.comps) <= 0) or not np.all(np.isfinite(g.comps)):
        raise FieldError("metric is singular or non-finite")


def christoffel(g, ops=None):
    """Gamma^k_{ij} of g as a raw (N, n, n, n) array."""
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    return _pipeline(LT(g.comps), _zero_pi(g), ops)["Gam"].val


def ricci(g, ops=None):
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    return CovSymTensorField(g.grid, _pipeline(LT(g.comps), _zero_pi(g), ops)["Ric"].val)


def scalar_curv(g, ops=None):
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    return ScalarField(g.grid, _pipeline(LT(g.comps), _zero_pi(g), ops)["R"].val)


def _zero_pi(g):
    return LT(np.zeros_like(g.comps))


def hamiltonian(g, pi, ops=None):
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    return ScalarField(g.grid, _pipeline(LT(g.comps), LT(pi.comps), ops)["H"].val)


def momentum_constraint(g, pi, ops=None):
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    return VectorField(g.grid, _pipeline(LT(g.comps), LT(pi.comps), ops)["Div"].val, "con")


def phi(g, pi, ops=None):
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    out = _pipeline(LT(g.comps), LT(pi.comps), ops)
    return ConstraintResidual(ScalarField(g.grid, out["H"].val),
                              VectorField(g.grid, out["Div"].val, "con"))


# -- linearization and adjoint ------------------------------------------------

class DPhi:
    """Linearization of Phi at (g, pi).

    Call with a deformation for the directional derivative (single-column
    forward mode, O(N)); ``matrix()`` assembles the full sparse Jacobian
    with respect to the unique-component dof vector.
    """

    def __init__(self, g, pi, ops=None):
        _check_metric(g)
        self.g = g
        self.pi = pi
        self.grid = g.grid
        self.ops = ops or GridOps(g.grid)
        self._M = None

    def __call__(self, h, w):
        gj = sp.csr_matrix(h.comps.reshape(-1, 1))
        pj = sp.csr_matrix(w.comps.reshape(-1, 1))
        out = _pipeline(LT(self.g.comps, gj), LT(self.pi.comps, pj), self.ops)
        grid = self.grid
        f = out["H"].jac.toarray().ravel()
        V = out["Div"].jac.toarray().reshape(grid.nnodes, grid.n)
        return ConstraintResidual(ScalarField(grid, f), VectorField(grid, V, "con"))

    def matrix(self):
        """Sparse dPhi as a map dofs -> residual vector [f; V]."""
        if self._M is None:
            E_h, E_w, _ = expansion_matrices(self.grid)
            out = _pipeline(LT(self.g.comps, E_h), LT(self.pi.comps, E_w), self.ops)
            self._M = sp.vstack([out["H"].jac, out["Div"].jac], format="csr")
        return self._M

    def pack(self, h, w):
        return np.concatenate([pack_sym(h.comps), pack_sym(w.comps)])

    def apply_vector(self, x):
        return self.matrix() @ x


def d_phi(g, pi, ops=None):
    return DPhi(g, pi, ops)


class DPhiStar:
    """Adjoint of the assembled dPhi with respect to the quadrature inner
    products on both sides (exact transpose; the normal operator built on it
    is symmetric positive semidefinite by construction)."""

    def __init__(self, g, pi, ops=None):
        self.dphi = g if isinstance(g, DPhi) else DPhi(g, pi, ops)
        grid = self.dphi.grid
        self.grid = grid
        _, _, self.g1 = expansion_matrices(grid)
        self.g2 = residual_gram_diag(grid)

    def __call__(self, u, Z):
        grid = self.grid
        y = np.concatenate([u.values, Z.comps.ravel()])
        x = (self.dphi.matrix().T @ (self.g2 * y)) / self.g1
        n = grid.n
        B, _ = sym_basis(n)
        half = x.size // 2
        hc = (x[:half].reshape(grid.nnodes, -1) @ B.T).reshape(grid.nnodes, n, n)
        wc = (x[half:].reshape(grid.nnodes, -1) @ B.T).reshape(grid.nnodes, n, n)
        return (CovSymTensorField(grid, hc), ConSymTensorField(grid, wc, "con"))


def d_phi_star(g, pi, ops=None):
    return DPhiStar(g, pi, ops)


def d_phi_star_flat_formula(u, Z, pi, ops=None):
    """Closed-formula formal adjoint at the flat background (g = delta,
    arbitrary pi): independent cross-check of the transpose route.

    First slot: -(Lap u) delta + Hess u + (2 tau u/(n-1)) pi - 2u (pi pi)
                - sym_ij d_k(Z_i pi^{kj}) + 1/2 d_l(pi^{ij} Z^l)
                - 1/2 d_k(Z_l pi^{kl}) delta.
    Second slot: -1/2 (d_i Z_j + d_j Z_i) + (2 tau u/(n-1)) delta - 2u pi.
    """
    grid = u.grid
    ops = ops or GridOps(grid)
    n = grid.n
    uv = u.values
    p = pi.comps
    du = ops.grad(uv, 0)
    Hu = ops.grad(du, 1)
    lap = np.einsum("naa->n", Hu)
    tau = np.einsum("naa->n", p)
    pipi = np.einsum("nik,nkj->nij", p, p)
    eye = np.eye(n)
    slot1 = (-lap[:, None, None] * eye + Hu
             + (2.0 / (n - 1)) * (tau * uv)[:, None, None] * p
             - 2.0 * uv[:, None, None] * pipi)
    Zpi = np.einsum("ni,nkj->nikj", Z.comps, p)          # Z_i pi^{kj}
    dZpi = ops.grad(Zpi, 3)                              # d_c (Z_i pi^{kj})
    term = np.einsum("nikjk->nij", dZpi)                 # d_k(Z_i pi^{kj})
    slot1 -= 0.5 * (term + np.swapaxes(term, 1, 2))
    piZ = np.einsum("nij,nl->nijl", p, Z.comps)
    slot1 += 0.5 * np.einsum("nijll->nij", ops.grad(piZ, 3))
    dk_zpi = np.einsum("nlklk->n", dZpi)                 # d_k(Z_l pi^{kl})
    slot1 -= 0.5 * dk_zpi[:, None, None] * eye
    dZ = ops.grad(Z.comps, 1)                            # d_c Z_j -> (n, j, c)
    slot2 = (-0.5 * (dZ + np.swapaxes(dZ, 1, 2))
             + (2.0 / (n - 1)) * (tau * uv)[:, None, None] * eye
             - 2.0 * uv[:, None, None] * p)
    return (CovSymTensorField(grid, slot1), ConSymTensorField(grid, slot2, "con"))


def lichnerowicz_adjoint(g, u, ops=None):
    """L*_g u = -(Lap_g u) g + Hess_g u - u Ric_g."""
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    out = _pipeline(LT(g.comps), _zero_pi(g), ops)
    Gam, Ric, ginv = out["Gam"].val, out["Ric"].val, out["ginv"].val
    du = ops.grad(u.values, 0)
    Hess = ops.grad(du, 1) - np.einsum("nkij,nk->nij", Gam, du)
    lap = np.einsum("nij,nij->n", ginv, Hess)
    comps = -lap[:, None, None] * g.comps + Hess - u.values[:, None, None] * Ric
    return CovSymTensorField(g.grid, comps)


def killing_operator(g, Y, ops=None):
    """D(Y)_ij = nabla_i Y_j + nabla_j Y_i (indices lowered with g) = L_Y g."""
    _check_metric(g)
    ops = ops or GridOps(g.grid)
    Gam = _pipeline(LT(g.comps), _zero_pi(g), ops)["Gam"].val
    Ylow = np.einsum("nij,nj->ni", g.comps, Y.comps)
    dY = ops.grad(Ylow, 1)                               # d_c Y_j -> (n, j, c)
    covY = np.swapaxes(dY, 1, 2) - np.einsum("nkij,nk->nij", Gam, Ylow)
    return CovSymTensorField(g.grid, covY + np.swapaxes(covY, 1, 2))


# -- quadratic remainder ------------------------------------------------------

def quadratic_remainder_exact(g, pi, h, w, ops=None):
    """Q = Phi(g+h, pi+w) - Phi(g, pi) - dPhi[h, w], by subtraction."""
    ops = ops or GridOps(g.grid)
    gbar = CovSymTensorField(g.grid, g.comps + h.comps)
    _check_metric(gbar)
    pibar = ConSymTensorField(g.grid, pi.comps + w.comps, "con")
    full = phi(gbar, pibar, ops)
    base = phi(g, pi, ops)
    lin = DPhi(g, pi, ops)(h, w)
    return full - base - lin


def _inv_pair_integral(g, h, rtol=1e-10):
    """I^{ikjl} = int_0^1 g_t^{ik} g_t^{jl} dt with g_t = g + t h, by
    Gauss-Legendre quadrature; the point count doubles until successive
    levels agree to rtol (4 points suffice for small h)."""
    def gl(npts):
        x, wq = np.polynomial.legendre.leggauss(npts)
        t = 0.5 * (x + 1.0)
        wq = 0.5 * wq
        out = 0.0
        for tq, wq_ in zip(t, wq):
            inv = np.linalg.inv(g + tq * h)
            out = out + wq_ * np.einsum("nik,njl->nikjl", inv, inv)
        return out
    prev = gl(4)
    for npts in (8, 16, 32, 64):
        cur = gl(npts)
        if np.max(np.abs(cur - prev)) <= rtol * max(np.max(np.abs(cur)), 1.0):
            return cur
        prev = cur
    return prev


def _cov1(T, Gam, ops, up=0):
    """Covariant derivative of a tensor with `up` leading contravariant slots
    followed by covariant slots; derivative index appended last."""
    rank = T.ndim - 1
    out = ops.grad(T, rank)
    letters = "ijklm"[:rank]
    for s in range(rank):
        rest = letters.replace(letters[s], "m")
        if s < up:
            out = out + np.einsum(f"n{letters[s]}cm,n{rest}->n{letters}c", Gam, T)
        else:
            out = out - np.einsum(f"nmc{letters[s]},n{rest}->n{letters}c", Gam, T)
    return out


def quadratic_remainder_formula(g, pi, h, w, ops=None):
    """Q assembled from the closed second-order difference formulas.

    Scalar slot: the Ricci difference through the D-tensor
    D^k_ij = (1/2) gbar^{kl} (h_{il;j} + h_{jl;i} - h_{ij;l}) minus the
    linear part L(h), the t-integral T-term for the inverse-metric
    difference, and the explicit trace/norm polynomials.  Vector slot:
    D-terms contracted with pi + w minus the linearized Christoffel terms.
    The quadratic first-derivative polynomial q(gbar, h) is generated from
    the Ricci-difference expansion itself rather than expanded by hand.
    """
    grid = g.grid
    ops = ops or GridOps(grid)
    n = grid.n
    gv, pv, hv, wv = g.comps, pi.comps, h.comps, w.comps
    _check_metric(CovSymTensorField(grid, gv + hv))
    base = _pipeline(LT(gv), LT(pv), ops)
    Gam, Ric, ginv = base["Gam"].val, base["Ric"].val, base["ginv"].val

    # covariant derivatives of h with respect to g
    H1 = _cov1(hv, Gam, ops)                              # h_{ij;c}
    H2 = _cov1(H1, Gam, ops)                              # h_{ij;c;d}
    S = (np.einsum("nilj->nlij", H1) + np.einsum("njli->nlij", H1)
         - np.einsum("nijl->nlij", H1))                   # S_{lij}
    Ipair = _inv_pair_integral(gv, hv)                    # int g_t x g_t dt
    ginv_diff = -np.einsum("nikjl,nkl->nij", Ipair, hv)   # gbar^{ij} - g^{ij}
    gbar_inv = ginv + ginv_diff
    D = 0.5 * np.einsum("nkl,nlij->nkij", gbar_inv, S)
    dGamh = 0.5 * np.einsum("nkl,nlij->nkij", ginv, S)    # linearized Christoffel

    # Ricci difference from the D-expansion
    DD = _cov1(D, Gam, ops, up=1)                         # D^k_{ij;d}
    Dtr = np.einsum("nkki->ni", D)                        # D^k_{ki}
    dRic = (np.einsum("nkijk->nij", DD) - _cov1(Dtr, Gam, ops)
            + np.einsum("nl,nlij->nij", Dtr, D)
            - np.einsum("nkjl,nlki->nij", D, D))
    # linear part L(h) of the scalar-curvature difference
    Lh = (np.einsum("nij,nkl,niljk->n", ginv, ginv, H2)
          - np.einsum("nij,nkl,nklij->n", ginv, ginv, H2)
          - np.einsum("nik,njl,nkl,nij->n", ginv, ginv, hv, Ric))
    Q_R = (np.einsum("nij,nij->n", gbar_inv, dRic)
           + np.einsum("nij,nij->n", ginv_diff, Ric) - Lh)

    # trace polynomial: remainder of (Tr pi)^2
    tau = np.einsum("nij,nij->n", gv, pv)
    gw = np.einsum("nij,nij->n", gv, wv)
    hp = np.einsum("nij,nij->n", hv, pv)
    hw = np.einsum("nij,nij->n", hv, wv)
    dtau = gw + hp + hw
    Q_tr = 2.0 * tau * hw + dtau * dtau

    # norm polynomial: remainder of |pi|^2
    cross = (np.einsum("nik,njl->nikjl", pv, wv)
             + np.einsum("njl,nik->nikjl", pv, wv)
             + np.einsum("nik,njl->nikjl", wv, wv))
    gh = (np.einsum("nij,nkl->nijkl", gv, hv)
          + np.einsum("nkl,nij->nijkl", gv, hv)
          + np.einsum("nij,nkl->nijkl", hv, hv))
    Q_nm = (np.einsum("nik,njl,nij,nkl->n", pv, pv, hv, hv)
            + np.einsum("nik,njl,nij,nkl->n", wv, wv, gv, gv)
            + np.einsum("nikjl,nijkl->n", cross, gh))

    Q1 = Q_R + Q_tr / (n - 1.0) - Q_nm

    # momentum slot: D-terms against pi + w minus their linear part
    piw = pv + wv
    Q2 = (np.einsum("niik,nkl->nl", D, piw)
          + np.einsum("nlik,nki->nl", D, piw)
          - np.einsum("niik,nkl->nl", dGamh, pv)
          - np.einsum("nlik,nki->nl", dGamh, pv))

    return ConstraintResidual(ScalarField(grid, Q1),
                              VectorField(grid, Q2, "con"))
