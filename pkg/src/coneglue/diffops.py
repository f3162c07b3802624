"""Cartesian derivative operators on the axisymmetric cone grid.

Fields live on the meridian half-plane (SO(n-1)-equivariant representation):
any component array on the half-plane extends uniquely to a field on the
solid region by rotation.  In-plane Cartesian derivatives (directions e_1
and e_n) come from 1D stencils in (r, theta) via the exact chain rule;
out-of-plane derivatives are exact algebra -- the rotation-generator action
on components divided by the cylindrical radius.

Stencils are "generalized" finite differences: the radial ones differentiate
{1, r, ..., r^w} exactly on the log-spaced nodes, the angular ones
{1, sin k*theta, cos k*theta}.  Both families are closed under d/dr, d/dtheta,
so compositions stay exact on Cartesian polynomial fields of degree <= 2
(order 2 stencils) everywhere, including one-sided edge rows.
"""

import numpy as np
import scipy.sparse as sp


def _diff_matrix(coords, width, make_basis):
    """Sparse 1D derivative matrix with clamped windows of `width` points.

    make_basis(h) returns (funcs, dfuncs) in the window-local variable
    u = x - x_center, normalized so that A is well conditioned; exactness of
    the stencil on span{funcs} is what matters, and the span is chosen
    shift-invariant so it equals the intended global function space.
    """
    m = coords.size
    if m < width:
        raise ValueError("resolution too low for stencil width %d" % width)
    rows, cols, data = [], [], []
    half = width // 2
    for i in range(m):
        j0 = min(max(i - half, 0), m - width)
        u = coords[j0:j0 + width] - coords[i]
        h = np.max(np.abs(u))
        funcs, dfuncs = make_basis(h)
        A = np.array([[f(x) for x in u] for f in funcs])
        rhs = np.array([df(0.0) for df in dfuncs])
        w = np.linalg.solve(A, rhs)
        # one step of iterative refinement
        w = w + np.linalg.solve(A, rhs - A @ w)
        rows.extend([i] * width)
        cols.extend(range(j0, j0 + width))
        data.extend(w)
    return sp.csr_matrix((data, (rows, cols)), shape=(m, m))


def radial_diff(r_coords, order=2):
    """d/dr on log-spaced radii; exact on polynomials of degree <= order+1.

    One extra point over the minimal stencil so that composed second
    derivatives keep the nominal order at the one-sided edge rows.
    """
    width = order + 2

    def make_basis(h):
        funcs = [(lambda u, k=k, h=h: (u / h) ** k) for k in range(width)]
        dfuncs = [(lambda u, k=k, h=h: k * u ** (k - 1) / h ** k if k > 0 else 0.0)
                  for k in range(width)]
        return funcs, dfuncs

    return _diff_matrix(np.asarray(r_coords, float), width, make_basis)


def _trig_basis(K, h):
    """Triangular recombination of {1, sin ku, cos ku, k<=K} with leading
    orders u^0..u^(2K); shift-invariant span, Vandermonde-friendly."""
    if K == 2:
        funcs = [
            lambda u: 1.0,
            lambda u: np.sin(u) / h,
            lambda u: 2.0 * (1.0 - np.cos(u)) / h ** 2,
            lambda u: (2.0 * np.sin(u) - np.sin(2 * u)) / h ** 3,
            lambda u: 2.0 * (4.0 * (1 - np.cos(u)) - (1 - np.cos(2 * u))) / h ** 4,
        ]
        dfuncs = [
            lambda u: 0.0,
            lambda u: np.cos(u) / h,
            lambda u: 2.0 * np.sin(u) / h ** 2,
            lambda u: (2.0 * np.cos(u) - 2.0 * np.cos(2 * u)) / h ** 3,
            lambda u: 2.0 * (4.0 * np.sin(u) - 2.0 * np.sin(2 * u)) / h ** 4,
        ]
    elif K == 3:
        funcs = [
            lambda u: 1.0,
            lambda u: np.sin(u) / h,
            lambda u: 2.0 * (1.0 - np.cos(u)) / h ** 2,
            lambda u: (2.0 * np.sin(u) - np.sin(2 * u)) / h ** 3,
            lambda u: 2.0 * (4.0 * (1 - np.cos(u)) - (1 - np.cos(2 * u))) / h ** 4,
            lambda u: (5.0 * np.sin(u) - 4.0 * np.sin(2 * u) + np.sin(3 * u)) / h ** 5,
            lambda u: 2.0 * (15.0 * (1 - np.cos(u)) - 6.0 * (1 - np.cos(2 * u))
                             + (1 - np.cos(3 * u))) / h ** 6,
        ]
        dfuncs = [
            lambda u: 0.0,
            lambda u: np.cos(u) / h,
            lambda u: 2.0 * np.sin(u) / h ** 2,
            lambda u: (2.0 * np.cos(u) - 2.0 * np.cos(2 * u)) / h ** 3,
            lambda u: 2.0 * (4.0 * np.sin(u) - 2.0 * np.sin(2 * u)) / h ** 4,
            lambda u: (5.0 * np.cos(u) - 8.0 * np.cos(2 * u) + 3.0 * np.cos(3 * u)) / h ** 5,
            lambda u: 2.0 * (15.0 * np.sin(u) - 12.0 * np.sin(2 * u)
                             + 3.0 * np.sin(3 * u)) / h ** 6,
        ]
    else:
        raise ValueError("trig stencil only built for harmonics K in {2, 3}")
    return funcs, dfuncs


def angular_diff(theta_coords, K=2):
    """d/dtheta, exact on trig polynomials {1, sin kt, cos kt}, k <= K."""
    width = 2 * K + 1
    return _diff_matrix(np.asarray(theta_coords, float), width,
                        lambda h: _trig_basis(K, h))


class GridOps:
    """Per-grid cache of sparse Cartesian derivative operators.

    Component arrays have node axis first, shape (nnodes, n, n, ...); the
    flattened (C-order) vector is what the sparse matrices act on.
    grad_matrix(rank) maps a rank-k field to its rank-(k+1) gradient with the
    derivative index appended last.
    """

    def __init__(self, grid, order=None):
        self.grid = grid
        self.n = grid.n
        self.order = order if order is not None else grid.params.fd_order
        if self.order not in (2, 4):
            raise ValueError("fd order must be 2 or 4")
        nt, nth = grid.shape
        # effective angular order: at least 2 so quadratic Cartesian fields
        # (harmonic content up to 2*theta) are exact even at fd_order 2
        Dr1 = radial_diff(np.exp(grid.t), self.order)
        Dth1 = angular_diff(grid.theta, K=2 if self.order == 2 else 3)
        Dr = sp.kron(Dr1, sp.identity(nth, format="csr"), format="csr")
        Dth = sp.kron(sp.identity(nt, format="csr"), Dth1, format="csr")
        st, ct = np.sin(grid.thv), np.cos(grid.thv)
        inv_r = 1.0 / grid.r
        # in-plane Cartesian derivatives of node scalars
        self.Dx = sp.diags(st) @ Dr + sp.diags(ct * inv_r) @ Dth
        self.Dz = sp.diags(ct) @ Dr + sp.diags(-st * inv_r) @ Dth
        self.inv_rho = 1.0 / (grid.r * st)  # theta in (0, pi) strictly
        self._grad = {}
        self._gen = {}

    def generator(self, alpha, rank):
        """Rotation-generator rep on rank-k components (plane (e_1, e_{1+alpha}))."""
        key = (alpha, rank)
        if key not in self._gen:
            n = self.n
            J = np.zeros((n, n))
            J[alpha, 0] = 1.0
            J[0, alpha] = -1.0
            S = n ** rank
            G = np.zeros((S, S))
            eye = np.identity(n)
            for slot in range(rank):
                term = np.array(1.0)
                for s in range(rank):
                    term = np.kron(term, J if s == slot else eye)
                G += term.reshape(S, S) if rank > 0 else 0.0
            self._gen[key] = sp.csr_matrix(G) if rank > 0 else sp.csr_matrix((1, 1))
        return self._gen[key]

    def grad_matrix(self, rank):
        """Sparse map: rank-k components (N*n^k) -> rank-(k+1) (N*n^k*n)."""
        if rank in self._grad:
            return self._grad[rank]
        n, N = self.n, self.grid.nnodes
        S = n ** rank
        eyeS = sp.identity(S, format="csr")
        mats = [None] * n
        mats[0] = sp.kron(self.Dx, eyeS, format="csr")
        mats[n - 1] = sp.kron(self.Dz, eyeS, format="csr")
        for alpha in range(1, n - 1):
            G = self.generator(alpha, rank) if rank > 0 else sp.csr_matrix((S, S))
            mats[alpha] = sp.kron(sp.diags(self.inv_rho), G, format="csr")
        # interleave: out flat index = (node*S + comp)*n + c
        blocks = []
        for c in range(n):
            e = sp.csr_matrix((np.ones(1), (np.array([c]), np.array([0]))),
                              shape=(n, 1))
            blocks.append(sp.kron(mats[c], e, format="csr"))
        M = blocks[0]
        for b in blocks[1:]:
            M = M + b
        self._grad[rank] = M.tocsr()
        return self._grad[rank]

    def grad(self, values, rank):
        """Gradient of a component array, shape (N, [n]*rank) -> (N, [n]*rank, n)."""
        N = self.grid.nnodes
        out = self.grad_matrix(rank) @ np.asarray(values, float).ravel()
        return out.reshape((N,) + (self.n,) * (rank + 1))
