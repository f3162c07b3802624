"""Forward-mode linearization of pointwise tensor algebra + grid derivatives.

An LT carries per-node component values (node axis first) together with a
sparse Jacobian with respect to a chosen input dof vector.  All operations
used by the constraint map are covered: einsum-style products, single-operand
reindex/trace maps, gradients, metric inversion, and linear combinations.
Because every step propagates the exact derivative of the discrete operation,
the assembled Jacobian is the exact Frechet derivative of the discrete
pipeline (no transcription of schematic lower-order terms is involved).
"""

import numpy as np
import scipy.sparse as sp


class LT:
    __slots__ = ("val", "jac")

    def __init__(self, val, jac=None):
        self.val = np.asarray(val, float)
        self.jac = jac

    @property
    def nnodes(self):
        return self.val.shape[0]

    @property
    def cshape(self):
        return self.val.shape[1:]

    def __add__(self, other):
        return LT(self.val + other.val, _jsum(self.jac, other.jac))

    def __sub__(self, other):
        return LT(self.val - other.val, _jsum(self.jac, _jneg(other.jac)))

    def __mul__(self, c):
        return LT(self.val * c, None if self.jac is None else self.jac * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)


def _jsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _jneg(a):
    return None if a is None else -a


def _block_diag(C):
    """(N, So, Si) dense per-node blocks -> sparse (N*So, N*Si)."""
    N, So, Si = C.shape
    return sp.bsr_matrix((C, np.arange(N), np.arange(N + 1)),
                         shape=(N * So, N * Si)).tocsr()


def _coeff_matrix(other_val, other_sub, dep_sub, out_sub, n):
    """Per-node matrix C[node, out, dep] of the bilinear map's partial
    derivative with respect to the `dep` operand."""
    if len(set(dep_sub)) != len(dep_sub):
        raise ValueError("repeated letters within one operand are not supported")
    fresh_pool = iter("ABCDEFGHLMPQ")
    operands = [other_val]
    subs = ["n" + other_sub]
    dep_new = ""
    for L in dep_sub:
        F = next(fresh_pool)
        operands.append(np.eye(n))
        subs.append(L + F)
        dep_new += F
    spec = ",".join(subs) + "->n" + out_sub + dep_new
    C = np.einsum(spec, *operands)
    N = other_val.shape[0]
    So = n ** len(out_sub)
    Si = n ** len(dep_sub)
    return C.reshape(N, So, Si)


def lt_einsum(spec, a, b):
    """Bilinear contraction, e.g. lt_einsum('kl,ilj->kij', ginv, dg).

    Index letters refer to component axes only (node axis implicit).
    """
    sa, rest = spec.split(",")
    sb, so = rest.split("->")
    val = np.einsum(f"n{sa},n{sb}->n{so}", a.val, b.val)
    if a.val.ndim > 1:
        n = a.val.shape[1]
    elif b.val.ndim > 1:
        n = b.val.shape[1]
    else:
        n = 1  # scalar-scalar product: no component letters involved
    jac = None
    if b.jac is not None:
        jac = _block_diag(_coeff_matrix(a.val, sa, sb, so, n)) @ b.jac
    if a.jac is not None:
        jac = _jsum(jac, _block_diag(_coeff_matrix(b.val, sb, sa, so, n)) @ a.jac)
    return LT(val, jac)


def lt_map(spec, a):
    """Single-operand reindex/diagonal/trace, e.g. lt_map('kijk->ij', dGam)."""
    si, so = spec.split("->")
    val = np.einsum(f"n{si}->n{so}", a.val)
    jac = None
    if a.jac is not None:
        shape_in = a.val.shape[1:]
        Si = int(np.prod(shape_in, dtype=int))
        basis = np.eye(Si).reshape((Si,) + shape_in)
        T = np.einsum(f"b{si}->b{so}", basis).reshape(Si, -1).T
        N = a.val.shape[0]
        jac = sp.kron(sp.identity(N, format="csr"), sp.csr_matrix(T),
                      format="csr") @ a.jac
    return LT(val, jac)


def lt_grad(a, ops):
    rank = a.val.ndim - 1
    val = ops.grad(a.val, rank)
    jac = None if a.jac is None else ops.grad_matrix(rank) @ a.jac
    return LT(val, jac)


_GRAD_MAP_CACHE = {}


def lt_grad_map(spec, a, ops):
    """lt_map(spec, lt_grad(a, ops)) without materializing the full gradient
    Jacobian (the rank-4 intermediate dominates memory otherwise)."""
    rank = a.val.ndim - 1
    val = np.einsum("n" + spec.replace("->", "->n"), ops.grad(a.val, rank))
    jac = None
    if a.jac is not None:
        n = ops.n
        key = (id(ops), rank, spec, ops.grid.nnodes)
        P = _GRAD_MAP_CACHE.get(key)
        if P is None:
            si, so = spec.split("->")
            Si = n ** len(si)
            basis = np.eye(Si).reshape((Si,) + (n,) * len(si))
            T = np.einsum(f"b{si}->b{so}", basis).reshape(Si, -1).T
            N = ops.grid.nnodes
            P = (sp.kron(sp.identity(N, format="csr"), sp.csr_matrix(T),
                         format="csr") @ ops.grad_matrix(rank)).tocsr()
            _GRAD_MAP_CACHE[key] = P
        jac = P @ a.jac
    return LT(val, jac)


def lt_inv(g):
    """Inverse of a per-node matrix field; d(g^-1) = -g^-1 h g^-1."""
    A = np.linalg.inv(g.val)
    jac = None
    if g.jac is not None:
        C = -np.einsum("nik,nlj->nijkl", A, A)
        N, n = A.shape[0], A.shape[1]
        jac = _block_diag(C.reshape(N, n * n, n * n)) @ g.jac
    return LT(A, jac)


def lt_scale_nodes(a, w):
    """Multiply by a fixed per-node scalar array (constant weight)."""
    shape = a.val.shape
    val = a.val * w.reshape((-1,) + (1,) * (len(shape) - 1))
    jac = None
    if a.jac is not None:
        S = int(np.prod(shape[1:], dtype=int))
        jac = sp.diags(np.repeat(w, S)) @ a.jac
    return LT(val, jac)
