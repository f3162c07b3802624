"""Tensor-field containers on the cone grid, reference initial data, and the
rough-patch constructor.

Components are stored in the Cartesian frame of the vertex-centered chart
(node axis first); symmetric tensors are symmetrized bitwise at construction.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .diffops import GridOps
from .geometry import cutoff_chi


class FieldError(ValueError):
    pass


class _Field:
    rank = None

    def __init__(self, grid, comps, variance=None):
        comps = np.asarray(comps, float)
        expect = (grid.nnodes,) + (grid.n,) * self.rank
        if comps.shape != expect:
            raise FieldError(f"component shape {comps.shape} != {expect}")
        self.grid = grid
        self.comps = comps
        self.variance = variance

    def copy(self):
        return type(self)(self.grid, self.comps.copy(), self.variance)

    def __add__(self, other):
        return type(self)(self.grid, self.comps + other.comps, self.variance)

    def __sub__(self, other):
        return type(self)(self.grid, self.comps - other.comps, self.variance)

    def __mul__(self, c):
        return type(self)(self.grid, self.comps * c, self.variance)

    __rmul__ = __mul__


class ScalarField(_Field):
    rank = 0

    @property
    def values(self):
        return self.comps


class VectorField(_Field):
    rank = 1

    def __init__(self, grid, comps, variance="con"):
        super().__init__(grid, comps, variance)


class SymTensorField(_Field):
    rank = 2

    def __init__(self, grid, comps, variance="cov"):
        comps = np.asarray(comps, float)
        if comps.ndim == 3 and comps.shape[-1] == comps.shape[-2]:
            comps = 0.5 * (comps + np.swapaxes(comps, -1, -2))
        super().__init__(grid, comps, variance)


class CovSymTensorField(SymTensorField):
    def __init__(self, grid, comps, variance="cov"):
        super().__init__(grid, comps, "cov")


class ConSymTensorField(SymTensorField):
    def __init__(self, grid, comps, variance="con"):
        super().__init__(grid, comps, "con")


@dataclass
class Jet:
    """Pointwise evaluation record: values and derivatives at the grid nodes."""
    point: np.ndarray
    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray = None


def jets(field, ops=None, order=2):
    ops = ops or GridOps(field.grid)
    d1 = ops.grad(field.comps, field.rank)
    d2 = ops.grad(d1, field.rank + 1) if order >= 2 else None
    return Jet(field.grid.x, field.comps, d1, d2)


def fd_derivative(field, beta, ops=None):
    """Discrete partial derivative for a multi-index beta with |beta| <= 2.

    Returns the raw component array with one trailing axis removed per
    derivative applied (successive gradients contracted on beta's entries).
    """
    if len(beta) > 2:
        raise FieldError("only derivatives up to order 2 are provided")
    ops = ops or GridOps(field.grid)
    # keep full gradients until the end: individual derivative components are
    # not equivariant fields, so slicing early would corrupt the next step
    out = field.comps
    rank = field.rank
    for _ in beta:
        out = ops.grad(out, rank)
        rank += 1
    for c in reversed(beta):
        out = out[..., c]
    return out


def is_positive_definite(g):
    """Leading principal minors of a metric field, all positive."""
    c = g.comps
    n = c.shape[-1]
    for k in range(1, n + 1):
        if np.any(np.linalg.det(c[:, :k, :k]) <= 0):
            return False
    return True


class InitialData:
    """Metric plus second fundamental form / momentum tensor with decay tag."""

    def __init__(self, g, k=None, pi=None, p_decay=1.0):
        if (k is None) == (pi is None):
            raise FieldError("exactly one of k, pi must be given")
        self.g = g
        self.grid = g.grid
        self.n = g.grid.n
        self.p_decay = p_decay
        if pi is None:
            self.k = k
            self.pi = momentum_from_k(g, k)
        else:
            self.pi = pi
            self.k = k_from_momentum(g, pi)

    def fitted_decay(self):
        """Log-log fit of max|g - delta| against r along the grid radii."""
        dev = np.abs(self.g.comps - np.eye(self.n)).max(axis=(1, 2))
        dev = dev.reshape(self.grid.shape).max(axis=1)
        r = np.exp(self.grid.t)
        good = dev > 1e-300
        if good.sum() < 2:
            return np.inf
        slope = np.polyfit(np.log(r[good]), np.log(dev[good]), 1)[0]
        return -slope


def momentum_from_k(g, k):
    """pi^{ij} = k^{ij} - Tr_g(k) g^{ij}, indices raised with g."""
    ginv = np.linalg.inv(g.comps)
    kup = np.einsum('nia,njb,nab->nij', ginv, ginv, k.comps)
    trk = np.einsum('nab,nab->n', ginv, k.comps)
    return ConSymTensorField(g.grid, kup - trk[:, None, None] * ginv)


def k_from_momentum(g, pi):
    """Inverse of momentum_from_k (linear bijection)."""
    n = g.grid.n
    trpi = np.einsum('nab,nab->n', g.comps, pi.comps)  # Tr_g pi = (1-n) Tr_g k
    ginv = np.linalg.inv(g.comps)
    kup = pi.comps + (trpi / (1.0 - n))[:, None, None] * ginv
    klow = np.einsum('nia,njb,nab->nij', g.comps, g.comps, kup)
    return CovSymTensorField(g.grid, klow)


# -- reference data ----------------------------------------------------------

class AnalyticData:
    """Analytic initial data in a chart centered at the body.

    Vectorized point evaluations for the flux diagnostics, plus on_grid()
    sampling (grid nodes are vertex-centered; the body sits at +|a| e_n).
    """

    p_decay = 1.0

    def metric(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        return np.broadcast_to(np.eye(x.shape[-1]), x.shape[:-1] + (x.shape[-1],) * 2).copy()

    def dmetric(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        n = x.shape[-1]
        return np.zeros(x.shape[:-1] + (n, n, n))

    def momentum(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        n = x.shape[-1]
        return np.zeros(x.shape[:-1] + (n, n))

    def body_coords(self, grid):
        y = grid.x.copy()
        y[:, -1] -= grid.cone.a_mag
        return y

    def on_grid(self, grid):
        y = self.body_coords(grid)
        g = CovSymTensorField(grid, self.metric(y))
        pi = ConSymTensorField(grid, self.momentum(y), "con")
        return InitialData(g, pi=pi, p_decay=self.p_decay)


class FlatData(AnalyticData):
    pass


class SchwarzschildIsotropic(AnalyticData):
    """g = (1 + m/2r)^4 delta, k = 0, in isotropic coordinates (n = 3)."""

    def __init__(self, m=1.0, n=3):
        if m <= 0:
            raise ValueError("m must be positive")
        if n != 3:
            raise ValueError("isotropic reference implemented for n = 3")
        self.m = m
        self.n = n
        self.p_decay = 1.0  # = n - 2

    def conformal(self, x):
        r = np.linalg.norm(x, axis=-1)
        if np.any(r <= self.m / 2):
            raise FieldError("grid reaches the coordinate singularity r <= m/2")
        return 1.0 + self.m / (2.0 * r), r

    def metric(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        u, _ = self.conformal(x)
        return u[..., None, None] ** 4 * np.eye(x.shape[-1])

    def dmetric(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        u, r = self.conformal(x)
        du = -(self.m / 2.0) * x / r[..., None] ** 3       # (..., c)
        n = x.shape[-1]
        out = 4.0 * u[..., None, None, None] ** 3 * np.einsum(
            '...c,ij->...ijc', du, np.eye(n))
        return out


def flat_data(grid):
    return FlatData().on_grid(grid)


def schwarzschild_isotropic(grid, m=1.0):
    return SchwarzschildIsotropic(m).on_grid(grid)


def conformal_manufactured(u, lap_u, n):
    """Conformally flat metric with its exact scalar curvature.

    g = u^{4/(n-2)} delta, R_exact = -4(n-1)/(n-2) u^{-(n+2)/(n-2)} lap_u.
    """
    if np.any(u.values <= 0):
        raise FieldError("conformal factor must be positive")
    grid = u.grid
    ex = 4.0 / (n - 2)
    g = CovSymTensorField(grid, u.values[:, None, None] ** ex * np.eye(n))
    R = ScalarField(grid, -4.0 * (n - 1) / (n - 2)
                    * u.values ** (-(n + 2.0) / (n - 2.0)) * lap_u.values)
    return g, R


def rough_patch(data, weights):
    """Cutoff interpolation chi*g + (1-chi)*delta, pi = chi*pi, on the grid.

    `data` is the reference InitialData sampled on the cone grid; the output
    equals the data at Sigma_1 (chi = 1) and flat at Sigma_2 (chi = 0).
    """
    grid = data.grid
    chi = cutoff_chi(grid.thv, grid.cone, weights)
    n = grid.n
    g = CovSymTensorField(
        grid, np.eye(n) + chi[:, None, None] * (data.g.comps - np.eye(n)))
    pi = ConSymTensorField(grid, chi[:, None, None] * data.pi.comps, "con")
    out = InitialData(g, pi=pi, p_decay=data.p_decay)
    if not is_positive_definite(out.g):
        raise FieldError("rough patch lost positive-definiteness; increase |a|")
    return out


# -- snapshots ---------------------------------------------------------------

_RANK_CLS = {0: ScalarField, 1: VectorField, 2: SymTensorField}


def save_field(field, path, binary=False):
    """Field snapshot: text header, then row-major float64 components per node
    (CSV rows, or little-endian binary)."""
    grid = field.grid
    hdr = ("coneglue-field-1\n"
           f"n={grid.n} rank={field.rank} variance={field.variance or 'none'} "
           f"nt={grid.shape[0]} ntheta={grid.shape[1]} "
           f"encoding={'binary-le' if binary else 'csv'}\n")
    flat = field.comps.reshape(grid.nnodes, -1)
    if binary:
        with open(path, "wb") as f:
            f.write(hdr.encode())
            f.write(struct.pack("<%dd" % flat.size, *flat.ravel()))
    else:
        with open(path, "w") as f:
            f.write(hdr)
            np.savetxt(f, flat, delimiter=",", fmt="%.17g")


def load_field(path, grid):
    with open(path, "rb") as f:
        magic = f.readline().decode().strip()
        if magic != "coneglue-field-1":
            raise FieldError("unrecognized field snapshot")
        meta = dict(kv.split("=") for kv in f.readline().decode().split())
        rank = int(meta["rank"])
        if (int(meta["nt"]), int(meta["ntheta"])) != grid.shape or int(meta["n"]) != grid.n:
            raise FieldError("snapshot grid does not match")
        count = grid.nnodes * grid.n ** rank
        if meta["encoding"] == "binary-le":
            data = np.array(struct.unpack("<%dd" % count, f.read(8 * count)))
        else:
            data = np.loadtxt(f, delimiter=",").reshape(-1)
    comps = data.reshape((grid.nnodes,) + (grid.n,) * rank)
    variance = None if meta["variance"] == "none" else meta["variance"]
    cls = _RANK_CLS[rank]
    if rank == 0:
        return cls(grid, comps)
    return cls(grid, comps, variance)
