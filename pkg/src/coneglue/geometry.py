"""Regularized conical gluing domains.

The gluing region is the solid between two coaxial cones with common vertex,
truncated to a radial annulus r in [r_min, r_max].  All weight functions of
the construction (radial weight r, angular distance phi, boundary weight
rho = phi^(2N), boundary distance d, source distance s) are sampled on a
structured log-radius x polar-angle grid.

Coordinates: the grid works in a frame centered at the cone vertex whose
last axis points along the cone axis (away from the original data's center,
i.e. along -a).  In this frame the original center sits at +|a| e_n.
"""

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gamma


class DomainTooThinError(ValueError):
    pass


@dataclass(frozen=True)
class ConeSpec:
    """Vertex position a (in the original asymptotic chart) and opening angles."""

    vertex: tuple
    theta1: float
    theta2: float

    def __post_init__(self):
        object.__setattr__(self, "vertex", tuple(float(v) for v in self.vertex))
        if self.n < 3:
            raise ValueError("dimension must be >= 3")
        if not (0.0 < self.theta1 < self.theta2 < np.pi):
            if self.theta1 >= self.theta2:
                raise DomainTooThinError(
                    "need theta1 < theta2 (empty interior otherwise)")
            raise ValueError("angles must satisfy 0 < theta1 < theta2 < pi")
        if self.a_mag == 0.0:
            raise ValueError("|a| must be positive")

    @property
    def n(self):
        return len(self.vertex)

    @property
    def a_mag(self):
        return float(np.linalg.norm(self.vertex))

    @property
    def axis(self):
        """Unit cone-axis direction in the ambient frame (-a/|a|)."""
        return -np.asarray(self.vertex) / self.a_mag

    def frame(self):
        """Orthonormal frame whose last column is the cone axis.

        Maps grid-frame coordinates to ambient (vertex-centered) coordinates.
        Deterministic: completed by Gram-Schmidt against the standard basis.
        """
        n = self.n
        u = self.axis
        cols = [u]
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            for c in cols:
                e = e - np.dot(e, c) * c
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                cols.append(e / nrm)
            if len(cols) == n:
                break
        R = np.column_stack(cols[1:] + [u])
        # keep orientation positive
        if np.linalg.det(R) < 0:
            R[:, 0] = -R[:, 0]
        return R


@dataclass(frozen=True)
class WeightParams:
    """Angular exponent N (rho = phi^(2N)), decay exponent p, cutoff smoothness M."""

    N: int = 12
    p: float = 0.75
    M: int = None

    def __post_init__(self):
        if self.M is None:
            object.__setattr__(self, "M", self.N + 4)
        if self.N <= 0:
            raise ValueError("N must be positive")
        if self.M < self.N + 4:
            raise ValueError(
                "chi smoothness M < N+4 rejected: the rough-patch residual "
                "would fall out of the rho^-1-weighted space")

    def validate_for(self, n):
        if not (self.N > n + 8):
            raise ValueError(f"need N > n+8 = {n + 8}, got N={self.N}")
        if not ((n - 2) / 2 < self.p < n - 2):
            raise ValueError(f"need (n-2)/2 < p < n-2, got p={self.p}")
        if n >= 5 and self.p == n / 2:
            raise ValueError("p = n/2 is an excluded exponent for n >= 5")


@dataclass(frozen=True)
class GridParams:
    nt: int = 32
    ntheta: int = 16
    r_min: float = 1.0
    r_max: float = None
    fd_order: int = 2
    axisymmetric: bool = True

    def __post_init__(self):
        if self.r_max is None:
            object.__setattr__(self, "r_max", 1e3 * self.r_min)
        if self.r_min < 1.0:
            raise ValueError("grid must exclude the unit vertex ball (r_min >= 1)")
        if self.r_max <= self.r_min:
            raise ValueError("need r_max > r_min")
        if not self.axisymmetric:
            raise NotImplementedError(
                "only the axisymmetric grid mode is implemented")


def angular_distance(x, cone):
    """phi(x) = min(theta - theta1, theta2 - theta), axis angle theta of x.

    x: (..., n) vertex-centered grid-frame coordinates (axis = last basis vector).
    """
    x = np.asarray(x, float)
    r = np.linalg.norm(x, axis=-1)
    ct = np.clip(x[..., -1] / np.where(r > 0, r, 1.0), -1.0, 1.0)
    theta = np.arccos(ct)
    return np.minimum(theta - cone.theta1, cone.theta2 - theta)


def radial_weight(x):
    """r(x) = |x| (vertex distance; grid excludes the unit ball)."""
    return np.linalg.norm(np.asarray(x, float), axis=-1)


def boundary_weight(phi, N):
    """rho = phi^(2N)."""
    return np.asarray(phi, float) ** (2 * N)


def boundary_distance(x, cone):
    """Euclidean distance to the two boundary cones: d = r sin(phi)."""
    return radial_weight(x) * np.sin(np.maximum(angular_distance(x, cone), 0.0))


def source_distance(x, a_mag):
    """s(x) = distance to the original data's center (at +|a| e_n in grid frame)."""
    x = np.asarray(x, float)
    y = x.copy()
    y[..., -1] -= a_mag
    return np.linalg.norm(y, axis=-1)


def cutoff_chi(theta, cone, weights):
    """Angular cutoff: 1 at theta1, 0 at theta2, M-fold flat at both ends.

    Normalized integral of the bump ((u-theta1)(theta2-u))^(M-1), i.e. the
    regularized incomplete beta function; symmetric smoothstep.
    """
    M = weights.M
    x = (np.asarray(theta, float) - cone.theta1) / (cone.theta2 - cone.theta1)
    x = np.clip(x, 0.0, 1.0)
    return 1.0 - betainc(M, M, x)


def sphere_area(k):
    """Surface measure of the unit sphere S^k in R^(k+1)."""
    return 2.0 * np.pi ** ((k + 1) / 2.0) / gamma((k + 1) / 2.0)


def cone_annulus_volume(cone, r_min, r_max):
    """Closed-form volume of {theta1<=theta<=theta2, r_min<=r<=r_max}."""
    n = cone.n
    # solid angle of the band: integrate sin^(n-2)theta over [theta1,theta2]
    from scipy.integrate import quad
    band, _ = quad(lambda t: np.sin(t) ** (n - 2), cone.theta1, cone.theta2)
    omega = sphere_area(n - 2) * band
    return omega * (r_max ** n - r_min ** n) / n


class DomainGrid:
    """Structured grid on the truncated cone annulus, with weight samples.

    Nodes are laid out on the meridian half-plane (transverse coordinate
    x_1 = r sin(theta) >= 0, axial coordinate x_n = r cos(theta)); node index
    is it*ntheta + ith (t-major).  Quadrature weights include the measure of
    the suppressed symmetry orbits, so sums approximate full n-dimensional
    integrals over the solid region.
    """

    def __init__(self, cone, params, weights=None):
        if params.ntheta < 5:
            raise DomainTooThinError(
                "angular span below 4 grid cells; refine ntheta or widen the cone")
        self.cone = cone
        self.params = params
        self.weights = weights if weights is not None else WeightParams()
        n = cone.n
        self.n = n

        self.t = np.linspace(np.log(params.r_min), np.log(params.r_max), params.nt)
        self.theta = np.linspace(cone.theta1, cone.theta2, params.ntheta)
        self.dt = self.t[1] - self.t[0]
        self.dtheta = self.theta[1] - self.theta[0]

        tt, th = np.meshgrid(self.t, self.theta, indexing="ij")
        self.tv = tt.ravel()
        self.thv = th.ravel()
        self.r = np.exp(self.tv)
        self.nnodes = self.r.size

        self.x = np.zeros((self.nnodes, n))
        self.x[:, 0] = self.r * np.sin(self.thv)
        self.x[:, -1] = self.r * np.cos(self.thv)

        self.phi = np.minimum(self.thv - cone.theta1, cone.theta2 - self.thv)
        self.phi = np.maximum(self.phi, 0.0)
        self.phi0 = 0.5 * (cone.theta2 - cone.theta1)
        self.rho = boundary_weight(self.phi, self.weights.N)
        self.d = self.r * np.sin(self.phi)
        self.s = source_distance(self.x, cone.a_mag)

        # trapezoid weights on each axis; dV = A_{n-2} (r sin th)^{n-2} r^2 dt dth
        wt = np.full(params.nt, self.dt)
        wt[0] *= 0.5
        wt[-1] *= 0.5
        wth = np.full(params.ntheta, self.dtheta)
        wth[0] *= 0.5
        wth[-1] *= 0.5
        w2 = np.outer(wt, wth).ravel()
        self.quadweight = (sphere_area(n - 2) * (self.r * np.sin(self.thv)) ** (n - 2)
                           * self.r ** 2 * w2)

        self.shape = (params.nt, params.ntheta)

    # -- masks ---------------------------------------------------------------

    def sublevel_domain(self, t):
        """Node mask of Omega_t = {phi >= t}."""
        if not (0.0 <= t <= self.phi0 + 1e-15):
            raise ValueError("need 0 <= t <= phi0")
        return self.phi >= t

    def boundary_mask(self):
        """Nodes on the two boundary cones (phi = 0)."""
        return self.phi == 0.0

    def outer_edge_mask(self):
        """Nodes at r = r_max (Dirichlet closure edge for the potentials)."""
        m = np.zeros(self.shape, bool)
        m[-1, :] = True
        return m.ravel()

    def integrate(self, values):
        return float(np.dot(self.quadweight, values))

    # -- serialization -------------------------------------------------------

    def describe(self):
        """Key-value text block describing the domain."""
        c, p, w = self.cone, self.params, self.weights
        lines = [
            "format = coneglue-domain-1",
            "n = %d" % self.n,
            "vertex = %s" % " ".join("%.17g" % v for v in c.vertex),
            "theta1 = %.17g" % c.theta1,
            "theta2 = %.17g" % c.theta2,
            "r_min = %.17g" % p.r_min,
            "r_max = %.17g" % p.r_max,
            "nt = %d" % p.nt,
            "ntheta = %d" % p.ntheta,
            "axisymmetric = %s" % ("true" if p.axisymmetric else "false"),
            "N = %d" % w.N,
            "p = %.17g" % w.p,
            "M = %d" % w.M,
        ]
        return "\n".join(lines) + "\n"

    def nodes_csv(self, path_or_buf=None):
        """CSV dump of nodes, weight-function samples and quadrature weights."""
        hdr = ",".join(["x%d" % (i + 1) for i in range(self.n)]
                       + ["r", "phi", "rho", "d", "s", "quadweight"])
        cols = np.column_stack([self.x, self.r, self.phi, self.rho,
                                self.d, self.s, self.quadweight])
        buf = io.StringIO()
        buf.write(hdr + "\n")
        np.savetxt(buf, cols, delimiter=",", fmt="%.17g")
        text = buf.getvalue()
        if path_or_buf is not None:
            with open(path_or_buf, "w") as f:
                f.write(text)
        return text


def parse_domain(text):
    """Inverse of DomainGrid.describe()."""
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    if kv.get("format") != "coneglue-domain-1":
        raise ValueError("unrecognized domain format")
    vertex = tuple(float(v) for v in kv["vertex"].split())
    cone = ConeSpec(vertex, float(kv["theta1"]), float(kv["theta2"]))
    params = GridParams(nt=int(kv["nt"]), ntheta=int(kv["ntheta"]),
                        r_min=float(kv["r_min"]), r_max=float(kv["r_max"]),
                        axisymmetric=kv.get("axisymmetric", "true") == "true")
    weights = WeightParams(N=int(kv["N"]), p=float(kv["p"]), M=int(kv["M"]))
    return DomainGrid(cone, params, weights)


def build_domain(cone, grid_params, weights=None):
    """Build the structured cone-annulus grid with weight samples."""
    return DomainGrid(cone, grid_params, weights)
