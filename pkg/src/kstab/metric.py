"""Torus-invariant Kahler metrics as convex potentials in log coordinates.

A metric is ``phi = phi_0 + psi`` on a tensor grid over ``[-R, R]^n`` where
``phi_0`` is the Fubini-Study type reference potential of the polytope and
``psi`` is a bounded relative potential.  The volume form ``omega^n`` is
realized as ``det D^2 phi dx`` and integrals use the trapezoidal rule, which
is spectrally accurate for the exponentially decaying integrands involved.

Conventions
-----------
* ``V`` is the Euclidean volume of the polytope.
* The Ricci potential is ``rho = log c - phi - log det D^2 phi`` with
  ``c = V / int e^{-phi}``, so that ``int e^rho det D^2 phi = V``.
* ``L`` is normalized by the baseline metric, ``L(baseline) = 0``.
* The Monge-Ampere energy is evaluated on the symplectic side,
  ``E(phi) - E(baseline) = -(1/V) int_P (u_phi - u_baseline)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from . import grid as fd
from .errors import DomainTooSmall, NonConvex, NotNormalized
from .grid import GridSpec
from .polytope import Polytope, Quadrature, lattice_points, quadrature

TOL_NORM = 1e-8
TOL_BC = 1e-6
TOL_FLOOR = 1e-300


class ReferencePotential:
    """``phi_0(x) = log sum_{u in P cap Z^n} exp(<u, x>)`` with exact derivatives."""

    def __init__(self, P: Polytope):
        self.polytope = P
        self.lattice = lattice_points(P, 1).astype(float)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.polytope.dim:
            x = x.reshape(-1, self.polytope.dim)
        out = logsumexp(x @ self.lattice.T, axis=-1)
        return out

    def derivatives(self, x):
        """Values, gradients ``(N, n)`` and Hessians ``(N, n, n)`` at points ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.polytope.dim)
        logits = x @ self.lattice.T
        val = logsumexp(logits, axis=-1)
        p = np.exp(logits - val[:, None])
        mean = p @ self.lattice
        # centered form avoids cancellation where one lattice point dominates
        dev = self.lattice[None, :, :] - mean[:, None, :]
        cov = np.einsum("nk,nki,nkj->nij", p, dev, dev)
        return val, mean, cov


def reference_potential(P: Polytope) -> ReferencePotential:
    return ReferencePotential(P)


@lru_cache(maxsize=16)
def _reference_on_grid(P: Polytope, grid: GridSpec):
    return ReferencePotential(P).derivatives(grid.points)


@lru_cache(maxsize=8)
def default_quadrature(P: Polytope, resolution: int = 48) -> Quadrature:
    return quadrature(P, resolution)


def default_grid(P: Polytope, nodes_per_axis: int = 129, box_radius: float | None = None) -> GridSpec:
    """Grid whose box keeps the mass of ``e^{-phi_0}`` outside it below ~1e-8."""
    if box_radius is None:
        box_radius = 16.0 if P.dim == 1 else 18.0
    return GridSpec(float(box_radius), int(nodes_per_axis), P.dim)


@dataclass(frozen=True, eq=False)
class ToricMetric:
    """Immutable torus-invariant metric ``phi_0 + psi`` sampled on ``grid``."""

    polytope: Polytope
    grid: GridSpec
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float).reshape(-1)
        if psi.size != self.grid.size:
            raise ValueError("psi does not match the grid")
        if self.grid.dim != self.polytope.dim:
            raise ValueError("grid and polytope dimensions differ")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def reference(cls, P: Polytope, grid: GridSpec | None = None) -> "ToricMetric":
        grid = grid or default_grid(P)
        return cls(P, grid, np.zeros(grid.size))

    @classmethod
    def from_potential(cls, P: Polytope, grid: GridSpec, phi) -> "ToricMetric":
        """Sample a full potential ``phi(x)`` (callable on ``(N, n)`` arrays)."""
        phi0 = _reference_on_grid(P, grid)[0]
        return cls(P, grid, np.asarray(phi(grid.points), dtype=float).reshape(-1) - phi0)

    def with_psi(self, psi) -> "ToricMetric":
        return ToricMetric(self.polytope, self.grid, psi)

    @property
    def volume(self) -> float:
        return float(self.polytope.volume)

    @cached_property
    def phi(self) -> np.ndarray:
        return _reference_on_grid(self.polytope, self.grid)[0] + self.psi

    @cached_property
    def gradient(self) -> np.ndarray:
        return _reference_on_grid(self.polytope, self.grid)[1] + fd.gradient(self.grid, self.psi)

    @cached_property
    def hessian(self) -> np.ndarray:
        return _reference_on_grid(self.polytope, self.grid)[2] + fd.hessian(self.grid, self.psi)

    @cached_property
    def det(self) -> np.ndarray:
        H = self.hessian
        if self.grid.dim == 1:
            return H[:, 0, 0].copy()
        return H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] ** 2

    @cached_property
    def inverse_hessian(self) -> np.ndarray:
        H = self.hessian
        if self.grid.dim == 1:
            return 1.0 / H
        d = self.det
        inv = np.empty_like(H)
        inv[:, 0, 0] = H[:, 1, 1] / d
        inv[:, 1, 1] = H[:, 0, 0] / d
        inv[:, 0, 1] = inv[:, 1, 0] = -H[:, 0, 1] / d
        return inv

    def is_convex(self) -> bool:
        tr = np.trace(self.hessian, axis1=1, axis2=2)
        return bool(np.all(self.det > 0) and np.all(tr > 0))

    @cached_property
    def log_Z(self) -> float:
        """``log int e^{-phi} dx`` over the box."""
        return float(logsumexp(-self.phi, b=self.grid.weights))

    @cached_property
    def canonical_weights(self) -> np.ndarray:
        """Quadrature masses of the canonical probability measure ``mu_phi``."""
        return self.grid.weights * np.exp(-self.phi - self.log_Z)

    @cached_property
    def ma_weights(self) -> np.ndarray:
        """Quadrature masses of ``det D^2 phi dx`` (total close to V)."""
        return self.grid.weights * self.det

    @cached_property
    def _ricci(self):
        if not self.is_convex():
            bad = int(np.sum(self.det <= 0))
            raise NonConvex(f"discrete Hessian not positive definite at {bad} nodes")
        ring = float(self.canonical_weights[self.grid.boundary_mask].sum())
        if ring > TOL_BC:
            raise DomainTooSmall(f"canonical mass {ring:.2e} on the box boundary; enlarge box_radius")
        log_c = math.log(self.volume) - self.log_Z
        rho = log_c - self.phi - np.log(self.det)
        return rho, log_c

    @property
    def rho(self) -> np.ndarray:
        return self._ricci[0]

    @property
    def log_c(self) -> float:
        return self._ricci[1]

    @cached_property
    def _psi_interp(self):
        g = self.grid
        if g.dim == 1:
            return CubicSpline(g.axis, self.psi, bc_type="clamped")
        return RectBivariateSpline(g.axis, g.axis, self.psi.reshape(g.shape), kx=3, ky=3)

    def evaluate(self, x):
        """Interpolated ``phi``, gradient and Hessian at arbitrary points in the box."""
        x = np.asarray(x, dtype=float).reshape(-1, self.grid.dim)
        v0, g0, h0 = ReferencePotential(self.polytope).derivatives(x)
        s = self._psi_interp
        if self.grid.dim == 1:
            t = x[:, 0]
            v = v0 + s(t)
            g = g0 + s(t, 1)[:, None]
            h = h0 + s(t, 2)[:, None, None]
            return v, g, h
        a, b = x[:, 0], x[:, 1]
        v = v0 + s.ev(a, b)
        g = g0 + np.stack([s.ev(a, b, dx=1), s.ev(a, b, dy=1)], axis=-1)
        hxy = s.ev(a, b, dx=1, dy=1)
        h = h0 + np.stack(
            [np.stack([s.ev(a, b, dx=2), hxy], -1), np.stack([hxy, s.ev(a, b, dy=2)], -1)], -2
        )
        return v, g, h

    # serialization -------------------------------------------------------
    def to_csv(self, path) -> None:
        header = json.dumps({"grid": self.grid.to_json(), "normals": [list(n) for n in self.polytope.normals]})
        np.savetxt(path, self.psi, header=header, fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "ToricMetric":
        from .polytope import from_facets

        with open(path) as fh:
            header = json.loads(fh.readline().lstrip("# ").strip())
        psi = np.loadtxt(path)
        return cls(from_facets(header["normals"]), GridSpec(**header["grid"]), psi)


def ricci_potential(M: ToricMetric):
    """Normalized Ricci potential on the grid and the constant ``c``.

    Raises
    ------
    NonConvex
        if ``det D^2 phi <= 0`` somewhere.
    DomainTooSmall
        if ``e^{-phi}`` carries more than ``1e-6`` of its mass on the box edge.
    """
    return M.rho, math.exp(M.log_c)


# ---------------------------------------------------------------------------
# relative entropy


def entropy(nu, mu, weights) -> float:
    """Relative entropy ``int log(nu/mu) nu`` of two densities on a grid.

    Returns ``inf`` when ``nu`` charges a cell on which ``mu`` vanishes.
    """
    nu, mu, weights = (np.asarray(a, dtype=float) for a in (nu, mu, weights))
    for name, d in (("nu", nu), ("mu", mu)):
        total = float(np.dot(weights, d))
        if np.any(d < 0) or abs(total - 1.0) > TOL_NORM:
            raise NotNormalized(f"{name} integrates to {total!r}")
    pos = nu > 0
    if np.any(pos & (mu < TOL_FLOOR)):
        return math.inf
    val = float(np.dot(weights[pos], nu[pos] * (np.log(nu[pos]) - np.log(mu[pos]))))
    # clamp tiny negative round-off; Jensen gives >= 0
    return max(val, 0.0)


def entropy_legendre_lower_bound(nu, mu, f, weights) -> float:
    """``int f nu - log int e^f mu``, a lower bound for the relative entropy."""
    nu, mu, f, weights = (np.asarray(a, dtype=float) for a in (nu, mu, f, weights))
    for name, d in (("nu", nu), ("mu", mu)):
        total = float(np.dot(weights, d))
        if abs(total - 1.0) > TOL_NORM:
            raise NotNormalized(f"{name} integrates to {total!r}")
    pos = mu > 0
    lse = float(logsumexp(f[pos], b=weights[pos] * mu[pos]))
    return float(np.dot(weights, f * nu)) - lse


# ---------------------------------------------------------------------------
# Legendre transform


def legendre(M: ToricMetric, quad: Quadrature, tol: float = 1e-11) -> np.ndarray:
    """Symplectic potential ``u(y) = sup_x <x, y> - phi(x)`` at the quadrature nodes.

    The maximizer is located on the grid through the discrete gradient map
    and polished by damped Newton iterations on the spline-interpolated
    potential.

    Raises
    ------
    NonConvex
        if the discrete Hessian is not positive definite.
    DomainTooSmall
        if some maximizer lies outside the box.
    """
    if not M.is_convex():
        raise NonConvex("Legendre transform needs a convex potential")
    y = quad.nodes
    g = M.grid
    tree = cKDTree(M.gradient)
    _, idx = tree.query(y)
    x = g.points[idx].copy()
    R = g.box_radius

    val, grad, hess = M.evaluate(x)
    obj = np.einsum("ni,ni->n", x, y) - val
    for _ in range(60):
        resid = y - grad
        if np.max(np.abs(resid)) < tol:
            break
        step = np.linalg.solve(hess, resid[..., None])[..., 0]
        lam = np.ones(len(x))
        for _ in range(30):
            xn = np.clip(x + lam[:, None] * step, -R, R)
            vn, gn, hn = M.evaluate(xn)
            on = np.einsum("ni,ni->n", xn, y) - vn
            worse = on < obj - 1e-14 * (1 + np.abs(obj))
            if not np.any(worse):
                break
            lam[worse] *= 0.5
        x, val, grad, hess, obj = xn, vn, gn, hn, on
    resid = np.max(np.abs(y - grad), axis=1)
    at_edge = np.max(np.abs(x), axis=1) >= R * (1 - 1e-9)
    if np.any(at_edge & (resid > 1e-6)):
        raise DomainTooSmall(f"{int(np.sum(at_edge))} Legendre maximizers hit the box; enlarge box_radius")
    return obj


def legendre_inverse(u, quad: Quadrature, x) -> np.ndarray:
    """Discrete inverse transform ``max_y <x, y> - u(y)`` over the quadrature nodes."""
    x = np.asarray(x, dtype=float).reshape(-1, quad.nodes.shape[1])
    out = np.empty(len(x))
    for s in range(0, len(x), 256):
        blk = x[s : s + 256] @ quad.nodes.T - u[None, :]
        out[s : s + 256] = blk.max(axis=1)
    return out


@lru_cache(maxsize=8)
def _cached_legendre(M: ToricMetric, quad: Quadrature) -> np.ndarray:
    return legendre(M, quad)


# ---------------------------------------------------------------------------
# energies


@dataclass
class EnergyReport:
    E: float
    L: float
    D: float
    ricci_calabi: float
    mabuchi: float
    h_functional: float
    normalization_const: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def monge_ampere_energy(M: ToricMetric, baseline: ToricMetric, quad: Quadrature | None = None) -> float:
    quad = quad or default_quadrature(M.polytope)
    u = _cached_legendre(M, quad)
    ub = _cached_legendre(baseline, quad)
    return -quad.integrate(u - ub) / M.volume


def monge_ampere_energy_mixed(M: ToricMetric, baseline: ToricMetric) -> float:
    """Grid evaluation through the mixed Monge-Ampere sum (cross-check only).

    Uses ``E = (1/V) int psi * int_0^1 det(A + s B) ds`` with ``A`` the baseline
    Hessian and ``B`` the Hessian of the difference ``psi``.
    """
    psi = M.phi - baseline.phi
    A = baseline.hessian
    B = M.hessian - A
    if M.grid.dim == 1:
        kernel = A[:, 0, 0] + 0.5 * B[:, 0, 0]
    else:
        detA = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] ** 2
        detB = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] ** 2
        mixed = A[:, 0, 0] * B[:, 1, 1] + A[:, 1, 1] * B[:, 0, 0] - 2 * A[:, 0, 1] * B[:, 0, 1]
        kernel = detA + 0.5 * mixed + detB / 3.0
    return float(np.dot(M.grid.weights, psi * kernel)) / M.volume


@lru_cache(maxsize=8)
def _self_entropy(baseline: ToricMetric) -> float:
    # entropy of the baseline volume form against its own canonical measure;
    # subtracting it pins the Mabuchi energy of the baseline at zero
    w = baseline.grid.weights
    mass = baseline.ma_weights
    return entropy(mass / mass.sum() / w, baseline.canonical_weights / w, w)


def energies(
    M: ToricMetric,
    baseline: ToricMetric,
    quad: Quadrature | None = None,
    shift=None,
) -> EnergyReport:
    """All functionals of ``M`` relative to ``baseline``.

    ``shift`` (a vector ``a``) evaluates the translated metric
    ``phi(x - a)`` instead of ``phi``; ``L``, ``R`` and ``H`` are translation
    invariant while ``E``, ``D`` and the Mabuchi energy move by ``<a, b>`` with
    ``b`` the barycenter of the polytope.
    """
    if M.grid != baseline.grid or M.polytope != baseline.polytope:
        raise ValueError("metric and baseline must share polytope and grid")
    V = M.volume
    rho = M.rho
    e_rho = np.exp(rho)
    mass = M.ma_weights
    E = monge_ampere_energy(M, baseline, quad)
    L = -(M.log_Z - baseline.log_Z)

    nu = mass / mass.sum()
    mu = baseline.canonical_weights
    w = M.grid.weights
    ent = entropy(nu / w, mu / w, w) - _self_entropy(baseline)
    mab = ent + float(np.dot(M.phi - baseline.phi, mass)) / V - E

    if shift is not None:
        ab = float(np.dot(np.asarray(shift, dtype=float), M.polytope.barycenter_array))
        E -= ab
        mab += ab
    rc = float(np.dot(mass, (e_rho - 1.0) ** 2)) / V
    H = float(np.dot(mass, rho * e_rho)) / V
    return EnergyReport(
        E=E,
        L=L,
        D=L - E,
        ricci_calabi=rc,
        mabuchi=mab,
        h_functional=H,
        normalization_const=math.exp(M.log_c),
    )


def l1_ricci_calabi(M: ToricMetric) -> float:
    return float(np.dot(M.ma_weights, np.abs(np.exp(M.rho) - 1.0))) / M.volume


def normalization_defect(M: ToricMetric) -> float:
    """``(1/V) int e^rho det D^2 phi - 1``, zero by construction up to round-off."""
    return float(np.dot(M.ma_weights, np.exp(M.rho))) / M.volume - 1.0


def d_pairing(M: ToricMetric, direction) -> float:
    """``(1/V) int delta (e^rho - 1) det D^2 phi``: the differential of D at M."""
    return float(np.dot(M.ma_weights, np.asarray(direction) * (np.exp(M.rho) - 1.0))) / M.volume
