"""Metrics in action-angle coordinates: symplectic potentials on the polytope.

A metric is ``u = u_P + v`` where ``u_P = sum_i l_i log l_i`` (``l_i = 1 + <n_i, y>``)
is the canonical potential of the polytope and ``v`` is smooth up to the
boundary.  ``v`` is sampled on the lattice ``(1/k) Z^n`` intersected with P,
including boundary nodes, and differentiated with fourth-order stencils that
stay inside P.  The singular parts of ``D^2 u`` and of the Ricci potential are
evaluated in closed form, so every field used below is bounded on P.

In these coordinates ``omega^n`` is Lebesgue measure ``dy`` and

    rho = log V - log Z + w,   w = u - <y, grad u> + log det D^2 u,
    Z = int_P e^w dy = int e^{-phi} dx,

with ``w = w_P + v - <y, grad v> + log det(I + G_P D^2 v)`` and
``G_P = (D^2 u_P)^{-1}`` polynomial-rational and bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import NonConvex
from .polytope import Polytope, lattice_points

# primitive directions tried for directional stencils, in order of preference
_DIRECTIONS_2D = [(1, 0), (0, 1), (1, 1), (1, -1), (1, 2), (2, 1), (1, -2), (2, -1), (1, 3), (3, 1), (1, -3), (3, -1)]


def _fd_weights(offsets, order: int) -> np.ndarray:
    """Weights ``c`` with ``sum c_s f(s) ~ f^(order)(0)`` on integer offsets."""
    s = np.asarray(offsets, dtype=float)
    p = np.arange(len(s))
    A = s[None, :] ** p[:, None] / np.array([math.factorial(int(q)) for q in p])[:, None]
    rhs = np.zeros(len(s))
    rhs[order] = 1.0
    return np.linalg.solve(A, rhs)


def _window(inside, span: int = 5):
    """Offsets for a stencil along a line; ``inside(s)`` tests lattice points.

    Prefers the centered five-point window and otherwise the most centered
    six-point window containing 0.
    """
    if all(inside(s) for s in range(-2, 3)):
        return list(range(-2, 3)), 0
    best = None
    for s0 in range(-5, 1):
        win = list(range(s0, s0 + 6))
        if all(inside(s) for s in win):
            off = abs(s0 + 2.5)
            if best is None or off < best[1]:
                best = (win, off)
    return best if best else (None, None)


@dataclass(frozen=True, eq=False)
class SymplecticGrid:
    """Lattice ``(1/k) Z^n`` restricted to the closed polytope."""

    polytope: Polytope
    k: int

    def __post_init__(self):
        if self.k < 4:
            raise ValueError("k must be >= 4")

    @classmethod
    def from_nodes_per_axis(cls, P: Polytope, nodes_per_axis: int) -> "SymplecticGrid":
        """Refinement with about ``nodes_per_axis`` nodes across the bounding box."""
        verts = P.vertices_array
        width = float(np.max(verts.max(axis=0) - verts.min(axis=0)))
        k = max(4, int(round((nodes_per_axis - 1) / width)))
        return cls(P, k + (k % 2))

    @property
    def h(self) -> float:
        return 1.0 / self.k

    @property
    def dim(self) -> int:
        return self.polytope.dim

    @cached_property
    def lattice(self) -> np.ndarray:
        return lattice_points(self.polytope, self.k)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.lattice / self.k

    @property
    def size(self) -> int:
        return len(self.lattice)

    @cached_property
    def ell(self) -> np.ndarray:
        """Affine facet functions ``l_i(y)`` at the nodes, shape ``(N, m)``, exact zeros on facets."""
        N = np.array(self.polytope.normals, dtype=np.int64)
        return (self.lattice @ N.T + self.k) / self.k

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return np.any(self.ell == 0, axis=1)

    @cached_property
    def angle_weights(self) -> np.ndarray:
        """Solid-angle lattice rule: ``h^n`` times the fraction of a small ball inside P.

        Its error expands in even powers of ``h`` for smooth integrands.
        """
        ell = self.ell
        tight = ell == 0
        nt = tight.sum(axis=1)
        w = np.ones(self.size)
        w[nt == 1] = 0.5
        N = self.polytope.normals_array
        for r in np.nonzero(nt == 2)[0]:
            i, j = np.nonzero(tight[r])[0]
            cosang = np.dot(N[i], N[j]) / (np.linalg.norm(N[i]) * np.linalg.norm(N[j]))
            w[r] = (math.pi - math.acos(cosang)) / (2 * math.pi)
        return w * self.h**self.dim

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights; Richardson-extrapolated (fourth order, nonnegative) for even k."""
        if self.k % 2:
            return self.angle_weights
        coarse = SymplecticGrid(self.polytope, self.k // 2)
        wc = np.zeros(self.size)
        idx = self._index
        for J, wj in zip(coarse.lattice, coarse.angle_weights):
            wc[idx[tuple(int(c) for c in 2 * J)]] += wj
        w = (4.0 * self.angle_weights - wc) / 3.0
        w[np.abs(w) < 1e-15 * self.h**self.dim] = 0.0
        return w

    @cached_property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    # stencils ------------------------------------------------------------
    @cached_property
    def _index(self) -> dict:
        return {tuple(int(c) for c in J): i for i, J in enumerate(self.lattice)}

    def _lookup(self, J: np.ndarray) -> np.ndarray:
        lo = self.lattice.min(axis=0)
        shape = tuple(self.lattice.max(axis=0) - lo + 1)
        table = np.full(shape, -1, dtype=np.int64)
        table[tuple((self.lattice - lo).T)] = np.arange(self.size)
        return table[tuple((J - lo).T)]

    def _windows(self, d):
        """Stencil offsets for every node along direction ``d``: ``(start, length)`` or invalid."""
        N = np.array(self.polytope.normals, dtype=np.int64)
        a = self.lattice @ N.T + self.k
        b = N @ np.asarray(d)
        s_hi = np.full(self.size, 5)
        s_lo = np.full(self.size, -5)
        for i, bi in enumerate(b):
            if bi < 0:
                s_hi = np.minimum(s_hi, a[:, i] // (-bi))
            elif bi > 0:
                s_lo = np.maximum(s_lo, -(a[:, i] // bi))
        centered = (s_lo <= -2) & (s_hi >= 2)
        lo6, hi6 = np.maximum(s_lo, -5), np.minimum(s_hi - 5, 0)
        ok6 = lo6 <= hi6
        start6 = np.clip(-3, lo6, hi6)
        start = np.where(centered, -2, start6)
        length = np.where(centered, 5, 6)
        off = np.where(centered, 0.0, np.where(ok6, np.abs(start6 + 2.5), np.inf))
        return start, length, off

    @cached_property
    def operators(self):
        """Sparse ``(grad, hess)`` with ``grad[i]`` and ``hess[i][j]`` acting on node fields.

        At each node the Hessian is recovered from three directional second
        differences along lattice directions whose stencils fit inside P,
        preferring centered five-point stencils and otherwise the most
        centered six-point one-sided stencil.
        """
        n, Nn, h = self.dim, self.size, self.h
        dirs = [(1,)] if n == 1 else _DIRECTIONS_2D
        wins = [self._windows(d) for d in dirs]
        offs = np.stack([w[2] for w in wins], axis=1)
        if n == 1:
            choice = np.zeros((Nn, 1), dtype=int)
            cost = offs
        else:
            combos = [
                c
                for c in combinations(range(len(dirs)), 3)
                if all(dirs[p][0] * dirs[q][1] != dirs[p][1] * dirs[q][0] for p, q in combinations(c, 2))
            ]
            pen = np.array([sum(abs(x) for x in d) for d in dirs]) * 1e-3
            combos = np.array(combos)
            cost = (offs + pen)[:, combos].sum(axis=2)
            best = np.argmin(cost, axis=1)
            choice = combos[best]
            cost = cost[np.arange(Nn), best][:, None]
        if not np.all(np.isfinite(cost)):
            raise ValueError("no stencil fits at some lattice nodes; increase k")

        table1, table2 = {}, {}
        for st in range(-5, 1):
            table1[(st, 6)] = _fd_weights(range(st, st + 6), 1)
            table2[(st, 6)] = _fd_weights(range(st, st + 6), 2)
        table1[(-2, 5)] = np.append(_fd_weights(range(-2, 3), 1), 0.0)
        table2[(-2, 5)] = np.append(_fd_weights(range(-2, 3), 2), 0.0)

        slots = []
        for a in range(choice.shape[1]):
            dv = np.array(dirs)[choice[:, a]]
            start = np.stack([w[0] for w in wins], axis=1)[np.arange(Nn), choice[:, a]]
            length = np.stack([w[1] for w in wins], axis=1)[np.arange(Nn), choice[:, a]]
            steps = start[:, None] + np.arange(6)[None, :]
            steps = np.where(steps - start[:, None] < length[:, None], steps, start[:, None])
            J = self.lattice[:, None, :] + steps[:, :, None] * dv[:, None, :]
            cols = self._lookup(J.reshape(-1, n)).reshape(Nn, 6)
            if np.any(cols < 0):
                raise ValueError("stencil left the lattice")
            c1 = np.empty((Nn, 6))
            c2 = np.empty((Nn, 6))
            for key in table1:
                m = (start == key[0]) & (length == key[1])
                c1[m] = table1[key]
                c2[m] = table2[key]
            slots.append((dv.astype(float), cols, c1 / h, c2 / h**2))

        rows = np.repeat(np.arange(Nn), 6)

        def combine(mult, which):
            rr, cc, vv = [], [], []
            for a, slot in enumerate(slots):
                coef = slot[2] if which == 1 else slot[3]
                rr.append(rows)
                cc.append(slot[1].ravel())
                vv.append((mult[:, a][:, None] * coef).ravel())
            m = sp.csr_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(Nn, Nn))
            m.sum_duplicates()
            return m

        if n == 1:
            one = np.ones((Nn, 1))
            return [combine(one, 1)], [[combine(one, 2)]]
        D = np.stack([s[0] for s in slots], axis=1)  # (N, 3, 2)
        inv1 = np.linalg.inv(D[:, :2, :])
        m1 = np.concatenate([inv1, np.zeros((Nn, 2, 1))], axis=2)  # grad_i = sum_a inv1[i, a] D1_a
        grad = [combine(m1[:, i, :], 1) for i in range(2)]
        Q = np.stack([D[:, :, 0] ** 2, 2 * D[:, :, 0] * D[:, :, 1], D[:, :, 1] ** 2], axis=2)
        inv2 = np.linalg.inv(Q)
        h00, h01, h11 = (combine(inv2[:, e, :], 2) for e in range(3))
        return grad, [[h00, h01], [h01, h11]]

    # closed-form data of the canonical potential -------------------------
    @cached_property
    def canonical(self):
        """``(u_P, G_P, w_P)`` at the nodes."""
        ell = self.ell
        N = self.polytope.normals_array
        with np.errstate(divide="ignore", invalid="ignore"):
            ulogu = np.where(ell > 0, ell * np.log(np.where(ell > 0, ell, 1.0)), 0.0)
        uP = ulogu.sum(axis=1)
        m = len(N)
        others = np.ones((len(ell), m))
        for i in range(m):
            others[:, i] = np.prod(np.delete(ell, i, axis=1), axis=1)
        if self.dim == 1:
            T = others @ (N[:, 0] ** 2)
            G = (np.prod(ell, axis=1) / T)[:, None, None]
        else:
            S = np.einsum("ni,ia,ib->nab", others, N, N)
            T = np.zeros(len(ell))
            for i, j in combinations(range(m), 2):
                dij = N[i, 0] * N[j, 1] - N[i, 1] * N[j, 0]
                T += dij**2 * np.prod(np.delete(ell, [i, j], axis=1), axis=1)
            adj = np.empty_like(S)
            adj[:, 0, 0] = S[:, 1, 1]
            adj[:, 1, 1] = S[:, 0, 0]
            adj[:, 0, 1] = adj[:, 1, 0] = -S[:, 0, 1]
            G = adj / T[:, None, None]
        wP = (1.0 - ell).sum(axis=1) + np.log(T)
        return uP, G, wP


@lru_cache(maxsize=8)
def symplectic_grid(P: Polytope, k: int) -> SymplecticGrid:
    return SymplecticGrid(P, k)


@dataclass(frozen=True, eq=False)
class SymplecticMetric:
    """Immutable metric ``u = u_P + v`` on a :class:`SymplecticGrid`."""

    grid: SymplecticGrid
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise ValueError("v does not match the grid")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def polytope(self) -> Polytope:
        return self.grid.polytope

    @property
    def volume(self) -> float:
        """Total mass of the quadrature, used as V so discrete identities hold exactly."""
        return self.grid.total_mass

    def with_v(self, v) -> "SymplecticMetric":
        return SymplecticMetric(self.grid, v)

    @cached_property
    def u(self) -> np.ndarray:
        return self.grid.canonical[0] + self.v

    @cached_property
    def grad_v(self) -> np.ndarray:
        g, _ = self.grid.operators
        return np.stack([d @ self.v for d in g], axis=-1)

    @cached_property
    def hess_v(self) -> np.ndarray:
        _, H = self.grid.operators
        n = self.grid.dim
        out = np.empty((self.grid.size, n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = H[i][j] @ self.v
        return out

    @cached_property
    def relative_hessian(self) -> np.ndarray:
        """``A = I + G_P D^2 v``; ``D^2 u = D^2 u_P A`` is positive iff A has positive spectrum."""
        G = self.grid.canonical[1]
        return np.eye(self.grid.dim)[None] + G @ self.hess_v

    @cached_property
    def det_relative(self) -> np.ndarray:
        A = self.relative_hessian
        if self.grid.dim == 1:
            return A[:, 0, 0].copy()
        return A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]

    def is_convex(self) -> bool:
        A = self.relative_hessian
        tr = np.trace(A, axis1=1, axis2=2)
        return bool(np.all(self.det_relative > 0) and np.all(tr > 0))

    @cached_property
    def w(self) -> np.ndarray:
        if not self.is_convex():
            bad = int(np.sum(self.det_relative <= 0))
            raise NonConvex(f"symplectic potential not convex at {bad} nodes")
        y = self.grid.nodes
        wP = self.grid.canonical[2]
        return wP + self.v - np.einsum("ni,ni->n", y, self.grad_v) + np.log(self.det_relative)

    @cached_property
    def log_Z(self) -> float:
        return float(logsumexp(self.w, b=self.grid.weights))

    @cached_property
    def rho(self) -> np.ndarray:
        return math.log(self.volume) - self.log_Z + self.w

    @property
    def log_c(self) -> float:
        return math.log(self.volume) - self.log_Z

    @cached_property
    def canonical_weights(self) -> np.ndarray:
        """``q_j = w_j e^{w_j} / Z``: quadrature masses of the canonical measure."""
        return self.grid.weights * np.exp(self.w - self.log_Z)

    def mean(self, f) -> float:
        return float(np.dot(self.grid.weights, f)) / self.volume

    # linearization ----------------------------------------------------------
    def linearized_w(self) -> sp.csr_matrix:
        """Sparse matrix of ``dv -> dw = dv - <y, grad dv> + tr(A^{-1} G_P D^2 dv)``."""
        g, H = self.grid.operators
        n = self.grid.dim
        y = self.grid.nodes
        G = self.grid.canonical[1]
        A = self.relative_hessian
        K = np.linalg.solve(A, G)  # A^{-1} G_P = (D^2 u)^{-1}
        L = sp.identity(self.grid.size, format="csr")
        for i in range(n):
            L = L - sp.diags(y[:, i]) @ g[i]
            for j in range(n):
                L = L + sp.diags(K[:, j, i]) @ H[i][j]
        return L.tocsr()

    # conversions ------------------------------------------------------------
    def gradient_map(self) -> np.ndarray:
        """``x = grad u`` at interior nodes (infinite on facets)."""
        ell = self.grid.ell
        N = self.polytope.normals_array
        with np.errstate(divide="ignore", invalid="ignore"):
            gP = (1.0 + np.log(ell)) @ N
        return gP + self.grad_v

    @cached_property
    def inverse_hessian(self) -> np.ndarray:
        """``(D^2 u)^{-1} = A^{-1} G_P``, bounded and degenerate on facets."""
        return np.linalg.solve(self.relative_hessian, self.grid.canonical[1])

    def potential_at(self, x) -> np.ndarray:
        """Kahler potential ``phi(x) = sup_y <x, y> - u(y)``.

        The discrete maximizer over the nodes is refined by the exact
        transform of the local quadratic model of ``u`` at that node.
        """
        x = np.asarray(x, dtype=float).reshape(-1, self.grid.dim)
        y = self.grid.nodes
        u = self.u
        out = np.empty(len(x))
        arg = np.empty(len(x), dtype=int)
        for s in range(0, len(x), 512):
            vals = x[s : s + 512] @ y.T - u[None, :]
            arg[s : s + 512] = np.argmax(vals, axis=1)
            out[s : s + 512] = vals[np.arange(len(vals)), arg[s : s + 512]]
        if self.grid.dim == 1:
            return self._potential_1d(x[:, 0], y[arg, 0])
        interior = ~self.grid.boundary_mask[arg]
        j = arg[interior]
        r = x[interior] - self.gradient_map()[j]
        out[interior] += 0.5 * np.einsum("ni,nij,nj->n", r, self.inverse_hessian[j], r)
        return out

    def _potential_1d(self, x, y0):
        # Newton on <x, y> - u(y) with u = u_P + spline(v); u is strictly convex
        from scipy.interpolate import CubicSpline

        spl = CubicSpline(self.grid.nodes[:, 0], self.v)
        N = self.polytope.normals_array[:, 0]
        lo, hi = float(self.grid.nodes[0, 0]), float(self.grid.nodes[-1, 0])
        y = np.clip(y0, lo + 1e-300, hi)
        y = np.where(y <= lo, lo + 0.5 * self.grid.h, y)
        y = np.where(y >= hi, hi - 0.5 * self.grid.h, y)
        for _ in range(100):
            ell = 1.0 + np.outer(y, N)
            du = (1.0 + np.log(ell)) @ N + spl(y, 1)
            d2u = (1.0 / ell) @ (N**2) + spl(y, 2)
            step = (x - du) / d2u
            yn = y + step
            # stay strictly inside by at most halving the distance to the edge
            yn = np.where(yn <= lo, 0.5 * (y + lo), yn)
            yn = np.where(yn >= hi, 0.5 * (y + hi), yn)
            done = np.max(np.abs(yn - y)) < 1e-15
            y = yn
            if done:
                break
        ell = 1.0 + np.outer(y, N)
        u = np.sum(ell * np.log(ell), axis=1) + spl(y)
        return x * y - u

    def to_toric(self, grid):
        """Sample on an x-space :class:`~kstab.metric.GridSpec` as a ToricMetric."""
        from .metric import ToricMetric

        return ToricMetric.from_potential(self.polytope, grid, self.potential_at)


def energies(M: SymplecticMetric, baseline: SymplecticMetric):
    """Energy functionals of ``M`` relative to ``baseline`` (same grid).

    The Mabuchi energy uses ``M = D - (1/V) int rho omega^n``, normalized to
    vanish at the baseline.
    """
    from .metric import EnergyReport

    if M.grid is not baseline.grid:
        raise ValueError("metric and baseline must share the grid")
    rho = M.rho
    e = np.exp(rho)
    E = -M.mean(M.v - baseline.v)
    L = -(M.log_Z - baseline.log_Z)
    D = L - E
    return EnergyReport(
        E=E,
        L=L,
        D=D,
        ricci_calabi=M.mean((e - 1.0) ** 2),
        mabuchi=D - M.mean(rho) + baseline.mean(baseline.rho),
        h_functional=M.mean(rho * e),
        normalization_const=math.exp(M.log_c),
    )


# ---------------------------------------------------------------------------
# initial data


def _lse_dual(points: np.ndarray, logc: np.ndarray, y: np.ndarray, tol=1e-13) -> np.ndarray:
    """``sup_x <x, y> - log sum_a c_a e^{<a, x>}`` for targets in the interior of conv(points)."""
    d = points.shape[1]
    x = np.zeros((len(y), d))

    def f(x, y=y):
        lg = x @ points.T + logc
        lse = logsumexp(lg, axis=1)
        p = np.exp(lg - lse[:, None])
        mean = p @ points
        dev = points[None] - mean[:, None]
        cov = np.einsum("nk,nki,nkj->nij", p, dev, dev)
        return np.einsum("ni,ni->n", x, y) - lse, y - mean, cov

    val, r, H = f(x)
    eye = np.eye(d)
    for _ in range(200):
        act = np.max(np.abs(r), axis=1) >= tol
        if not np.any(act):
            break
        # small Levenberg shift: the covariance underflows next to the facets
        Ha = H[act] + 1e-14 * (1.0 + np.trace(H[act], axis1=1, axis2=2))[:, None, None] * eye
        step = np.linalg.solve(Ha, r[act][..., None])[..., 0]
        xa, va = x[act], val[act]
        ya = y[act]
        lam = np.ones(len(xa))
        for _ in range(60):
            xn = xa + lam[:, None] * step
            vn, rn, Hn = f(xn, ya)
            worse = vn < va - 1e-15 * (1 + np.abs(va))
            if not np.any(worse):
                break
            lam[worse] *= 0.5
        x[act], val[act], r[act], H[act] = xn, vn, rn, Hn
    return val


def lattice_potential_dual(P: Polytope, y: np.ndarray, log_coeffs=None) -> np.ndarray:
    """Symplectic potential of ``phi(x) = log sum_{a in P cap Z^n} c_a e^{<a, x>}``.

    Equals ``min sum_a p_a log(p_a / c_a)`` over probability vectors with mean
    ``y``; on a face only the lattice points of that face contribute.
    """
    pts = lattice_points(P, 1).astype(float)
    logc = np.zeros(len(pts)) if log_coeffs is None else np.asarray(log_coeffs, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1, P.dim)
    N = P.normals_array
    ell = y @ N.T + 1.0
    tight = np.abs(ell) < 1e-12
    out = np.empty(len(y))
    keys = {}
    for r in range(len(y)):
        keys.setdefault(tuple(np.nonzero(tight[r])[0]), []).append(r)
    for key, rows in keys.items():
        rows = np.array(rows)
        mask = np.ones(len(pts), dtype=bool)
        for i in key:
            mask &= np.abs(pts @ N[i] + 1.0) < 1e-12
        sub, sublogc = pts[mask], logc[mask]
        if len(sub) == 1:
            out[rows] = -sublogc[0]
            continue
        if not key:
            out[rows] = _lse_dual(sub, sublogc, y[rows])
            continue
        # a proper face: parametrize its affine hull
        base = sub[0]
        basis = sub[1:] - base
        _, s, Vt = np.linalg.svd(basis)
        rank = int(np.sum(s > 1e-9))
        B = Vt[:rank]
        out[rows] = _lse_dual((sub - base) @ B.T, sublogc, (y[rows] - base) @ B.T)
    return out


def from_lattice_coefficients(grid: SymplecticGrid, log_coeffs=None) -> SymplecticMetric:
    """Metric of ``log sum c_a e^{<a, x>}``; ``None`` gives the reference potential."""
    u = lattice_potential_dual(grid.polytope, grid.nodes, log_coeffs)
    return SymplecticMetric(grid, u - grid.canonical[0])


def reference(grid: SymplecticGrid) -> SymplecticMetric:
    return from_lattice_coefficients(grid)
