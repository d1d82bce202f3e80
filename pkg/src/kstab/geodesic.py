"""Geodesics, rays and Duistermaat-Heckman measures in the toric picture.

Geodesics between torus-invariant metrics are affine in the symplectic
potential, so a ray is ``u_t = u_0 + t g`` with a convex direction ``g`` on
P.  Distances are ``d_p(u_0, u_1) = (avg_P |u_1 - u_0|^p)^{1/p}``.  The
Kahler potential of a point on a ray is the Legendre transform of ``u_t``;
for a PL direction it is an inf-convolution and is computed exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import logsumexp

from .errors import DomainTooSmall, NotCauchy, OrderViolated
from .metric import ReferencePotential, ToricMetric
from .na import PLConvex, mean as pl_mean
from .symplectic import SymplecticGrid, SymplecticMetric

CAUCHY_RATIO = 0.1
CAUCHY_FLOOR = 1e-3
DH_BINS = 256


def _weights(w):
    return np.asarray(w.weights if hasattr(w, "weights") else w, dtype=float)


# ---------------------------------------------------------------------------
# distances and segments


def dp_distance(u0, u1, p: float, weights) -> float:
    """``[(1/V) int_P |u1 - u0|^p]^{1/p}`` with quadrature weights on the nodes."""
    if p < 1:
        raise ValueError("p must be >= 1")
    w = _weights(weights)
    d = np.abs(np.asarray(u1, dtype=float) - np.asarray(u0, dtype=float))
    return float((np.dot(w, d**p) / w.sum()) ** (1.0 / p))


def segment(u0, u1, s: float) -> np.ndarray:
    return (1.0 - s) * np.asarray(u0, dtype=float) + s * np.asarray(u1, dtype=float)


def lidskii_check(u, v, w, p: float, weights) -> float:
    """``d_p(u, w)^p - d_p(u, v)^p - d_p(v, w)^p`` for ordered ``u >= v >= w``.

    Non-negative because ``s -> s^p`` is superadditive on ``[0, inf)``.  The
    unpowered version ``d_p(u, w) - d_p(u, v) - d_p(v, w)`` fails for
    ``p > 1`` (two increments with disjoint supports).
    """
    u, v, w = (np.asarray(a, dtype=float) for a in (u, v, w))
    if np.any(u < v - 1e-12) or np.any(v < w - 1e-12):
        raise OrderViolated("need u >= v >= w at every node")
    return dp_distance(u, w, p, weights) ** p - dp_distance(u, v, p, weights) ** p - dp_distance(v, w, p, weights) ** p


# ---------------------------------------------------------------------------
# rays


@dataclass(frozen=True, eq=False)
class SymplecticPath:
    """``u_t = u0 + t g`` on the nodes of a symplectic grid."""

    grid: SymplecticGrid
    u0: np.ndarray
    g: np.ndarray
    t_range: tuple = (0.0, math.inf)
    diagnostics: dict = field(default_factory=dict)

    @property
    def polytope(self):
        return self.grid.polytope

    def at(self, t: float) -> np.ndarray:
        return self.u0 + t * self.g

    def metric(self, t: float) -> SymplecticMetric:
        return SymplecticMetric(self.grid, self.at(t) - self.grid.canonical[0])

    def is_convex(self) -> bool:
        """Convexity at the endpoints and midpoint (``t = 1`` stands in for an unbounded end)."""
        lo, hi = self.t_range
        hi = lo + 1.0 if not math.isfinite(hi) else hi
        if not all(self.metric(t).is_convex() for t in (lo, 0.5 * (lo + hi), hi)):
            return False
        return self.direction_convex()

    def direction_convex(self, tol: float = 1e-8) -> bool:
        """Discrete convexity of ``g`` along every stencil direction of the grid."""
        _, H = self.grid.operators
        n = self.grid.dim
        Hg = np.empty((self.grid.size, n, n))
        for i in range(n):
            for j in range(n):
                Hg[:, i, j] = H[i][j] @ self.g
        ev = np.linalg.eigvalsh(Hg)
        return bool(np.all(ev[:, 0] >= -tol * max(1.0, float(np.max(np.abs(ev))))))

    def velocity_dh(self) -> "DHMeasure":
        """DH measure of the Kahler velocity ``-g``."""
        return dh_measure(-self.g, self.grid.weights)


def ray_from_flow(trace) -> SymplecticPath:
    """Asymptotic ray of a flow from its snapshots at geometric times.

    The direction is the secant ``(u_{t_J} - u_{t_{J-1}}) / (t_J - t_{J-1})``
    through the last two snapshots.  The offset ``u_t - t g`` converges along
    the flow, so the secant converges much faster than the quotient
    ``(u_{t_J} - u_0) / t_J``; the quotients are kept as diagnostics.

    Raises
    ------
    NotCauchy
        if the last two secants differ by more than ``0.1 max|g|``
        (with an absolute floor of 1e-3 for rays that are numerically zero).
    """
    snaps = [(t, M) for t, M in trace.snapshots if t > 0]
    if len(snaps) < 4:
        raise ValueError("need at least 4 snapshots at positive times")
    M0 = trace.initial
    u0 = M0.u
    times = [t for t, _ in snaps]
    us = [M.u for _, M in snaps]
    quotients = [(u - u0) / t for t, u in zip(times, us)]
    secants = [(us[i] - us[i - 1]) / (times[i] - times[i - 1]) for i in range(1, len(us))]
    g = secants[-1]
    cauchy = float(np.max(np.abs(secants[-1] - secants[-2])))
    scale = float(np.max(np.abs(g)))
    grid = M0.grid
    w = grid.weights
    diag = {
        "times": times,
        "cauchy": cauchy,
        "max_abs_g": scale,
        "e_slope": -float(np.dot(w, g) / w.sum()),
        "quotient_cauchy": float(np.max(np.abs(quotients[-1] - quotients[-2]))),
        "quotient_gap": float(np.max(np.abs(quotients[-1] - g))),
        "quotients": quotients,
    }
    if cauchy > max(CAUCHY_RATIO * scale, CAUCHY_FLOOR):
        raise NotCauchy(f"secant directions differ by {cauchy:.3g} (max|g| = {scale:.3g})")
    return SymplecticPath(grid, u0, g, (0.0, math.inf), diag)


# ---------------------------------------------------------------------------
# Duistermaat-Heckman measures


@dataclass(frozen=True, eq=False)
class DHMeasure:
    """Pushforward of a probability measure on P under a field.

    ``values`` and ``masses`` are the raw node samples (masses sum to 1); the
    histogram is for export and plotting only.
    """

    values: np.ndarray
    masses: np.ndarray
    edges: np.ndarray
    hist: np.ndarray

    @property
    def support(self):
        return float(self.values.min()), float(self.values.max())

    @property
    def samples(self):
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        return list(zip(centers.tolist(), self.hist.tolist()))

    def moment(self, p: float) -> float:
        """``int |lambda|^p dDH``."""
        return float(np.dot(self.masses, np.abs(self.values) ** p))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lo", "hi", "mass"])
            for lo, hi, m in zip(self.edges[:-1], self.edges[1:], self.hist):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(m))])


def dh_measure(values, weights, bins: int = DH_BINS) -> DHMeasure:
    """DH measure of the field ``values`` against the nodal ``weights`` (normalized)."""
    lam = np.asarray(values, dtype=float).reshape(-1)
    w = _weights(weights)
    if not np.all(np.isfinite(lam)):
        raise ValueError("field must be bounded")
    m = w / w.sum()
    lo, hi = float(lam.min()), float(lam.max())
    if hi - lo <= 1e-14 * max(1.0, abs(lo)):
        edges = np.array([lo, hi if hi > lo else lo])
        hist = np.array([1.0])
    else:
        hist, edges = np.histogram(lam, bins=max(bins, DH_BINS), range=(lo, hi), weights=m)
    return DHMeasure(lam, m, edges, hist)


def virtual_slope_F(dh: DHMeasure) -> float:
    """``-log int e^{-lambda} dDH``."""
    return -float(logsumexp(-dh.values, b=dh.masses))


def pl_dh_measure(f: PLConvex, order: int = 10) -> DHMeasure:
    """DH measure of the Kahler velocity ``-f`` of the ray ``u_0 + t f``, sampled on Gauss nodes of the cells of ``f``."""
    from .na import quadrature_nodes

    x, w = quadrature_nodes(f, order)
    return dh_measure(-f(x), w)


# ---------------------------------------------------------------------------
# Kahler potentials along rays


class _Baseline:
    """Value, gradient and Hessian of a baseline Kahler potential anywhere in R^n."""

    def __init__(self, P, baseline=None):
        self.ref = ReferencePotential(P)
        self.metric = baseline if isinstance(baseline, ToricMetric) and np.any(baseline.psi != 0) else None

    def __call__(self, x):
        v, g, h = self.ref.derivatives(x)
        if self.metric is None:
            return v, g, h
        # psi decays at infinity; outside the box it is extended by its nearest value
        M = self.metric
        R = M.grid.box_radius
        inside = np.all(np.abs(x) <= R, axis=1)
        xc = np.clip(x, -R, R)
        vv, gg, hh = M.evaluate(xc)
        v0, g0, h0 = self.ref.derivatives(xc)
        v = v + (vv - v0)
        g = g + np.where(inside[:, None], gg - g0, 0.0)
        h = h + np.where(inside[:, None, None], hh - h0, 0.0)
        return v, g, h

    def directional(self, x, d):
        """Value and first two derivatives along the direction ``d``."""
        if self.metric is not None:
            v, g, h = self(x)
            return v, g @ d, np.einsum("i,nij,j->n", d, h, d)
        logits = x @ self.ref.lattice.T
        v = logsumexp(logits, axis=1)
        p = np.exp(logits - v[:, None])
        proj = self.ref.lattice @ d
        m1 = p @ proj
        m2 = p @ (proj * proj)
        return v, m1, np.maximum(m2 - m1 * m1, 0.0)


def _solve_gradient(base: _Baseline, c, x0, tol=1e-13):
    """``xi`` with ``grad phi_b(xi) = c`` (damped Newton on the convex dual)."""
    xi = np.array(x0, dtype=float).reshape(1, -1)
    c = np.asarray(c, dtype=float)
    for _ in range(200):
        v, g, h = base(xi)
        r = g[0] - c
        if np.max(np.abs(r)) < tol:
            break
        step = np.linalg.solve(h[0], r)
        lam = 1.0
        obj = v[0] - xi[0] @ c
        while lam > 1e-12:
            xn = xi - lam * step
            vn, _, _ = base(xn)
            if vn[0] - xn[0] @ c <= obj + 1e-15 * abs(obj):
                break
            lam *= 0.5
        xi = xn
    return xi[0]


def pl_ray_potential(f: PLConvex, t: float, x: np.ndarray, baseline=None) -> np.ndarray:
    """Kahler potential of ``u_b + t f`` at points ``x``, exactly.

    It equals ``min_{lam in simplex} phi_b(x - t sum lam_j a_j) - t sum lam_j b_j``.
    The minimum is taken face by face over the simplex of pieces; on faces
    with ``n + 1`` affinely independent slopes the stationary point has a
    closed form, on edges (n = 2) a safeguarded Newton iteration is used.
    Every candidate is a feasible value, so the smallest one is the minimum.
    """
    P = f.polytope
    n = P.dim
    base = _Baseline(P, baseline)
    A = f.slopes
    b = f.intercepts
    x = np.asarray(x, dtype=float).reshape(-1, n)
    if t == 0:
        return base(x)[0]
    best = np.full(len(x), np.inf)
    J = len(A)
    for m in range(1, min(J, n + 1) + 1):
        for S in combinations(range(J), m):
            S = list(S)
            aS, bS = A[S], b[S]
            if m == 1:
                v, _, _ = base(x - t * aS[0])
                best = np.minimum(best, v - t * bS[0])
                continue
            if m == n + 1:
                Mx = np.vstack([aS.T, np.ones(m)])
                if abs(np.linalg.det(Mx)) < 1e-12:
                    continue
                Minv = np.linalg.inv(Mx)
                c = -(Minv[:, :n].T @ bS)
                if not np.all(P.contains(c[None], tol=-1e-12)):
                    continue
                xi = _solve_gradient(base, c, np.zeros(n))
                vxi, _, _ = base(xi[None])
                z = x - xi
                lam = (Minv @ np.vstack([z.T / t, np.ones(len(x))])).T
                ok = np.all(lam > 0, axis=1)
                cand = vxi[0] - t * lam @ bS
                best = np.where(ok, np.minimum(best, cand), best)
                continue
            # an edge of the simplex in dimension 2: minimize over s in (0, 1)
            d = aS[1] - aS[0]
            db = bS[1] - bS[0]
            if np.linalg.norm(d) < 1e-14:
                continue

            def slope(s, rows):
                _, d1, d2 = base.directional(x[rows] - t * (aS[0] + s[:, None] * d), d)
                return -t * d1 - t * db, t * t * d2

            # an interior minimizer needs the slope to change sign on (0, 1)
            g0, _ = slope(np.zeros(len(x)), slice(None))
            g1, _ = slope(np.ones(len(x)), slice(None))
            rows = np.nonzero((g0 < 0) & (g1 > 0))[0]
            if len(rows) == 0:
                continue
            s = np.full(len(rows), 0.5)
            lo = np.zeros(len(rows))
            hi = np.ones(len(rows))
            active = np.arange(len(rows))
            for _ in range(100):
                d1, d2 = slope(s[active], rows[active])
                lo[active] = np.where(d1 < 0, s[active], lo[active])
                hi[active] = np.where(d1 > 0, s[active], hi[active])
                sn = s[active] - d1 / np.maximum(d2, 1e-300)
                bad = (sn <= lo[active]) | (sn >= hi[active]) | ~np.isfinite(sn)
                sn = np.where(bad, 0.5 * (lo[active] + hi[active]), sn)
                moved = np.abs(sn - s[active])
                s[active] = sn
                active = active[moved > 1e-15]
                if len(active) == 0:
                    break
            v, _, _ = base(x[rows] - t * (aS[0] + s[:, None] * d))
            best[rows] = np.minimum(best[rows], v - t * (bS[0] + s * db))
    return best


def _log_mean_exp_neg(phi, h, n, V):
    return float(logsumexp(-phi)) + n * math.log(h) - math.log(V)


@dataclass
class RadialEnergies:
    t: np.ndarray
    E: np.ndarray
    L: np.ndarray
    D: np.ndarray
    slope_E: float
    slope_L: float
    slope_D: float
    secant_L: float
    d_second_differences: np.ndarray


def _fit_slope(t, y):
    """Slope ``a`` of ``y = a t + b log t + c + d / t``, the large-``t`` expansion of L along a ray.

    With fewer than five samples the ``1/t`` term is dropped, and with fewer
    than three the secant through the end points is returned.
    """
    t = np.asarray(t, dtype=float)
    if len(t) >= 3 and np.all(t > 0):
        cols = [t, np.log(t), np.ones_like(t)]
        if len(t) >= 5:
            cols.append(1.0 / t)
        return float(np.linalg.lstsq(np.stack(cols, axis=1), y, rcond=None)[0][0])
    return float((y[-1] - y[0]) / (t[-1] - t[0]))


def _second_differences(t, y):
    t = np.asarray(t, dtype=float)
    out = []
    for i in range(1, len(t) - 1):
        a = (y[i] - y[i - 1]) / (t[i] - t[i - 1])
        b = (y[i + 1] - y[i]) / (t[i + 1] - t[i])
        out.append(b - a)
    return np.array(out)


def radial_energies(ray, baseline=None, t_samples=(8.0, 16.0, 32.0, 64.0, 128.0), h: float = 0.25, margin: float = 30.0):
    """Energies along a ray and their tail slopes.

    ``ray`` is a :class:`~kstab.na.PLConvex` ``f`` (ray ``u_b + t f`` from
    the baseline, default the reference potential) or a
    :class:`SymplecticPath`.  For each ``t`` the Kahler potential is rebuilt
    in log coordinates on a box that grows linearly with ``t``, and
    ``L = -log (1/V) int e^{-phi^t} dx`` is integrated by the trapezoidal
    rule.  ``E`` uses the exact affine formula ``E(u_t) = E(u_0) - t avg g``.

    The L slope is fitted with ``log t`` and ``1/t`` terms, which capture the
    Laplace corrections of the integral.
    """
    t = np.asarray(t_samples, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_samples must be increasing")
    if isinstance(ray, PLConvex):
        P = ray.polytope
        A = ray.slopes
        avg = float(pl_mean(ray))
        lo_dir, hi_dir = A.min(axis=0), A.max(axis=0)

        def potential(ti, x):
            return pl_ray_potential(ray, ti, x, baseline)

    elif isinstance(ray, SymplecticPath):
        P = ray.polytope
        w = ray.grid.weights
        avg = float(np.dot(w, ray.g) / w.sum())
        interior = ~ray.grid.boundary_mask
        Dg, _ = ray.grid.operators
        grad = np.stack([d @ ray.g for d in Dg], axis=-1)[interior]
        lo_dir, hi_dir = grad.min(axis=0), grad.max(axis=0)

        def potential(ti, x):
            return ray.metric(ti).potential_at(x)

    else:
        raise TypeError("ray must be a PLConvex or a SymplecticPath")
    n = P.dim
    V = float(P.volume)

    def L_at(ti):
        lo = ti * lo_dir - margin
        hi = ti * hi_dir + margin
        axes = [np.arange(lo[i], hi[i] + h, h) for i in range(n)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        phi = np.concatenate([potential(ti, X[s : s + 65536]) for s in range(0, len(X), 65536)])
        edge = np.zeros(len(X), dtype=bool)
        for i, ax in enumerate(axes):
            xi = X[:, i]
            edge |= (xi <= ax[0] + 0.5 * h) | (xi >= ax[-1] - 0.5 * h)
        lse = logsumexp(-phi)
        if np.exp(logsumexp(-phi[edge]) - lse) > 1e-10:
            raise DomainTooSmall(f"mass of e^(-phi) reaches the edge of the box at t={ti}")
        return -_log_mean_exp_neg(phi, h, n, V)

    L0 = L_at(0.0)
    L = np.array([L_at(ti) - L0 for ti in t])
    E = -t * avg
    D = L - E
    return RadialEnergies(
        t=t,
        E=E,
        L=L,
        D=D,
        slope_E=-avg,
        slope_L=_fit_slope(t, L),
        slope_D=_fit_slope(t, D),
        secant_L=float((L[-1] - L[-2]) / (t[-1] - t[-2])) if len(t) > 1 else float("nan"),
        d_second_differences=_second_differences(t, D),
    )


# ---------------------------------------------------------------------------
# diagnostics


def pl_approximability_gap(path: SymplecticPath, pieces: int = 4, rng_seed: int = 0) -> float:
    """Weighted L^2 distance from ``g`` to the best fit ``max_j <a_j, y> + b_j`` with ``pieces`` pieces.

    Fitted by alternating assignment and least squares from the best affine
    fit; reported as data only.
    """
    y = path.grid.nodes
    w = path.grid.weights
    g = path.g
    X = np.hstack([y, np.ones((len(y), 1))])
    sw = np.sqrt(w)
    coef = np.linalg.lstsq(X * sw[:, None], g * sw, rcond=None)[0]
    rng = np.random.default_rng(rng_seed)
    C = np.array([coef + 0.1 * rng.standard_normal(coef.shape) for _ in range(pieces)])
    C[0] = coef
    for _ in range(100):
        act = np.argmax(X @ C.T, axis=1)
        newC = C.copy()
        for j in range(pieces):
            sel = act == j
            if sel.sum() > X.shape[1]:
                newC[j] = np.linalg.lstsq(X[sel] * sw[sel, None], g[sel] * sw[sel], rcond=None)[0]
        if np.allclose(newC, C, atol=1e-14):
            break
        C = newC
    fit = np.max(X @ C.T, axis=1)
    return float(np.sqrt(np.dot(w, (fit - g) ** 2) / w.sum()))
