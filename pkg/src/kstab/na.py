"""Non-Archimedean invariants of toric test configurations.

A toric test configuration is a piecewise-linear convex function
``f(y) = max_j <a_j, y> + b_j`` on the polytope.  The invariants are

    E^NA = -avg_P f            L^NA = -f(0)         D^NA = avg_P f - f(0)
    ||f||_p = (avg_P |f - avg_P f|^p)^{1/p}
    F(f) = -log avg_P e^f      H(f) = f(0) + F(f)

where ``avg_P`` is the mean over the uniform probability measure on P.
Integrals of ``f`` and ``f^2`` are exact rationals when the coefficients are,
computed on the cells of affinity of ``f`` (P clipped by the half-planes
where one piece dominates).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm

from .errors import DenominatorMismatch, TrivialConfiguration
from .polytope import Polytope, lattice_points

DEFAULT_P = (1, 2)
_AREA_EPS = 1e-13


def _num(x):
    if isinstance(x, (Fraction, int, np.integer)):
        return Fraction(int(x)) if not isinstance(x, Fraction) else x
    if isinstance(x, str):
        return Fraction(x)
    return float(x)


def _dot(a, y):
    return sum(ai * yi for ai, yi in zip(a, y))


# ---------------------------------------------------------------------------
# convex polygon clipping, generic in the number type


def _clip(poly, c, d):
    """Part of the convex polygon (ccw vertex list) where ``<c, y> + d >= 0``."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp, sq = _dot(c, p) + d, _dot(c, q) + d
        if sp >= 0:
            out.append(p)
        if (sp > 0 and sq < 0) or (sp < 0 and sq > 0):
            lam = sp / (sp - sq)
            out.append(tuple(pi + lam * (qi - pi) for pi, qi in zip(p, q)))
    return out


def _clip_interval(iv, c, d):
    lo, hi = iv
    if c == 0:
        return iv if d >= 0 else None
    r = -d / c
    if c > 0:
        lo = max(lo, r)
    else:
        hi = min(hi, r)
    return (lo, hi) if lo < hi else None


def _triangles(cell):
    return [(cell[0], cell[i], cell[i + 1]) for i in range(1, len(cell) - 1)]


def _tri_area(p0, p1, p2):
    return ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])) / 2


def _cell_moments(dim, cell):
    """``(int 1, int y, int y y^T)`` over a cell (interval or polygon)."""
    if dim == 1:
        a, b = cell
        return b - a, ((b * b - a * a) / 2,), (((b**3 - a**3) / 3,),)
    m0 = 0
    m1 = [0, 0]
    m2 = [[0, 0], [0, 0]]
    for p0, p1, p2 in _triangles(cell):
        A = _tri_area(p0, p1, p2)
        s = (p0[0] + p1[0] + p2[0], p0[1] + p1[1] + p2[1])
        m0 += A
        for i in range(2):
            m1[i] += A * s[i] / 3
            for j in range(2):
                m2[i][j] += A / 12 * (p0[i] * p0[j] + p1[i] * p1[j] + p2[i] * p2[j] + s[i] * s[j])
    return m0, tuple(m1), (tuple(m2[0]), tuple(m2[1]))


def _cell_size(dim, cell):
    if cell is None:
        return 0
    if dim == 1:
        return cell[1] - cell[0]
    if len(cell) < 3:
        return 0
    return sum(_tri_area(*t) for t in _triangles(cell))


# collapsed Gauss product rule on the reference triangle (0,0), (1,0), (0,1)
def _triangle_rule(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    xi, eta = np.meshgrid(x, x, indexing="ij")
    wi, we = np.meshgrid(w, w, indexing="ij")
    u = xi.ravel()
    v = (eta * (1.0 - xi)).ravel()
    return np.stack([u, v], axis=1), (wi * we * (1.0 - xi)).ravel()


def cell_rule(dim: int, cell, order: int = 10):
    """Gauss nodes and weights on one cell (weights sum to its size)."""
    if dim == 1:
        a, b = float(cell[0]), float(cell[1])
        x, w = np.polynomial.legendre.leggauss(order)
        return (0.5 * (b - a) * (x + 1.0) + a)[:, None], 0.5 * (b - a) * w
    ref, rw = _triangle_rule(order)
    nodes, weights = [], []
    for p0, p1, p2 in _triangles(cell):
        P0 = np.array([float(c) for c in p0])
        E = np.array([[float(c) for c in p1], [float(c) for c in p2]]) - P0
        A = abs(float(_tri_area(p0, p1, p2)))
        nodes.append(P0 + ref @ E)
        weights.append(2.0 * A * rw)
    return np.concatenate(nodes), np.concatenate(weights)


def _exp_divided_difference(vals) -> float:
    """Divided difference ``exp[v_0, ..., v_m]`` via the exponential of a bidiagonal matrix."""
    m = len(vals)
    B = np.diag(np.asarray(vals, dtype=float)) + np.diag(np.ones(m - 1), 1)
    return float(expm(B)[0, m - 1])


# ---------------------------------------------------------------------------
# PL convex functions


@dataclass(frozen=True, eq=False)
class PLConvex:
    """``f(y) = max_j <a_j, y> + b_j`` on a polytope.

    ``pieces`` holds ``(a, b)`` pairs with ``a`` a tuple.  Coefficients are
    Fractions when given as ints, Fractions or strings, floats otherwise.
    Build with :func:`pl_convex` to get pruning of pieces that are never
    active on P.
    """

    polytope: Polytope
    pieces: tuple

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("a PL function needs at least one piece")
        for a, _ in self.pieces:
            if len(a) != self.polytope.dim:
                raise ValueError("piece slope does not match the polytope dimension")

    @property
    def dim(self) -> int:
        return self.polytope.dim

    @property
    def exact(self) -> bool:
        return all(isinstance(b, Fraction) and all(isinstance(c, Fraction) for c in a) for a, b in self.pieces)

    @cached_property
    def slopes(self) -> np.ndarray:
        return np.array([[float(c) for c in a] for a, _ in self.pieces])

    @cached_property
    def intercepts(self) -> np.ndarray:
        return np.array([float(b) for _, b in self.pieces])

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1, self.dim)
        return np.max(y @ self.slopes.T + self.intercepts, axis=1)

    def value_at_origin(self):
        return max(b for _, b in self.pieces)

    @cached_property
    def cells(self) -> list:
        """``(j, cell)`` for every piece with a cell of positive size."""
        return _cells(self.polytope, self.pieces)

    def shifted(self, c) -> "PLConvex":
        c = _num(c)
        return PLConvex(self.polytope, tuple((a, b + c) for a, b in self.pieces))

    def scaled(self, lam) -> "PLConvex":
        lam = _num(lam)
        return PLConvex(self.polytope, tuple((tuple(lam * c for c in a), lam * b) for a, b in self.pieces))

    def to_json(self) -> str:
        def enc(x):
            return str(x) if isinstance(x, Fraction) and x.denominator != 1 else (int(x) if isinstance(x, Fraction) else x)

        return json.dumps({"pieces": [[enc(c) for c in a] + [enc(b)] for a, b in self.pieces]})


def _polytope_cell(P: Polytope, exact: bool):
    conv = (lambda x: x) if exact else float
    if P.dim == 1:
        lo, hi = sorted(v[0] for v in P.vertices)
        return (conv(lo), conv(hi))
    return [tuple(conv(c) for c in v) for v in P.vertices]


def _cells(P: Polytope, pieces) -> list:
    exact = all(isinstance(b, Fraction) and all(isinstance(c, Fraction) for c in a) for a, b in pieces)
    base = _polytope_cell(P, exact)
    total = _cell_size(P.dim, base)
    out = []
    for j, (aj, bj) in enumerate(pieces):
        cell = base
        for i, (ai, bi) in enumerate(pieces):
            if i == j or cell is None:
                continue
            c = tuple(x - z for x, z in zip(aj, ai))
            d = bj - bi
            if P.dim == 1:
                cell = _clip_interval(cell, c[0], d)
            else:
                cell = _clip(cell, c, d)
                if len(cell) < 3:
                    cell = None
        size = _cell_size(P.dim, cell)
        if cell is not None and (size > 0 if exact else size > _AREA_EPS * float(total)):
            out.append((j, cell))
    # pieces with identical affine functions share a cell; keep the first
    seen, uniq = set(), []
    for j, cell in out:
        key = (tuple(pieces[j][0]), pieces[j][1])
        if key not in seen:
            seen.add(key)
            uniq.append((j, cell))
    return uniq


def pl_convex(P: Polytope, pieces, prune: bool = True) -> PLConvex:
    """Build ``max_j <a_j, y> + b_j`` from ``[(a_j, b_j), ...]``; pieces never active on P are dropped."""
    conv = []
    for a, b in pieces:
        a = tuple(_num(c) for c in np.atleast_1d(a).tolist()) if not isinstance(a, tuple) else tuple(_num(c) for c in a)
        conv.append((a, _num(b)))
    if any(isinstance(b, float) or any(isinstance(c, float) for c in a) for a, b in conv):
        conv = [(tuple(float(c) for c in a), float(b)) for a, b in conv]
    f = PLConvex(P, tuple(conv))
    if prune:
        keep = [j for j, _ in f.cells]
        f = PLConvex(P, tuple(conv[j] for j in sorted(keep)))
    return f


def affine(P: Polytope, a, b=0) -> PLConvex:
    return pl_convex(P, [(tuple(a), b)])


def from_json(P: Polytope, text_or_obj) -> PLConvex:
    obj = json.loads(text_or_obj) if isinstance(text_or_obj, str) else text_or_obj
    rows = obj["pieces"]
    if not rows:
        raise ValueError("at least one piece is required")
    return pl_convex(P, [(tuple(r[:-1]), r[-1]) for r in rows])


# ---------------------------------------------------------------------------
# integrals


def _integrals(f: PLConvex):
    """Exact (or float) ``int f`` and ``int f^2`` over P."""
    I1 = 0
    I2 = 0
    for j, cell in f.cells:
        a, b = f.pieces[j]
        m0, m1, m2 = _cell_moments(f.dim, cell)
        I1 += _dot(a, m1) + b * m0
        aMa = sum(a[i] * m2[i][k] * a[k] for i in range(f.dim) for k in range(f.dim))
        I2 += aMa + 2 * b * _dot(a, m1) + b * b * m0
    return I1, I2


def mean(f: PLConvex):
    I1, _ = _integrals(f)
    V = f.polytope.volume if f.exact else float(f.polytope.volume)
    return I1 / V


def _log_mean_exp(f: PLConvex) -> float:
    """``log avg_P e^f`` by the closed form for exponentials of affine functions on simplices."""
    shift = float(max(f(np.array([[float(c) for c in v] for v in f.polytope.vertices]))))
    total = 0.0
    for j, cell in f.cells:
        a, b = f.pieces[j]
        val = lambda p: float(_dot(a, p) + b) - shift  # noqa: E731
        if f.dim == 1:
            lo, hi = cell
            total += float(hi - lo) * _exp_divided_difference([val((lo,)), val((hi,))])
        else:
            for p0, p1, p2 in _triangles(cell):
                A = abs(float(_tri_area(p0, p1, p2)))
                total += 2.0 * A * _exp_divided_difference([val(p0), val(p1), val(p2)])
    return shift + math.log(total / float(f.polytope.volume))


def quadrature_nodes(f: PLConvex, order: int = 10):
    """Gauss nodes and weights on the cells of ``f``; exact for polynomials on each cell up to high degree."""
    nodes, weights = [], []
    for _, cell in f.cells:
        x, w = cell_rule(f.dim, cell, order)
        nodes.append(x)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def norm_p(f: PLConvex, p: float, fbar=None) -> float:
    """``(avg_P |f - avg f|^p)^{1/p}``; cells are split where ``f = avg f`` so the rule sees no kinks."""
    if p == 2:
        I1, I2 = _integrals(f)
        V = f.polytope.volume if f.exact else float(f.polytope.volume)
        var = I2 / V - (I1 / V) ** 2
        return math.sqrt(max(float(var), 0.0))
    fbar = mean(f) if fbar is None else fbar
    total = 0.0
    for j, cell in f.cells:
        a, b = f.pieces[j]
        for sign in (1, -1):
            c = tuple(sign * x for x in a)
            d = sign * (b - fbar)
            sub = _clip_interval(cell, c[0], d) if f.dim == 1 else _clip(cell, c, d)
            if sub is None or (f.dim == 2 and len(sub) < 3):
                continue
            x, w = cell_rule(f.dim, sub, 10)
            vals = np.abs(x @ np.array([float(c) for c in a]) + float(b) - float(fbar))
            total += float(np.dot(w, vals**p))
    return (total / float(f.polytope.volume)) ** (1.0 / p)


# ---------------------------------------------------------------------------
# reports


@dataclass
class NAReport:
    ena: float
    lna: float
    dna: float
    norm_p: dict
    h_invariant: float
    F: float
    exact: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"ena": self.ena, "lna": self.lna, "dna": self.dna, "h_invariant": self.h_invariant, "F": self.F}
        d.update({f"norm_{p}": v for p, v in self.norm_p.items()})
        d.update({f"{k}_exact": v for k, v in self.exact.items()})
        return json.dumps(d, sort_keys=True)


def na_report(f: PLConvex, ps=DEFAULT_P) -> NAReport:
    avg = mean(f)
    f0 = f.value_at_origin()
    ena = -avg
    lna = -f0
    dna = lna - ena
    F = -_log_mean_exp(f)
    norms = {p: norm_p(f, p, avg) for p in ps}
    exact = {}
    if f.exact:
        exact = {"ena": str(ena), "lna": str(lna), "dna": str(dna)}
    return NAReport(
        ena=float(ena),
        lna=float(lna),
        dna=float(dna),
        norm_p=norms,
        h_invariant=float(f0) + F,
        F=F,
        exact=exact,
    )


def dna(f: PLConvex):
    return mean(f) - f.value_at_origin()


def h_invariant(f: PLConvex) -> float:
    return float(f.value_at_origin()) - _log_mean_exp(f)


def ratio(f: PLConvex) -> float:
    """``-D^NA / ||f||_2``; invariant under ``f -> lam f + c`` for ``lam > 0``."""
    n2 = norm_p(f, 2)
    if n2 <= 1e-10:
        raise TrivialConfiguration("||f||_2 vanishes; the configuration is trivial")
    return -float(dna(f)) / n2


# ---------------------------------------------------------------------------
# oracles


class LatticeOracle(NamedTuple):
    ena_k: float
    F_k: float
    norm2_k: float
    N_k: int


def weights(f: PLConvex, k: int) -> np.ndarray:
    """Integer weights ``lambda_u = -k f(u/k)`` over the lattice points of ``kP``."""
    for a, b in f.pieces:
        if not all(isinstance(c, Fraction) and c.denominator == 1 for c in a):
            raise DenominatorMismatch("lattice weights need integer slopes")
        if not isinstance(b, Fraction) or (k * b).denominator != 1:
            raise DenominatorMismatch(f"k={k} is not a multiple of the denominator of b={b}")
    pts = lattice_points(f.polytope, k).astype(np.int64)
    A = np.array([[int(c) for c in a] for a, _ in f.pieces], dtype=np.int64)
    kb = np.array([int(k * b) for _, b in f.pieces], dtype=np.int64)
    return -np.max(pts @ A.T + kb, axis=1)


def lattice_oracle(f: PLConvex, k: int) -> LatticeOracle:
    lam = weights(f, k)
    N = len(lam)
    x = lam / k
    ena = float(lam.sum()) / (k * N)
    m = -x
    F = -(float(np.max(m)) + math.log(float(np.mean(np.exp(m - np.max(m))))))
    norm2 = float(np.sqrt(np.mean((x - x.mean()) ** 2)))
    return LatticeOracle(ena, F, norm2, N)


def lna_oracle(f: PLConvex, baseline=None, t_samples=None) -> float:
    """Slope of ``L`` along the ray ``u_t = u_baseline + t f``, from the x-space potentials."""
    from .geodesic import radial_energies

    kw = {} if t_samples is None else {"t_samples": t_samples}
    return radial_energies(f, baseline, **kw).slope_L


def affine_ratio_closed_form(P: Polytope):
    """Best ratio over affine ``f`` and its slope: ``sqrt(b^T C^{-1} b)`` at ``a = -C^{-1} b``.

    ``b`` is the barycenter and ``C`` the covariance of P, both exact.
    """
    C = np.array([[float(c) for c in row] for row in P.covariance()])
    b = P.barycenter_array
    a = -np.linalg.solve(C, b)
    return math.sqrt(float(b @ np.linalg.solve(C, b))), a
