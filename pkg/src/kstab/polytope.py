"""Reflexive moment polytopes of toric Fano manifolds in dimensions 1 and 2.

A polytope is stored by its facet normals; every facet sits at lattice
distance one from the origin, ``{y : <n_i, y> >= -1}``.  Volume, barycenter and
second moments are exact rationals obtained from the fan triangulation over
the origin.  The Euclidean volume plays the role of the symplectic volume V;
the universal ``(2 pi)^n`` factor cancels in every normalized quantity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np

from .errors import NonReflexive, OriginNotInterior, Unbounded

REGISTRY = {
    "P1": [(1,), (-1,)],
    "P2": [(1, 0), (0, 1), (-1, -1)],
    "P1xP1": [(1, 0), (0, 1), (-1, 0), (0, -1)],
    "Bl1P2": [(1, 0), (0, 1), (-1, -1), (1, 1)],
    "Bl2P2": [(1, 0), (1, 1), (0, 1), (-1, 0), (-1, -1)],
}


@dataclass(frozen=True)
class Polytope:
    """Fano-normalized reflexive polytope given in H-representation.

    Use :func:`from_facets` or :func:`by_name` rather than the constructor;
    they fill in the derived exact data and validate it.
    """

    dim: int
    normals: tuple
    vertices: tuple = field(default=(), compare=False)
    volume: Fraction = field(default=Fraction(0), compare=False)
    barycenter: tuple = field(default=(), compare=False)
    second_moment: tuple = field(default=(), compare=False, repr=False)
    name: str | None = field(default=None, compare=False)

    @property
    def offsets(self):
        return (1,) * len(self.normals)

    @property
    def normals_array(self) -> np.ndarray:
        return np.array(self.normals, dtype=float)

    @property
    def vertices_array(self) -> np.ndarray:
        return np.array([[float(c) for c in v] for v in self.vertices])

    @property
    def barycenter_array(self) -> np.ndarray:
        return np.array([float(c) for c in self.barycenter])

    def covariance(self):
        """Exact covariance matrix of the uniform probability measure on P."""
        n = self.dim
        b = self.barycenter
        return tuple(
            tuple(self.second_moment[i][j] / self.volume - b[i] * b[j] for j in range(n))
            for i in range(n)
        )

    def contains(self, y, tol=1e-12) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return np.all(y @ self.normals_array.T >= -1.0 - tol, axis=1)

    def fan_triangles(self):
        """Simplices ``(0, v_i, v_{i+1})`` of the fan triangulation, as float arrays."""
        verts = self.vertices_array
        if self.dim == 1:
            return [np.array([[0.0], v]) for v in verts]
        k = len(verts)
        return [np.array([[0.0, 0.0], verts[i], verts[(i + 1) % k]]) for i in range(k)]

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "normals": [list(n) for n in self.normals]})


def _solve2(n1, n2):
    det = n1[0] * n2[1] - n1[1] * n2[0]
    if det == 0:
        return None
    # n1.y = -1, n2.y = -1
    y0 = Fraction(-n2[1] + n1[1], det)
    y1 = Fraction(-n1[0] + n2[0], det)
    return (y0, y1)


def _positively_spanning(normals, dim) -> bool:
    if dim == 1:
        signs = {int(np.sign(n[0])) for n in normals}
        return signs == {-1, 1}
    angles = sorted(math.atan2(n[1], n[0]) for n in normals)
    gaps = [b - a for a, b in zip(angles, angles[1:])]
    gaps.append(angles[0] + 2 * math.pi - angles[-1])
    return max(gaps) < math.pi - 1e-12


def from_facets(normals, offsets=None, name=None) -> Polytope:
    """Build and validate the polytope ``{y : <n_i, y> >= -offset_i}``.

    Parameters
    ----------
    normals : sequence of integer vectors
        Inward facet normals. Dimension is inferred from their length.
    offsets : sequence of int, optional
        Only the anticanonical normalization (all ones) is accepted; the
        argument exists so that malformed input is reported precisely.

    Raises
    ------
    Unbounded, OriginNotInterior, NonReflexive
    """
    normals = [tuple(int(c) for c in n) for n in normals]
    if not normals:
        raise Unbounded("no facets given")
    dim = len(normals[0])
    if dim not in (1, 2) or any(len(n) != dim for n in normals):
        raise ValueError("only dimensions 1 and 2 are supported")
    if any(all(c == 0 for c in n) for n in normals):
        raise ValueError("zero normal vector")
    normals = list(dict.fromkeys(normals))
    if offsets is not None:
        offsets = [int(o) for o in offsets]
        if len(offsets) != len(normals):
            raise ValueError("offsets and normals differ in length")
        if any(o <= 0 for o in offsets):
            raise OriginNotInterior("origin must satisfy every facet inequality strictly")
        if any(o != 1 for o in offsets):
            raise NonReflexive("facets must sit at lattice distance 1 (Fano normalization)")
    if not _positively_spanning(normals, dim):
        raise Unbounded("normals do not positively span R^%d" % dim)

    if dim == 1:
        lo = max(Fraction(-1, n[0]) for n in normals if n[0] > 0)
        hi = min(Fraction(1, -n[0]) for n in normals if n[0] < 0)
        vertices = [(lo,), (hi,)]
    else:
        cand = set()
        for n1, n2 in combinations(normals, 2):
            y = _solve2(n1, n2)
            if y is None:
                continue
            if all(n[0] * y[0] + n[1] * y[1] >= -1 for n in normals):
                cand.add(y)
        vertices = _cyclic_order(sorted(cand))
        for n in normals:
            on_facet = [v for v in vertices if n[0] * v[0] + n[1] * v[1] == -1]
            if len(on_facet) < 2:
                raise NonReflexive(f"normal {n} does not support an edge")

    for v in vertices:
        if any(c.denominator != 1 for c in v):
            raise NonReflexive(f"vertex {tuple(str(c) for c in v)} is not a lattice point")

    volume, bary, second = _exact_moments(dim, vertices)
    return Polytope(
        dim=dim,
        normals=tuple(normals),
        vertices=tuple(vertices),
        volume=volume,
        barycenter=bary,
        second_moment=second,
        name=name,
    )


def _cyclic_order(verts):
    # counterclockwise around the origin, starting at the lexicographically smallest vertex
    start = verts[0]
    ang0 = math.atan2(float(start[1]), float(start[0]))

    def key(v):
        a = math.atan2(float(v[1]), float(v[0])) - ang0
        return a % (2 * math.pi)

    return sorted(verts, key=key)


def _exact_moments(dim, vertices):
    if dim == 1:
        a, b = vertices[0][0], vertices[1][0]
        vol = b - a
        bary = ((a + b) / 2,)
        second = (((b**3 - a**3) / 3,),)
        return vol, bary, second
    vol = Fraction(0)
    first = [Fraction(0), Fraction(0)]
    second = [[Fraction(0)] * 2 for _ in range(2)]
    k = len(vertices)
    for i in range(k):
        p, q = vertices[i], vertices[(i + 1) % k]
        area = (p[0] * q[1] - p[1] * q[0]) / 2
        vol += area
        s = (p[0] + q[0], p[1] + q[1])
        for a in range(2):
            first[a] += area * s[a] / 3
            for b in range(2):
                second[a][b] += area / 12 * (p[a] * p[b] + q[a] * q[b] + s[a] * s[b])
    bary = (first[0] / vol, first[1] / vol)
    return vol, bary, (tuple(second[0]), tuple(second[1]))


def by_name(name: str) -> Polytope:
    try:
        normals = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown polytope {name!r}; known: {sorted(REGISTRY)}") from None
    return from_facets(normals, name=name)


def from_json(text_or_obj) -> Polytope:
    obj = json.loads(text_or_obj) if isinstance(text_or_obj, str) else dict(text_or_obj)
    if "name" in obj and "normals" not in obj:
        return by_name(obj["name"])
    normals = obj["normals"]
    if "dim" in obj and any(len(n) != obj["dim"] for n in normals):
        raise ValueError("normals do not match declared dim")
    return from_facets(normals, obj.get("offsets"), name=obj.get("name"))


def lattice_points(P: Polytope, k: int = 1) -> np.ndarray:
    """Integer points of the dilation ``kP``, sorted lexicographically.

    Returns an ``(N_k, n)`` integer array.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    verts = P.vertices_array * k
    lo = np.floor(verts.min(axis=0)).astype(int)
    hi = np.ceil(verts.max(axis=0)).astype(int)
    axes = [np.arange(l, h + 1) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, P.dim)
    normals = np.array(P.normals, dtype=np.int64)
    keep = np.all(grid @ normals.T >= -k, axis=1)
    return grid[keep]


@dataclass(frozen=True, eq=False)
class Quadrature:
    nodes: np.ndarray
    weights: np.ndarray
    resolution: int
    polytope: Polytope | None = None

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def mean(self, values) -> float:
        return float(np.dot(self.weights, values) / self.weights.sum())


_GL2 = np.array([-1.0, 1.0]) / math.sqrt(3.0)


def quadrature(P: Polytope, resolution: int = 64) -> Quadrature:
    """Composite rule on a uniform refinement of the fan triangulation.

    Each cell carries a rule exact for polynomials of total degree two
    (two-point Gauss in 1D, the interior three-point rule on triangles), so
    all nodes lie strictly inside P.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if P.dim == 1:
        a, b = (float(v[0]) for v in P.vertices)
        edges = np.linspace(a, b, resolution + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * np.diff(edges)
        nodes = (mid[:, None] + half[:, None] * _GL2[None, :]).reshape(-1, 1)
        weights = np.repeat(half, 2)
        return Quadrature(nodes, weights, resolution, P)

    r = resolution
    ii, jj = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    up = ii + jj <= r - 1
    down = ii + jj <= r - 2
    bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    nodes, weights = [], []
    for tri in P.fan_triangles():
        o, p, q = tri
        e1, e2 = (p - o) / r, (q - o) / r
        cell_area = abs(e1[0] * e2[1] - e1[1] * e2[0]) / 2
        i_u, j_u = ii[up], jj[up]
        i_d, j_d = ii[down], jj[down]
        # lower-left corners of the sub-triangles
        c_up = [(i_u, j_u), (i_u + 1, j_u), (i_u, j_u + 1)]
        c_dn = [(i_d + 1, j_d), (i_d + 1, j_d + 1), (i_d, j_d + 1)]
        for corners in (c_up, c_dn):
            pts = [o + np.outer(a, e1) + np.outer(b, e2) for a, b in corners]
            for lam in bary:
                nodes.append(lam[0] * pts[0] + lam[1] * pts[1] + lam[2] * pts[2])
                weights.append(np.full(len(pts[0]), cell_area / 3))
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    weights *= float(P.volume) / weights.sum()
    return Quadrature(nodes, weights, resolution, P)
