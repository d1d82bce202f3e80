from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kstab.errors import NonReflexive, OriginNotInterior, Unbounded
from kstab.polytope import REGISTRY, by_name, from_facets, from_json, lattice_points, quadrature

# exact data by hand from the vertex lists
EXPECTED = {
    "P1": (Fraction(2), (0,)),
    "P2": (Fraction(9, 2), (0, 0)),
    "P1xP1": (Fraction(4), (0, 0)),
    "Bl1P2": (Fraction(4), (Fraction(1, 12), Fraction(1, 12))),
    "Bl2P2": (Fraction(7, 2), (Fraction(-2, 21), Fraction(4, 21))),
}


def shoelace(verts):
    """Area and centroid of a convex polygon from its ordered vertices."""
    A = cx = cy = Fraction(0)
    n = len(verts)
    for i in range(n):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % n]
        c = x0 * y1 - x1 * y0
        A += c
        cx += (x0 + x1) * c
        cy += (y0 + y1) * c
    A /= 2
    return abs(A), (cx / (6 * A), cy / (6 * A))


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_volume_and_barycenter(name):
    P = by_name(name)
    vol, bary = EXPECTED[name]
    assert P.volume == vol
    assert tuple(P.barycenter) == tuple(Fraction(b) for b in bary)
    if P.dim == 2:
        A, c = shoelace(P.vertices)
        assert A == P.volume
        assert c == tuple(P.barycenter)


def test_semistable_iff_barycenter_zero():
    for name in REGISTRY:
        P = by_name(name)
        assert (name in ("P1", "P2", "P1xP1")) == all(b == 0 for b in P.barycenter)


def boundary_points(P):
    """Lattice points on the boundary of P (all facets at distance 1)."""
    pts = lattice_points(P, 1)
    return int(np.sum(np.any(pts @ np.array(P.normals).T == -1, axis=1)))


@pytest.mark.parametrize("name", ["P2", "P1xP1", "Bl1P2", "Bl2P2"])
@given(k=st.integers(1, 12))
@settings(max_examples=12, deadline=None)
def test_ehrhart_pick(name, k):
    P = by_name(name)
    B = boundary_points(P)
    assert len(lattice_points(P, k)) == P.volume * k * k + Fraction(B, 2) * k + 1


def test_lattice_points_p1():
    assert lattice_points(by_name("P1"), 3)[:, 0].tolist() == [-3, -2, -1, 0, 1, 2, 3]
    with pytest.raises(ValueError):
        lattice_points(by_name("P1"), 0)


def test_reflexive_interior_point_is_only_origin(polytope):
    pts = lattice_points(polytope, 1)
    interior = np.all(pts @ np.array(polytope.normals).T > -1, axis=1)
    assert pts[interior].tolist() == [[0] * polytope.dim]


def test_errors():
    with pytest.raises(Unbounded):
        from_facets([(1, 0), (0, 1)])
    with pytest.raises(NonReflexive):
        from_facets([(2, 0), (0, 1), (-1, -1)])
    with pytest.raises(OriginNotInterior):
        from_facets([(1,), (-1,)], offsets=[1, 0])
    with pytest.raises(Unbounded):
        from_facets([])
    with pytest.raises(KeyError):
        by_name("P3")


def test_json_roundtrip(polytope):
    Q = from_json(polytope.to_json())
    assert Q == polytope and Q.volume == polytope.volume
    assert from_json({"name": "Bl1P2"}) == by_name("Bl1P2")


def test_contains(polytope):
    assert polytope.contains(np.zeros(polytope.dim))[0]
    assert not polytope.contains(np.full(polytope.dim, 5.0))[0]


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_quadrature_exact_to_degree_two(name):
    P = by_name(name)
    q = quadrature(P, 8)
    assert P.contains(q.nodes).all()
    assert q.integrate(np.ones(len(q.nodes))) == pytest.approx(float(P.volume), rel=1e-14)
    first = q.nodes.T @ q.weights / float(P.volume)
    assert np.allclose(first, P.barycenter_array, atol=1e-13)
    cov = np.einsum("n,ni,nj->ij", q.weights, q.nodes, q.nodes) / float(P.volume) - np.outer(first, first)
    exact = np.array([[float(c) for c in row] for row in P.covariance()])
    assert np.allclose(cov, exact, atol=1e-13)


def test_quadrature_rejects_low_resolution(polytope):
    with pytest.raises(ValueError):
        quadrature(polytope, 1)
