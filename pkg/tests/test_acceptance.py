"""Acceptance suite.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.  The 129-node flow runs are shared through
module fixtures.
"""

import math
import os

import numpy as np
import pytest

from kstab import flows as fl
from kstab import geodesic as ge
from kstab import na
from kstab import optimize as op
from kstab import symplectic as sy
from kstab.cli import moment_weight_sweep, random_metric
from kstab.grid import GridSpec
from kstab.polytope import by_name

BL1 = by_name("Bl1P2")
NODES = 129


def grid_129(P):
    k = sy.SymplecticGrid.from_nodes_per_axis(P, NODES).k
    return sy.symplectic_grid(P, k)


@pytest.fixture(scope="module")
def theorem_a():
    return op.theorem_a_gap(BL1, fl.FlowConfig(fl.INVERSE_MA, t_max=32.0), op.SearchConfig(max_pieces=4, seeds=16), nodes_per_axis=NODES)


@pytest.fixture(scope="module")
def theorem_b():
    return op.theorem_b_gap(BL1, fl.FlowConfig(fl.KAHLER_RICCI, t_max=32.0), op.SearchConfig(max_pieces=4, seeds=16), nodes_per_axis=NODES)


# 1 -------------------------------------------------------------------------------


@pytest.mark.criterion(1)
@pytest.mark.parametrize("name", ["P1", "P2"])
def test_stable_case_collapse(name):
    P = by_name(name)
    tr = fl.run(sy.reference(grid_129(P)), fl.FlowConfig(fl.INVERSE_MA, t_max=100.0, stop_tol=1e-8))
    R = tr.column("R")
    assert R.min() < 1e-3
    assert tr.times[int(np.argmax(R < 1e-3))] <= 100.0
    assert fl.monitors_pass(tr)
    f, value = op.maximize_ratio(P, op.SearchConfig(max_pieces=4, seeds=16))
    assert value <= 1e-8
    if name == "P1":
        T = tr.final.to_toric(GridSpec(12.0, 97, 1))
        x = T.grid.points[:, 0]
        diff = T.phi - 2 * np.logaddexp(x / 2, -x / 2)
        assert np.max(np.abs(diff - 0.5 * (diff.max() + diff.min()))) < 1e-2


# 2 -------------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_theorem_a_equality(theorem_a):
    rep = theorem_a
    assert rep.details["grid_k"] == grid_129(BL1).k
    assert rep.relative_gap <= 0.1
    assert rep.details["initial_agreement"] <= 0.02
    assert rep.details["best_by_pieces"][-1][0] == 4


@pytest.mark.criterion(2)
def test_theorem_a_chain(theorem_a):
    rep = theorem_a
    assert math.isfinite(rep.ray_value)
    assert rep.flow_limit >= rep.ray_value - op.CHAIN_TOL
    assert rep.ray_value >= rep.best_value - op.CHAIN_TOL
    assert rep.details["min_moment_weight_margin"] >= -op.CHAIN_TOL
    assert rep.inequality_violations == 0


@pytest.mark.criterion(2)
@pytest.mark.skipif(not os.environ.get("KSTAB_STRETCH"), reason="257-node stretch run; set KSTAB_STRETCH=1")
def test_theorem_a_stretch():
    rep = op.theorem_a_gap(BL1, fl.FlowConfig(fl.INVERSE_MA, t_max=32.0), nodes_per_axis=257)
    assert rep.relative_gap <= 0.05
    assert rep.inequality_violations == 0


# 3 -------------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_theorem_b_equality(theorem_b):
    rep = theorem_b
    assert rep.relative_gap <= 0.1
    assert rep.inequality_violations == 0
    assert rep.details["initial_agreement"] <= 0.02


@pytest.mark.criterion(3)
def test_h_identity_along_krf(theorem_b):
    for tr in theorem_b.traces:
        assert op.h_identity_error(tr, t_min=1.0) <= 0.01


# 4 -------------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_moment_weight_sweep():
    polys = [by_name(n) for n in ("P1", "P2", "P1xP1", "Bl1P2", "Bl2P2")]
    rows = moment_weight_sweep(polys, pairs=100, seed=0)
    assert len(rows) == 500
    margins = np.array([m for *_, m in rows])
    assert np.all(margins >= -1e-8)


# 5 -------------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_inverse_ma_monotone(theorem_a):
    for tr in theorem_a.traces:
        rep = dict(fl.monotonicity_report(tr))
        assert set(rep) == {"D_nonincreasing", "R_nonincreasing", "M_nonincreasing", "E_constant"}
        assert max(rep.values()) <= 1e-6


@pytest.mark.criterion(5)
def test_krf_monotone(theorem_b):
    for tr in theorem_b.traces:
        rep = dict(fl.monotonicity_report(tr))
        assert set(rep) == {"H_nonincreasing", "E_nondecreasing", "D_nonincreasing"}
        assert max(rep.values()) <= 1e-6


@pytest.mark.criterion(5)
def test_linear_bound_stable_under_refinement(theorem_a):
    fine = theorem_a.traces[0]
    coarse = fl.run(sy.reference(sy.symplectic_grid(BL1, fine.initial.grid.k // 2)), fl.FlowConfig(fl.INVERSE_MA, t_max=32.0))
    fits = [fl.linear_bound_fit(tr) for tr in (coarse, fine)]
    for tr, (s, A) in zip((coarse, fine), fits):
        assert s <= 1.0
        t = np.asarray(tr.times)
        # the bound holds at every recorded time, not only on the fitted tail
        assert np.all(np.asarray(tr.sup_phi) <= t + max(A, fl.linear_bound_constant(tr)) + 1e-12)
        assert fl.linear_bound_constant(tr) <= max(A, 0.0) + 1e-6
    (s0, A0), (s1, A1) = fits
    assert abs(s1 - s0) < 1e-4
    assert abs(A1 - A0) < 1e-4


# 6 -------------------------------------------------------------------------------

ORACLE_FUNCTIONS = [
    ("Bl1P2", [((1, 0), 0), ((0, 1), 0), ((-1, -1), 0)]),
    ("Bl1P2", [((-1, -1), 0)]),
    ("P2", [((1, 0), 0), ((0, 0), 1)]),
    ("P1xP1", [((1, 1), 0), ((-1, 0), 1)]),
]


@pytest.mark.criterion(6)
@pytest.mark.parametrize("name,pieces", ORACLE_FUNCTIONS)
def test_lattice_oracle_rate(name, pieces):
    f = na.pl_convex(by_name(name), pieces)
    rep = na.na_report(f)
    C = {key: [] for key in ("ena", "F", "norm2")}
    for k in (25, 50, 100, 200):
        o = na.lattice_oracle(f, k)
        C["ena"].append(k * abs(o.ena_k - rep.ena))
        C["F"].append(k * abs(o.F_k - rep.F))
        C["norm2"].append(k * abs(o.norm2_k - rep.norm_p[2]))
    for key, c in C.items():
        c = np.array(c)
        if c.max() < 1e-9:
            continue
        # error <= C/k with C settling under doubling
        assert c[-1] <= 1.2 * c[-2] + 1e-9, key
        assert c.max() / c[1:].min() < 2.0, key


LNA_FUNCTIONS = [
    ("P1", [((0,), 0.1), ((1,), 0)]),
    ("P1", [((-1,), 0), ((0.5,), 0.3)]),
    ("P1", [((2,), -0.5), ((-1,), 0)]),
    ("P1", [((0.7,), 0.2)]),
    ("P1", [((1,), 0), ((-1,), 0)]),
    ("P1", [((0,), 0), ((1.5,), -0.4), ((-2,), -0.6)]),
    ("Bl1P2", [((-1, -1), 0)]),
    ("Bl1P2", [((1, 1), 0), ((0, 0), 0.3)]),
    ("P2", [((1, 0), 0), ((0, 0), 0.5)]),
    ("P1xP1", [((1, 1), 0), ((-1, 0), 0.2)]),
]


@pytest.mark.criterion(6)
@pytest.mark.parametrize("name,pieces", LNA_FUNCTIONS)
def test_lna_slope(name, pieces):
    P = by_name(name)
    f = na.pl_convex(P, pieces)
    lna = -float(f.value_at_origin())
    vals = f(na.quadrature_nodes(f)[0])
    scale = max(abs(lna), float(np.ptp(vals)))
    assert abs(na.lna_oracle(f) - lna) <= 0.02 * scale


@pytest.mark.criterion(6)
@pytest.mark.parametrize("name,pieces", ORACLE_FUNCTIONS + LNA_FUNCTIONS[:3])
def test_F_via_dh(name, pieces):
    f = na.pl_convex(by_name(name), pieces)
    assert abs(ge.virtual_slope_F(ge.pl_dh_measure(f)) - na.na_report(f).F) <= 1e-6


# 7 -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def random_metrics():
    rng = np.random.default_rng(7)
    g = sy.symplectic_grid(BL1, 16)
    return [random_metric(g, rng) for _ in range(50)]


@pytest.mark.criterion(7)
def test_dissipation_identity(theorem_a):
    for tr in theorem_a.traces:
        for _, M in tr.snapshots:
            lhs, rhs = fl.dissipation_identity(M)
            assert abs(lhs - rhs) <= 1e-12


@pytest.mark.criterion(7)
def test_cauchy_schwarz_margins(theorem_a, random_metrics):
    rng = np.random.default_rng(8)
    fs = [theorem_a.best_f] + [na.pl_convex(BL1, [(tuple(rng.standard_normal(2)), float(rng.standard_normal())) for _ in range(3)]) for _ in range(10)]
    for M in random_metrics:
        for f in fs:
            assert op.verify_moment_weight(M, f) >= -1e-8


@pytest.mark.criterion(7)
def test_pinsker(random_metrics):
    for M in random_metrics:
        rep = sy.energies(M, M)
        e = np.exp(M.rho)
        l1 = M.mean(np.abs(e - 1.0))
        assert math.sqrt(2 * rep.h_functional) >= l1 - 1e-8


@pytest.mark.criterion(7)
def test_d_convex_along_segments():
    # geodesics are segments of symplectic potentials; the end points are
    # lattice-coefficient metrics, resolved here on the 129-node grid
    # (at k = 16 one segment dips to -1e-4, turning positive under refinement)
    rng = np.random.default_rng(12)
    g = grid_129(BL1)
    n = len(sy.lattice_points(BL1, 1))
    ends = []
    while len(ends) < 40:
        M = sy.from_lattice_coefficients(g, rng.uniform(0.1, 1.0) * rng.standard_normal(n))
        if M.is_convex():
            ends.append(M)
    base = sy.reference(g)
    s = np.linspace(0.0, 1.0, 9)
    for M0, M1 in zip(ends[::2], ends[1::2]):
        D = [sy.energies(M0.with_v((1 - a) * M0.v + a * M1.v), base).D for a in s]
        assert np.all(np.diff(D, 2) >= -1e-6)


@pytest.mark.criterion(7)
def test_lidskii_ordered_triples():
    rng = np.random.default_rng(9)
    w = sy.symplectic_grid(BL1, 16).weights
    worst = math.inf
    for _ in range(100):
        w_ = rng.standard_normal(len(w))
        v = w_ + rng.exponential(size=len(w)) * (rng.random(len(w)) < 0.5)
        u = v + rng.exponential(size=len(w)) * (rng.random(len(w)) < 0.5)
        for p in (1.0, 1.5, 2.0, 3.0):
            worst = min(worst, ge.lidskii_check(u, v, w_, p, w))
    assert worst >= -1e-10


@pytest.mark.criterion(7)
def test_constant_speed(random_metrics):
    w = random_metrics[0].grid.weights
    for i in range(10):
        u0, u1 = random_metrics[i].u, random_metrics[i + 10].u
        for p in (1.0, 2.0, 3.0):
            d = ge.dp_distance(u0, u1, p, w)
            for s in (0.25, 0.5, 0.8):
                assert abs(ge.dp_distance(u0, ge.segment(u0, u1, s), p, w) - s * d) <= 1e-12
                assert abs(ge.dp_distance(ge.segment(u0, u1, s), u1, p, w) - (1 - s) * d) <= 1e-12


# 8 -------------------------------------------------------------------------------


def smooth_directions(y, rng, count):
    for _ in range(count):
        c = rng.normal(size=(3, y.shape[1]))
        ph = rng.uniform(0, 2 * np.pi, 3)
        yield sum(np.sin(y @ c[j] + ph[j]) for j in range(3))


def fd_and_pairing(M, base, dv, eps=1e-5):
    fd = (sy.energies(M.with_v(M.v + eps * dv), base).D - sy.energies(M.with_v(M.v - eps * dv), base).D) / (2 * eps)
    return fd, -M.mean(dv * (np.exp(M.rho) - 1.0))


@pytest.mark.criterion(8)
def test_gradient_check(theorem_a):
    tr = theorem_a.traces[0]
    base = tr.initial
    M = dict(tr.snapshots)[1.0]
    rng = np.random.default_rng(10)
    for dv in smooth_directions(M.grid.nodes, rng, 10):
        fd, pairing = fd_and_pairing(M, base, dv)
        assert abs(fd - pairing) <= 1e-4 * abs(pairing)
    # D is invariant under constants, so any step works; a unit step keeps
    # the difference quotient free of 1/eps rounding amplification
    fd, pairing = fd_and_pairing(M, base, np.ones(M.grid.size), eps=1.0)
    assert abs(fd) < 1e-12 and abs(pairing) < 1e-14


@pytest.mark.criterion(8)
def test_gradient_check_initial_metrics(theorem_a):
    rng = np.random.default_rng(11)
    for tr in theorem_a.traces:
        M = tr.initial
        for dv in smooth_directions(M.grid.nodes, rng, 10):
            fd, pairing = fd_and_pairing(M, tr.initial, dv)
            assert abs(fd - pairing) <= 1e-4 * (1 + abs(pairing))
