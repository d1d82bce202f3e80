import math

import numpy as np
import pytest

from kstab import flows as fl
from kstab import metric as me
from kstab import symplectic as sy
from kstab.errors import ConfigInvalid, TooFewSamples
from kstab.polytope import by_name


@pytest.fixture(scope="module")
def bl1_grid():
    return sy.symplectic_grid(by_name("Bl1P2"), 22)


@pytest.fixture(scope="module")
def p1_trace():
    g = sy.symplectic_grid(by_name("P1"), 32)
    return fl.run(sy.reference(g), fl.FlowConfig(fl.INVERSE_MA, t_max=20.0))


@pytest.fixture(scope="module")
def bl1_traces(bl1_grid):
    M0 = fl.perturbed_initial(bl1_grid, 3)
    cfg = dict(t_max=6.0, snapshot_times=[0.5, 1.0, 2.0, 4.0])
    return {k: fl.run(M0, fl.FlowConfig(k, **cfg)) for k in (fl.INVERSE_MA, fl.KAHLER_RICCI)}


def test_kind_aliases():
    assert fl.canonical_kind("ima") == fl.INVERSE_MA
    assert fl.canonical_kind("Kahler-Ricci") == fl.KAHLER_RICCI
    with pytest.raises(ConfigInvalid) as exc:
        fl.canonical_kind("heat")
    assert exc.value.key == "kind"


@pytest.mark.parametrize(
    "kw,key",
    [({"dt_init": 0}, "dt_init"), ({"t_max": -1}, "t_max"), ({"dt_control": 2}, "dt_control"), ({"growth": 0.5}, "growth"), ({"snapshot_times": [0, 1]}, "snapshot_times")],
)
def test_config_errors_name_the_key(kw, key):
    with pytest.raises(ConfigInvalid) as exc:
        fl.FlowConfig(**kw)
    assert exc.value.key == key


def test_default_snapshots_are_powers_of_two():
    assert fl.FlowConfig(t_max=10).snapshot_times == [1.0, 2.0, 4.0, 8.0]


def test_kahler_einstein_is_a_fixed_point():
    P = by_name("P1")
    from test_symplectic import ke_log_coeffs

    M = sy.from_lattice_coefficients(sy.symplectic_grid(P, 16), ke_log_coeffs(P))
    for kind in (fl.INVERSE_MA, fl.KAHLER_RICCI):
        assert np.max(np.abs(fl.rhs(M, kind))) < 1e-10
        new, dt = fl.step(M, kind, 0.1)
        assert dt == 0.1 and np.max(np.abs(new.v - M.v)) < 1e-10


@pytest.mark.parametrize("kind", [fl.INVERSE_MA, fl.KAHLER_RICCI])
def test_implicit_step_is_first_order_consistent(bl1_grid, kind):
    M = fl.perturbed_initial(bl1_grid, 0)
    F = fl.rhs(M, kind)
    errs = []
    for dt in (1e-3, 5e-4):
        _, dv = fl.implicit_step(M, kind, dt)
        errs.append(np.max(np.abs(dv - dt * F)))
    # the defect is O(dt^2)
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_implicit_step_conserves_E(bl1_grid):
    M = fl.perturbed_initial(bl1_grid, 0)
    _, dv = fl.implicit_step(M, fl.INVERSE_MA, 0.2)
    assert abs(np.dot(bl1_grid.weights, dv)) < 1e-14


def test_step_halves_on_large_updates(bl1_grid):
    M = fl.perturbed_initial(bl1_grid, 0)
    new, used = fl.step(M, fl.KAHLER_RICCI, 10.0, max_update=0.01)
    assert used < 10.0 and np.max(np.abs(new.v - M.v)) <= 0.01


def test_explicit_toric_step_p1():
    P = by_name("P1")
    T = me.ToricMetric.reference(P, me.default_grid(P, 129))
    R0 = me.energies(T, T).ricci_calabi
    new, used = fl.step(T, fl.INVERSE_MA, 0.05)
    assert used <= 0.05
    assert me.energies(new, T).ricci_calabi < R0
    with pytest.raises(TypeError):
        fl.run(T, fl.FlowConfig())


def test_p1_converges_and_is_monotone(p1_trace):
    assert p1_trace.stop_reason == "converged"
    assert p1_trace.reports[-1].ricci_calabi < 1e-10
    assert fl.monitors_pass(p1_trace)
    # snapshots land exactly on the requested times
    assert [t for t, _ in p1_trace.snapshots][:3] == [1.0, 2.0, 4.0]


@pytest.mark.parametrize("kind", [fl.INVERSE_MA, fl.KAHLER_RICCI])
def test_monotonicity_on_bl1(bl1_traces, kind):
    tr = bl1_traces[kind]
    rep = dict(fl.monotonicity_report(tr))
    assert all(v <= fl.MONITOR_TOL for v in rep.values()), rep
    if kind == fl.INVERSE_MA:
        assert rep["E_constant"] < 1e-12
    else:
        assert tr.column("E")[-1] > tr.column("E")[0]


def test_dissipation_identity_along_trace(bl1_traces):
    for _, M in bl1_traces[fl.INVERSE_MA].snapshots:
        lhs, rhs = fl.dissipation_identity(M)
        assert lhs == pytest.approx(rhs, abs=1e-12)
        assert fl.jensen_bound(M) <= 0


def test_dissipation_identity_toric():
    P = by_name("P1")
    T = me.ToricMetric.reference(P, me.default_grid(P, 129))
    lhs, rhs = fl.dissipation_identity(T)
    assert lhs == pytest.approx(rhs, abs=1e-12) and lhs > 0


def test_dissipation_matches_energy_decay(bl1_traces):
    # -dD/dt = ||phi_dot||_2 R^{1/2} = R along the inverse Monge-Ampere flow
    tr = bl1_traces[fl.INVERSE_MA]
    t = np.asarray(tr.times)
    D = tr.column("D")
    R = tr.column("R")
    i = int(np.searchsorted(t, 3.0))
    dD = (D[i + 1] - D[i - 1]) / (t[i + 1] - t[i - 1])
    assert -dD == pytest.approx(R[i], rel=2e-2)


def test_linear_bound(bl1_traces):
    tr = bl1_traces[fl.INVERSE_MA]
    A = fl.linear_bound_constant(tr)
    assert np.all(np.asarray(tr.sup_phi) <= np.asarray(tr.times) + A + 1e-15)


def test_slope_estimate():
    t = np.linspace(0, 10, 101)
    est = fl.slope_estimate(t, -0.3 * t + 2 + np.exp(-3 * t))
    assert est.slope == pytest.approx(-0.3, abs=1e-6) and est.stable
    with pytest.raises(TooFewSamples):
        fl.slope_estimate(t[:5], t[:5])
    with pytest.raises(ValueError):
        fl.slope_estimate(t, t, 0)


def test_plateau_stop(bl1_grid):
    cfg = fl.FlowConfig(fl.INVERSE_MA, t_max=40.0, stop_on_plateau=True, plateau_rtol=1e-3, t_min=4.0)
    tr = fl.run(sy.reference(bl1_grid), cfg)
    assert tr.stop_reason == "plateau" and 4.0 <= tr.times[-1] < 40.0
    # Bl1P2 is unstable: R stays bounded away from zero
    assert fl.plateau_value(tr) > 1e-3


def test_trace_csv(tmp_path, p1_trace):
    p = tmp_path / "t.csv"
    p1_trace.to_csv(p, header_lines=["hello"])
    lines = p.read_text().splitlines()
    assert lines[0] == "# hello"
    assert lines[1] == "t,E,L,D,R,M,H,sup_phi,dt"
    assert len(lines) == len(p1_trace.times) + 2


def test_perturbed_initial_deterministic(bl1_grid):
    a, b = fl.perturbed_initial(bl1_grid, 7), fl.perturbed_initial(bl1_grid, 7)
    assert np.array_equal(a.v, b.v) and a.is_convex()
    assert math.isfinite(fl.report_dict(sy.energies(a, a))["ricci_calabi"])
