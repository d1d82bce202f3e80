"""Inverse Monge-Ampere flow and normalized Kahler-Ricci flow.

In log coordinates the flows read ``d phi/dt = 1 - e^rho`` and
``d phi/dt = -rho``.  At a fixed point of the polytope the symplectic potential
moves with the opposite sign, so on the symplectic side

    InverseMA:    dv/dt = e^rho - 1
    KahlerRicci:  dv/dt = rho

Long runs integrate on the symplectic side with linearly implicit Euler
steps.  The Jacobian is a sparse elliptic part plus a rank-one correction
from the normalization constant, inverted by a sparse LU factorization and
the Sherman-Morrison formula.  A spec-literal explicit Euler step in log
coordinates is kept for short checks on :class:`~kstab.metric.ToricMetric`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import symplectic as sy
from .errors import ConfigInvalid, KstabError, NonConvex, StepFailed, TooFewSamples
from .metric import EnergyReport, ToricMetric, ricci_potential
from .symplectic import SymplecticMetric

INVERSE_MA = "InverseMA"
KAHLER_RICCI = "KahlerRicci"
_ALIASES = {"inversema": INVERSE_MA, "ima": INVERSE_MA, "kahlerricci": KAHLER_RICCI, "krf": KAHLER_RICCI}

MAX_HALVINGS = 20
MONITOR_TOL = 1e-6


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[str(kind).replace("-", "").replace("_", "").lower()]
    except KeyError:
        raise ConfigInvalid("kind", f"expected InverseMA or KahlerRicci, got {kind!r}") from None


@dataclass
class FlowConfig:
    """Time stepping and stopping parameters.

    ``dt_control`` scales the largest admissible node update per step
    (``0.25 * dt_control``).  A run stops at ``t_max``, when the Ricci-Calabi
    functional drops below ``stop_tol``, or (if ``stop_on_plateau``) when it
    changes by less than ``plateau_rtol`` relative over the last
    ``plateau_fraction`` of the elapsed time, but never before ``t_min``.
    """

    kind: str = INVERSE_MA
    dt_init: float = 1e-3
    dt_control: float = 0.8
    t_max: float = 50.0
    stop_tol: float = 1e-10
    snapshot_times: list | None = None
    dt_max: float = 0.25
    growth: float = 1.25
    stop_on_plateau: bool = False
    plateau_rtol: float = 1e-3
    plateau_fraction: float = 0.1
    t_min: float = 0.0

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if not self.dt_init > 0:
            raise ConfigInvalid("dt_init", "must be positive")
        if not self.t_max > 0:
            raise ConfigInvalid("t_max", "must be positive")
        if not 0 < self.dt_control <= 1:
            raise ConfigInvalid("dt_control", "must lie in (0, 1]")
        if not self.dt_max >= self.dt_init:
            raise ConfigInvalid("dt_max", "must be >= dt_init")
        if not self.growth >= 1:
            raise ConfigInvalid("growth", "must be >= 1")
        if self.snapshot_times is None:
            self.snapshot_times = [2.0**j for j in range(0, 32) if 2.0**j <= self.t_max]
        self.snapshot_times = sorted(float(t) for t in self.snapshot_times)
        if any(t <= 0 for t in self.snapshot_times):
            raise ConfigInvalid("snapshot_times", "must be positive")

    @property
    def max_update(self) -> float:
        return 0.25 * self.dt_control


# ---------------------------------------------------------------------------
# right-hand sides and single steps


def rhs(M, kind: str) -> np.ndarray:
    """Velocity of the stored field: ``psi`` for ToricMetric, ``v`` for SymplecticMetric."""
    kind = canonical_kind(kind)
    if isinstance(M, ToricMetric):
        rho, _ = ricci_potential(M)
        return 1.0 - np.exp(rho) if kind == INVERSE_MA else -rho
    rho = M.rho
    return np.exp(rho) - 1.0 if kind == INVERSE_MA else rho


def implicit_step(M: SymplecticMetric, kind: str, dt: float):
    """One linearly implicit Euler step ``(I - dt J) dv = dt F(v)``.

    Returns ``(new_metric, dv)``; the new metric is not checked for convexity.
    Along the inverse Monge-Ampere flow the weighted sum of ``dv`` vanishes
    identically, so E is conserved to solver precision.
    """
    kind = canonical_kind(kind)
    rho = M.rho
    er = np.exp(rho)
    L = M.linearized_w()
    c = L.T @ M.canonical_weights
    if kind == INVERSE_MA:
        A = sp.diags(er) @ L
        b = er
        F = er - 1.0
    else:
        A = L
        b = np.ones_like(rho)
        F = rho
    B = (sp.identity(M.grid.size, format="csc") - dt * A).tocsc()
    lu = splu(B)
    z1 = lu.solve(dt * F)
    z2 = lu.solve(b)
    dv = z1 - z2 * (dt * np.dot(c, z1)) / (1.0 + dt * np.dot(c, z2))
    return M.with_v(M.v + dv), dv


def _explicit_toric(M: ToricMetric, kind: str, dt: float, max_update: float):
    F = rhs(M, kind)
    for _ in range(MAX_HALVINGS + 1):
        d = dt * F
        if np.max(np.abs(d)) <= max_update:
            new = M.with_psi(M.psi + d)
            if new.is_convex():
                return new, dt
        dt *= 0.5
    raise StepFailed("explicit step lost convexity after 20 halvings")


def step(M, kind: str, dt: float, max_update: float = 0.1):
    """Advance one step, halving ``dt`` until the update is admissible.

    ``ToricMetric`` inputs use explicit Euler in log coordinates; symplectic
    inputs use the linearly implicit step.  An update is admissible when its
    largest node change is at most ``max_update`` and the result is convex.

    Returns
    -------
    (metric, dt_used)

    Raises
    ------
    StepFailed
        after 20 halvings.
    """
    if isinstance(M, ToricMetric):
        return _explicit_toric(M, kind, dt, max_update)
    for _ in range(MAX_HALVINGS + 1):
        try:
            new, dv = implicit_step(M, kind, dt)
            if np.max(np.abs(dv)) <= max_update and new.is_convex():
                return new, dt
        except (NonConvex, RuntimeError, FloatingPointError):
            pass
        dt *= 0.5
    raise StepFailed("implicit step failed after 20 halvings")


# ---------------------------------------------------------------------------
# runs


@dataclass
class FlowTrace:
    kind: str
    times: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    sup_phi: list = field(default_factory=list)
    dts: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    slope_D: float = float("nan")
    stop_reason: str = ""
    initial: SymplecticMetric | None = None

    def column(self, name: str) -> np.ndarray:
        key = {"R": "ricci_calabi", "M": "mabuchi", "H": "h_functional"}.get(name, name)
        return np.array([getattr(r, key) for r in self.reports])

    @property
    def final(self):
        return self.snapshots[-1][1] if self.snapshots else None

    def to_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "E", "L", "D", "R", "M", "H", "sup_phi", "dt"])
            for t, r, s, d in zip(self.times, self.reports, self.sup_phi, self.dts):
                w.writerow([repr(float(x)) for x in (t, r.E, r.L, r.D, r.ricci_calabi, r.mabuchi, r.h_functional, s, d)])


def _plateau(times, R, frac, rtol) -> bool:
    t = times[-1]
    if t <= 0 or R[-1] <= 0:
        return False
    back = t - frac * t
    if back <= times[0]:
        return False
    R_back = float(np.interp(back, times, R))
    return abs(R[-1] - R_back) / R[-1] < rtol


def run(M0: SymplecticMetric, cfg: FlowConfig, baseline: SymplecticMetric | None = None, progress=None) -> FlowTrace:
    """Integrate from ``M0`` and record energies after every accepted step.

    Energies are relative to ``baseline`` (default ``M0``); ``sup_phi`` is
    ``sup_x (phi_t - phi_0) = max_P (u_0 - u_t)``.  Snapshots are taken at
    ``cfg.snapshot_times`` (steps are shortened to land on them) and at the
    final time.
    """
    if isinstance(M0, ToricMetric):
        raise TypeError("run integrates symplectic potentials; convert with kstab.symplectic")
    baseline = baseline or M0
    kind = cfg.kind
    trace = FlowTrace(kind=kind, initial=M0)
    M = M0
    t = 0.0
    dt = cfg.dt_init
    trace.times.append(0.0)
    trace.reports.append(sy.energies(M, baseline))
    trace.sup_phi.append(float(np.max(M0.u - M.u)))
    trace.dts.append(0.0)
    pending = [s for s in cfg.snapshot_times if s <= cfg.t_max]
    R = [trace.reports[0].ricci_calabi]
    reason = "t_max"
    while t < cfg.t_max - 1e-12:
        if R[-1] < cfg.stop_tol:
            reason = "converged"
            break
        if cfg.stop_on_plateau and t >= cfg.t_min and _plateau(trace.times, R, cfg.plateau_fraction, cfg.plateau_rtol):
            reason = "plateau"
            break
        target = min(cfg.t_max, pending[0]) if pending else cfg.t_max
        h = min(dt, target - t)
        try:
            M_new, used = step(M, kind, h, cfg.max_update)
        except StepFailed:
            raise StepFailed(f"{kind} step failed at t={t:.6g}") from None
        t = target if used == h and h == target - t else t + used
        M = M_new
        rep = sy.energies(M, baseline)
        trace.times.append(t)
        trace.reports.append(rep)
        trace.sup_phi.append(float(np.max(M0.u - M.u)))
        trace.dts.append(used)
        R.append(rep.ricci_calabi)
        while pending and t >= pending[0] - 1e-12:
            trace.snapshots.append((t, M))
            pending.pop(0)
        # a step shortened only to hit a snapshot does not shrink dt
        dt = min(cfg.dt_max, (dt if used == h else used) * cfg.growth)
        if progress is not None:
            progress(t, rep)
    trace.stop_reason = reason
    if not trace.snapshots or trace.snapshots[-1][0] != t:
        trace.snapshots.append((t, M))
    try:
        trace.slope_D = slope_estimate(trace.times, trace.column("D"), 0.25).slope
    except TooFewSamples:
        trace.slope_D = float("nan")
    return trace


# ---------------------------------------------------------------------------
# monitors


def monotonicity_report(trace: FlowTrace):
    """Largest wrong-sign forward difference for each monitor of the flow kind."""
    if not trace.reports:
        raise KstabError("empty trace")

    def worst_increase(x):
        d = np.diff(x)
        return float(max(0.0, d.max())) if len(d) else 0.0

    def worst_decrease(x):
        d = np.diff(x)
        return float(max(0.0, -d.min())) if len(d) else 0.0

    if trace.kind == INVERSE_MA:
        E = trace.column("E")
        return [
            ("D_nonincreasing", worst_increase(trace.column("D"))),
            ("R_nonincreasing", worst_increase(trace.column("R"))),
            ("M_nonincreasing", worst_increase(trace.column("M"))),
            ("E_constant", float(np.max(np.abs(E - E[0])))),
        ]
    return [
        ("H_nonincreasing", worst_increase(trace.column("H"))),
        ("E_nondecreasing", worst_decrease(trace.column("E"))),
        ("D_nonincreasing", worst_increase(trace.column("D"))),
    ]


def monitors_pass(trace: FlowTrace, tol: float = MONITOR_TOL) -> bool:
    return all(v <= tol for _, v in monotonicity_report(trace))


def _mass_and_rho(M):
    if isinstance(M, ToricMetric):
        rho, _ = ricci_potential(M)
        return M.ma_weights, rho, M.volume
    return M.grid.weights, M.rho, M.volume


def dissipation_identity(M):
    """``(-dD/dt, ||phi_dot||_2 R^{1/2})`` along the inverse Monge-Ampere flow at ``M``.

    Both sides are evaluated from their own definitions; they agree because
    the velocity is ``1 - e^rho``, the equality case of Cauchy-Schwarz.
    """
    w, rho, V = _mass_and_rho(M)
    er = np.exp(rho)
    phidot = 1.0 - er
    lhs = -float(np.dot(w, phidot * (er - 1.0))) / V
    speed = math.sqrt(float(np.dot(w, phidot**2)) / V)
    R = float(np.dot(w, (er - 1.0) ** 2)) / V
    return lhs, speed * math.sqrt(R)


def jensen_bound(M) -> float:
    """``(1/V) int rho omega^n``; non-positive by Jensen since ``int e^rho = V``."""
    w, rho, V = _mass_and_rho(M)
    return float(np.dot(w, rho)) / V


class SlopeEstimate(NamedTuple):
    slope: float
    half_slope: float
    stable: bool


def slope_estimate(times, values, tail_fraction: float = 0.25) -> SlopeEstimate:
    """Least-squares slope over the last ``tail_fraction`` of the time span.

    Also fits the last half of that window; ``stable`` is False when the two
    differ by more than 5%.

    Raises
    ------
    TooFewSamples
        if fewer than 10 samples fall in the window.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    t0 = t[-1] - tail_fraction * (t[-1] - t[0])
    sel = t >= t0
    if sel.sum() < 10:
        raise TooFewSamples(f"{int(sel.sum())} samples in the tail window, need 10")
    slope = float(np.polyfit(t[sel], y[sel], 1)[0])
    th = t[-1] - 0.5 * tail_fraction * (t[-1] - t[0])
    selh = t >= th
    half = float(np.polyfit(t[selh], y[selh], 1)[0]) if selh.sum() >= 2 else slope
    stable = abs(half - slope) <= 0.05 * max(abs(slope), 1e-12)
    return SlopeEstimate(slope, half, stable)


def linear_bound_constant(trace: FlowTrace) -> float:
    """Smallest ``A`` with ``sup(phi_t - phi_0) <= t + A`` on the recorded times."""
    return float(np.max(np.asarray(trace.sup_phi) - np.asarray(trace.times)))


def linear_bound_fit(trace: FlowTrace, tail_fraction: float = 0.25):
    """Tail fit ``sup(phi_t - phi_0) ~ s t + A``; returns ``(s, A)``.

    Along the inverse Monge-Ampere flow ``s <= 1``, so ``t + max(A, 0)``
    bounds the tail; ``s`` is the largest Kahler velocity of the limit ray.
    """
    t = np.asarray(trace.times, dtype=float)
    y = np.asarray(trace.sup_phi, dtype=float)
    sel = t >= t[-1] - tail_fraction * (t[-1] - t[0])
    if sel.sum() < 2:
        raise TooFewSamples("need two samples in the tail window")
    s, A = np.polyfit(t[sel], y[sel], 1)
    return float(s), float(A)


def plateau_value(trace: FlowTrace, name: str = "R", tail_fraction: float = 0.1) -> float:
    """Mean of a monitor over the last ``tail_fraction`` of the run."""
    t = np.asarray(trace.times)
    y = trace.column(name)
    sel = t >= t[-1] - tail_fraction * (t[-1] - t[0])
    return float(np.mean(y[sel]))


def perturbed_initial(grid: sy.SymplecticGrid, rng_seed: int, scale: float = 0.5) -> SymplecticMetric:
    """Reference-type potential with random positive lattice coefficients."""
    rng = np.random.default_rng(rng_seed)
    n = len(sy.lattice_points(grid.polytope, 1))
    return sy.from_lattice_coefficients(grid, scale * rng.standard_normal(n))


def report_dict(rep: EnergyReport) -> dict:
    return {k: float(v) for k, v in rep.__dict__.items()}
