"""Destabilizer search and the two infimum/supremum comparisons.

``maximize_ratio`` searches PL convex functions for the largest
``-D^NA / ||f||_2``; ``maximize_h`` for the largest H-invariant.  The flow
side runs the inverse Monge-Ampere flow (for R) or the Kahler-Ricci flow
(for H) and reads off the plateau.  The gap reports compare the two sides
and count violations of the inequalities that must hold at every
resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from . import flows as fl
from . import na
from . import symplectic as sy
from .errors import ConfigInvalid, NotCauchy, TrivialConfiguration
from .geodesic import ray_from_flow, virtual_slope_F
from .metric import ToricMetric
from .metric import energies as toric_energies
from .polytope import Polytope

STABLE_FLOOR = 1e-2
CHAIN_TOL = 1e-6
MARGIN_TOL = 1e-8


@dataclass
class SearchConfig:
    max_pieces: int = 4
    seeds: int = 16
    rng_seed: int = 0
    max_iters: int = 3000
    tol_step: float = 1e-10
    coef_bound: float = 10.0

    def __post_init__(self):
        if int(self.max_pieces) < 1:
            raise ConfigInvalid("max_pieces", "must be >= 1")
        if int(self.seeds) < 4:
            raise ConfigInvalid("seeds", "must be >= 4")
        if not self.max_iters > 0:
            raise ConfigInvalid("max_iters", "must be positive")
        if not self.tol_step > 0:
            raise ConfigInvalid("tol_step", "must be positive")
        self.max_pieces = int(self.max_pieces)
        self.seeds = int(self.seeds)


# ---------------------------------------------------------------------------
# moment-weight inequality


def ricci_calabi(M) -> float:
    if isinstance(M, ToricMetric):
        return toric_energies(M, M).ricci_calabi
    return sy.energies(M, M).ricci_calabi


def verify_moment_weight(M, f: na.PLConvex) -> float:
    """``R(M)^{1/2} - (-D^NA(f) / ||f||_2)``; non-negative by Cauchy-Schwarz."""
    return math.sqrt(ricci_calabi(M)) - na.ratio(f)


# ---------------------------------------------------------------------------
# search


def _unpack(P: Polytope, theta, J):
    th = np.asarray(theta, dtype=float).reshape(J, P.dim + 1)
    return na.PLConvex(P, tuple((tuple(float(c) for c in row[:-1]), float(row[-1])) for row in th))


def _ratio_objective(P, J):
    def obj(theta):
        f = _unpack(P, theta, J)
        try:
            return -na.ratio(f)
        except TrivialConfiguration:
            return 0.0

    return obj


def _h_objective(P, J):
    def obj(theta):
        return -na.h_invariant(_unpack(P, theta, J))

    return obj


def _affine_seeds(P: Polytope, scale: float):
    n = P.dim
    dirs = [np.eye(n)[i] * s for i in range(n) for s in (1.0, -1.0)]
    if n > 1:
        dirs += [np.ones(n) / math.sqrt(n), -np.ones(n) / math.sqrt(n)]
    return [np.append(scale * d, 0.0) for d in dirs]


def _search(P: Polytope, cfg: SearchConfig, make_objective, scale: float, bounded: bool):
    """Nelder-Mead multistart, family by family.

    The affine family starts from coordinate directions.  Each larger family
    starts once from the best function of the previous family (with an extra
    inactive piece) and from ``cfg.seeds`` random starts, so the best value
    is non-decreasing in both ``max_pieces`` and ``seeds``.
    """
    n = P.dim
    history = []
    best_theta, best_val = None, math.inf
    for J in range(1, cfg.max_pieces + 1):
        obj = make_objective(P, J)
        starts = []
        if J == 1:
            starts += _affine_seeds(P, scale)
        else:
            extra = np.append(np.zeros(n), -1e3)
            starts.append(np.concatenate([best_theta, extra]))
        for i in range(cfg.seeds):
            rng = np.random.default_rng([cfg.rng_seed, J, i])
            th = scale * rng.standard_normal(J * (n + 1))
            starts.append(th)
        bounds = None
        if bounded:
            bounds = [(-cfg.coef_bound, cfg.coef_bound)] * (J * (n + 1))
            starts = [np.clip(s, -cfg.coef_bound, cfg.coef_bound) for s in starts]
        fam_theta, fam_val = None, math.inf
        for s in starts:
            res = minimize(
                obj,
                s,
                method="Nelder-Mead",
                bounds=bounds,
                options={"maxiter": cfg.max_iters, "maxfev": 2 * cfg.max_iters, "xatol": cfg.tol_step, "fatol": 1e-14, "adaptive": True},
            )
            val = float(res.fun)
            if val < fam_val:
                fam_theta, fam_val = np.asarray(res.x), val
        if J > 1 and best_val < fam_val:
            # the previous family embeds into this one
            fam_theta = np.concatenate([best_theta, np.append(np.zeros(n), -1e3)])
            fam_val = best_val
        best_theta, best_val = fam_theta, fam_val
        history.append((J, -fam_val))
    return best_theta, -best_val, history


def _normalized(f: na.PLConvex) -> na.PLConvex:
    """Pruned copy with ``f(0) = 0``."""
    g = na.pl_convex(f.polytope, list(f.pieces))
    return g.shifted(-g.value_at_origin())


def maximize_ratio(P: Polytope, cfg: SearchConfig | None = None, return_history: bool = False):
    """Largest ``-D^NA / ||f||_2`` over PL convex ``f`` with at most ``max_pieces`` pieces.

    Returns ``(f*, value)`` with ``f*`` normalized by ``f(0) = 0`` and
    ``||f||_2 = 1``.
    """
    cfg = cfg or SearchConfig()
    theta, value, hist = _search(P, cfg, _ratio_objective, 1.0, False)
    f = _normalized(_unpack(P, theta, len(theta) // (P.dim + 1)))
    try:
        f = f.scaled(1.0 / na.norm_p(f, 2))
    except ZeroDivisionError:
        pass
    return (f, value, hist) if return_history else (f, value)


def maximize_h(P: Polytope, cfg: SearchConfig | None = None, return_history: bool = False):
    """Largest H-invariant ``f(0) - log avg_P e^f`` over PL convex ``f`` with bounded coefficients."""
    cfg = cfg or SearchConfig()
    theta, value, hist = _search(P, cfg, _h_objective, 0.5, True)
    f = _normalized(_unpack(P, theta, len(theta) // (P.dim + 1)))
    return (f, value, hist) if return_history else (f, value)


def golden_affine_h(P: Polytope, direction, bracket=(0.0, 0.5, 4.0)):
    """Maximize ``h(s <direction, y>)`` over ``s`` by golden-section search; returns ``(s, value)``."""
    d = tuple(float(c) for c in direction)

    def neg(s):
        return -na.h_invariant(na.PLConvex(P, ((tuple(s * c for c in d), 0.0),)))

    res = minimize_scalar(neg, bracket=bracket, method="golden", tol=1e-10)
    return float(res.x), -float(res.fun)


# ---------------------------------------------------------------------------
# gap reports


@dataclass
class GapReport:
    theorem: str
    polytope: str
    flow_limit: float
    best_value: float
    best_f: na.PLConvex
    relative_gap: float
    inequality_violations: int
    flow_limits: list = field(default_factory=list)
    ray_value: float = float("nan")
    details: dict = field(default_factory=dict)
    traces: list = field(default_factory=list, repr=False)

    @property
    def stable(self) -> bool:
        return self.flow_limit < STABLE_FLOOR

    def contracts_hold(self, tol_gap: float = 0.1) -> bool:
        agree = self.details.get("initial_agreement", 0.0)
        return self.inequality_violations == 0 and self.relative_gap <= tol_gap and (self.stable or agree <= 0.02)

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "polytope": self.polytope,
            "flow_limit": self.flow_limit,
            "flow_limits": list(self.flow_limits),
            "best_value": self.best_value,
            "best_f": json.loads(self.best_f.to_json()),
            "relative_gap": self.relative_gap,
            "inequality_violations": self.inequality_violations,
            "ray_value": self.ray_value,
            "details": self.details,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _initial_metrics(P: Polytope, nodes_per_axis: int, perturb_seed: int):
    grid = sy.SymplecticGrid.from_nodes_per_axis(P, nodes_per_axis)
    grid = sy.symplectic_grid(P, grid.k)
    return [sy.reference(grid), fl.perturbed_initial(grid, perturb_seed)]


def ray_ratio(g: np.ndarray, grid: sy.SymplecticGrid) -> float:
    """``(g(0) - avg g) / ||g - avg g||_2`` on the grid: the slope of ``-D`` over the speed of the ray."""
    w = grid.weights
    V = w.sum()
    origin = int(np.nonzero(np.all(grid.lattice == 0, axis=1))[0][0])
    m = float(np.dot(w, g) / V)
    s = math.sqrt(float(np.dot(w, (g - m) ** 2) / V))
    if s <= 1e-10:
        return 0.0
    return (float(g[origin]) - m) / s


def _relative_gap(flow_limit, best):
    return 0.0 if flow_limit < STABLE_FLOOR else (flow_limit - best) / flow_limit


def theorem_a_gap(P: Polytope, flow_cfg: fl.FlowConfig | None = None, search_cfg: SearchConfig | None = None, nodes_per_axis: int = 129, perturb_seed: int = 1, progress=None) -> GapReport:
    """Plateau of ``R^{1/2}`` along the inverse Monge-Ampere flow against the best destabilizer ratio."""
    flow_cfg = flow_cfg or fl.FlowConfig(kind=fl.INVERSE_MA, t_max=32.0)
    if flow_cfg.kind != fl.INVERSE_MA:
        raise ConfigInvalid("kind", "theorem A uses the InverseMA flow")
    traces = [fl.run(M0, flow_cfg, progress=progress) for M0 in _initial_metrics(P, nodes_per_axis, perturb_seed)]
    limits = [math.sqrt(max(tr.reports[-1].ricci_calabi, 0.0)) for tr in traces]
    flow_limit = limits[0]
    best_f, best, hist = maximize_ratio(P, search_cfg, return_history=True)
    details = {
        "grid_k": traces[0].initial.grid.k,
        "t_final": [tr.times[-1] for tr in traces],
        "slope_D": [tr.slope_D for tr in traces],
        "initial_agreement": abs(limits[0] - limits[1]) / max(limits[0], STABLE_FLOOR),
        "best_by_pieces": hist,
        "monotonicity": [dict(fl.monotonicity_report(tr)) for tr in traces],
        "affine_closed_form": na.affine_ratio_closed_form(P)[0],
    }
    try:
        path = ray_from_flow(traces[0])
        r = ray_ratio(path.g, path.grid)
        details["ray_cauchy"] = path.diagnostics["cauchy"]
        details["ray_e_slope"] = path.diagnostics["e_slope"]
    except NotCauchy as exc:
        r = float("nan")
        details["ray_error"] = str(exc)
    violations = 0
    if flow_limit < best - CHAIN_TOL:
        violations += 1
    if math.isfinite(r):
        violations += int(flow_limit < r - CHAIN_TOL) + int(r < best - CHAIN_TOL)
    margins = []
    if na.norm_p(best_f, 2) > 1e-10:
        for tr in traces:
            for _, M in tr.snapshots:
                margins.append(verify_moment_weight(M, best_f))
        # near the infimum the discrete R sits below its limit by the
        # discretization error, so flow snapshots get the flow-side tolerance
        violations += sum(m < -CHAIN_TOL for m in margins)
    details["min_moment_weight_margin"] = min(margins) if margins else None
    return GapReport("A", P.name or "custom", flow_limit, best, best_f, _relative_gap(flow_limit, best), int(violations), limits, r, details, traces)


def h_identity_error(trace: fl.FlowTrace, t_min: float = 1.0) -> float:
    """Largest relative mismatch of ``H = -dL/dt`` (central differences) at recorded times ``t >= t_min``."""
    t = np.asarray(trace.times)
    L = trace.column("L")
    H = trace.column("H")
    worst = 0.0
    for i in range(1, len(t) - 1):
        if t[i] < t_min:
            continue
        h0, h1 = t[i] - t[i - 1], t[i + 1] - t[i]
        # second-order derivative on a non-uniform stencil
        dL = (h0**2 * L[i + 1] - h1**2 * L[i - 1] + (h1**2 - h0**2) * L[i]) / (h0 * h1 * (h0 + h1))
        worst = max(worst, abs(H[i] + dL) / max(abs(H[i]), 1e-12))
    return worst


def theorem_b_gap(P: Polytope, flow_cfg: fl.FlowConfig | None = None, search_cfg: SearchConfig | None = None, nodes_per_axis: int = 129, perturb_seed: int = 1, progress=None) -> GapReport:
    """Plateau of H along the Kahler-Ricci flow against the best H-invariant."""
    flow_cfg = flow_cfg or fl.FlowConfig(kind=fl.KAHLER_RICCI, t_max=32.0)
    if flow_cfg.kind != fl.KAHLER_RICCI:
        raise ConfigInvalid("kind", "theorem B uses the KahlerRicci flow")
    traces = [fl.run(M0, flow_cfg, progress=progress) for M0 in _initial_metrics(P, nodes_per_axis, perturb_seed)]
    limits = [tr.reports[-1].h_functional for tr in traces]
    flow_limit = limits[0]
    best_f, best, hist = maximize_h(P, search_cfg, return_history=True)
    details = {
        "grid_k": traces[0].initial.grid.k,
        "t_final": [tr.times[-1] for tr in traces],
        "initial_agreement": abs(limits[0] - limits[1]) / max(abs(limits[0]), STABLE_FLOOR),
        "best_by_pieces": hist,
        "monotonicity": [dict(fl.monotonicity_report(tr)) for tr in traces],
        "h_identity_error": max(h_identity_error(tr) for tr in traces),
        "jensen_max": max(fl.jensen_bound(M) for tr in traces for _, M in tr.snapshots),
    }
    try:
        path = ray_from_flow(traces[0])
        details["ray_virtual_slope_F"] = virtual_slope_F(path.velocity_dh())
        details["ray_cauchy"] = path.diagnostics["cauchy"]
    except NotCauchy as exc:
        details["ray_error"] = str(exc)
    # affine optimum along the symmetric direction, as a scalar cross-check
    if P.dim == 2:
        d = -np.ones(2) / math.sqrt(2)
        details["golden_affine_h"] = golden_affine_h(P, d)[1]
    violations = int(flow_limit < best - CHAIN_TOL)
    return GapReport("B", P.name or "custom", flow_limit, best, best_f, _relative_gap(flow_limit, best), violations, limits, float("nan"), details, traces)
