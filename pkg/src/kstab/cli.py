"""Command line harness: ``kstab flow | na | theorem | sweep``.

Exit codes: 0 success, 2 a checked contract or monitor failed, 3 the solver
failed, 64 invalid configuration.  Every output file carries the hash of the
effective configuration and the package version, and reruns with the same
configuration write identical bytes.
"""

from __future__ import annotations

import os

# cap BLAS threads before numpy is imported
_threads = os.environ.get("KSTAB_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import flows as fl  # noqa: E402
from . import na  # noqa: E402
from . import optimize as op  # noqa: E402
from . import symplectic as sy  # noqa: E402
from .errors import ConfigInvalid, KstabError, NonConvex, StepFailed  # noqa: E402
from .polytope import by_name, from_json as polytope_from_json  # noqa: E402

EXIT_OK, EXIT_CONTRACT, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 64
ORACLE_KS = (25, 50, 100, 200)

log = logging.getLogger("kstab")

_TOP_KEYS = {"polytope", "nodes_per_axis", "flow", "search", "output_dir", "rng_seed", "initial", "pairs", "polytopes", "sweep"}
_FLOW_KEYS = {"kind", "dt_init", "dt_control", "t_max", "stop_tol", "snapshot_times", "dt_max", "growth", "stop_on_plateau", "plateau_rtol", "plateau_fraction", "t_min"}
_SEARCH_KEYS = {"max_pieces", "seeds", "rng_seed", "max_iters", "tol_step", "coef_bound"}


# ---------------------------------------------------------------------------
# configuration


def _check_threads():
    t = os.environ.get("KSTAB_THREADS")
    if t is not None and not (t.isdigit() and int(t) > 0):
        raise ConfigInvalid("KSTAB_THREADS", "must be a positive integer")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("config", f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise ConfigInvalid("config", str(exc)) from None
    if not isinstance(cfg, dict):
        raise ConfigInvalid("config", "top level must be an object")
    return cfg


def validate(cfg: dict) -> dict:
    for k in cfg:
        if k not in _TOP_KEYS:
            raise ConfigInvalid(k, "unknown key")
    for sub, keys in (("flow", _FLOW_KEYS), ("search", _SEARCH_KEYS)):
        if sub in cfg:
            if not isinstance(cfg[sub], dict):
                raise ConfigInvalid(sub, "must be an object")
            for k in cfg[sub]:
                if k not in keys:
                    raise ConfigInvalid(f"{sub}.{k}", "unknown key")
    if "nodes_per_axis" in cfg:
        m = cfg["nodes_per_axis"]
        if not isinstance(m, int) or m < 33:
            raise ConfigInvalid("nodes_per_axis", "must be an integer >= 33")
    if "initial" in cfg and cfg["initial"] not in ("reference", "perturbed"):
        raise ConfigInvalid("initial", "expected 'reference' or 'perturbed'")
    return cfg


def resolve_polytope(spec):
    try:
        if isinstance(spec, str):
            return by_name(spec)
        if isinstance(spec, dict):
            return polytope_from_json(spec)
    except (KeyError, ValueError, KstabError) as exc:
        raise ConfigInvalid("polytope", str(exc)) from None
    raise ConfigInvalid("polytope", "expected a registry name or an object with normals")


def flow_config(cfg: dict, kind=None) -> fl.FlowConfig:
    d = dict(cfg.get("flow", {}))
    if kind is not None:
        d["kind"] = kind
    try:
        return fl.FlowConfig(**d)
    except TypeError as exc:
        raise ConfigInvalid("flow", str(exc)) from None


def search_config(cfg: dict) -> op.SearchConfig:
    d = dict(cfg.get("search", {}))
    d.setdefault("rng_seed", cfg.get("rng_seed", 0))
    return op.SearchConfig(**d)


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _header(cfg: dict) -> list:
    return [f"kstab {__version__}", f"config_hash {config_hash(cfg)}"]


def _write_json(path: Path, obj: dict, cfg: dict) -> None:
    out = {"kstab_version": __version__, "config_hash": config_hash(cfg)}
    out.update(obj)
    path.write_text(json.dumps(out, sort_keys=True, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _outdir(cfg: dict, args) -> Path:
    d = Path(args.out or cfg.get("output_dir") or ".")
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigInvalid("output_dir", str(exc)) from None
    if not os.access(d, os.W_OK):
        raise ConfigInvalid("output_dir", "not writable")
    return d


def _merge_args(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if getattr(args, "polytope", None):
        cfg["polytope"] = args.polytope
    if getattr(args, "nodes", None):
        cfg["nodes_per_axis"] = args.nodes
    if getattr(args, "seed", None) is not None:
        cfg["rng_seed"] = args.seed
    if getattr(args, "t_max", None) is not None:
        cfg.setdefault("flow", {})
        cfg["flow"] = dict(cfg["flow"], t_max=args.t_max)
    return validate(cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_flow(args) -> int:
    cfg = _merge_args(load_config(args.config), args)
    if args.kind:
        cfg["flow"] = dict(cfg.get("flow", {}), kind=args.kind)
    fcfg = flow_config(cfg)
    cfg["flow"] = dict(cfg.get("flow", {}), kind=fcfg.kind)
    P = resolve_polytope(cfg.get("polytope", "P1"))
    out = _outdir(cfg, args)
    grid = sy.SymplecticGrid.from_nodes_per_axis(P, cfg.get("nodes_per_axis", 129))
    grid = sy.symplectic_grid(P, grid.k)
    if cfg.get("initial", "reference") == "perturbed":
        M0 = fl.perturbed_initial(grid, cfg.get("rng_seed", 0))
    else:
        M0 = sy.reference(grid)
    try:
        trace = fl.run(M0, fcfg)
    except (StepFailed, NonConvex) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    stem = f"flow_{P.name or 'custom'}_{fcfg.kind}"
    trace.to_csv(out / f"{stem}.csv", header_lines=_header(cfg))
    report = fl.monotonicity_report(trace)
    ok = all(v <= fl.MONITOR_TOL for _, v in report)
    final = trace.reports[-1]
    summary = {
        "polytope": P.name,
        "kind": fcfg.kind,
        "grid_k": grid.k,
        "t_final": trace.times[-1],
        "stop_reason": trace.stop_reason,
        "final": fl.report_dict(final),
        "slope_D": trace.slope_D,
        "linear_bound_A": fl.linear_bound_constant(trace),
        "monotonicity": {k: v for k, v in report},
        "monitors_pass": ok,
    }
    _write_json(out / f"{stem}_monitors.json", summary, cfg)
    print(json.dumps({k: summary[k] for k in ("kind", "t_final", "stop_reason", "monitors_pass")}, sort_keys=True))
    print(f"R = {final.ricci_calabi:.6g}  H = {final.h_functional:.6g}  D = {final.D:.6g}")
    return EXIT_OK if ok else EXIT_CONTRACT


def cmd_na(args) -> int:
    P = resolve_polytope(args.polytope)
    try:
        with open(args.f_file) as fh:
            f = na.from_json(P, fh.read())
    except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise ConfigInvalid("pieces", f"could not read PL function: {exc}") from None
    rep = na.na_report(f)
    print(rep.to_json())
    print(f"dna = {rep.dna:.6f}")
    print(f"{'k':>5} {'N_k':>8} {'ena_k':>12} {'|err|':>10} {'k*err':>8} {'F_k':>12} {'norm2_k':>12}")
    for k in ORACLE_KS:
        try:
            o = na.lattice_oracle(f, k)
        except KstabError as exc:
            print(f"{k:>5} oracle unavailable: {exc}")
            continue
        err = abs(o.ena_k - rep.ena)
        print(f"{k:>5} {o.N_k:>8} {o.ena_k:>12.6f} {err:>10.2e} {k * err:>8.4f} {o.F_k:>12.6f} {o.norm2_k:>12.6f}")
    return EXIT_OK


def cmd_theorem(args) -> int:
    cfg = _merge_args(load_config(args.config), args)
    P = resolve_polytope(cfg.get("polytope", "Bl1P2"))
    out = _outdir(cfg, args)
    which = args.which.lower()
    kind = fl.INVERSE_MA if which == "a" else fl.KAHLER_RICCI
    fd = dict(cfg.get("flow", {}))
    fd.setdefault("t_max", 32.0)
    fd["kind"] = kind
    cfg["flow"] = fd
    fcfg = flow_config(cfg)
    scfg = search_config(cfg)
    m = cfg.get("nodes_per_axis", 129)
    try:
        if which == "a":
            rep = op.theorem_a_gap(P, fcfg, scfg, m, perturb_seed=cfg.get("rng_seed", 0) + 1)
        else:
            rep = op.theorem_b_gap(P, fcfg, scfg, m, perturb_seed=cfg.get("rng_seed", 0) + 1)
    except (StepFailed, NonConvex) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    stem = f"theorem_{which}_{P.name or 'custom'}"
    ok = rep.contracts_hold()
    d = rep.to_dict()
    d["contracts_hold"] = ok
    _write_json(out / f"{stem}.json", d, cfg)
    col = "R" if which == "a" else "H"
    with open(out / f"{stem}_curve.csv", "w", newline="") as fh:
        for line in _header(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "flow_value", "best_value"])
        tr = rep.traces[0]
        vals = tr.column(col)
        for t, v in zip(tr.times, vals):
            v = float(np.sqrt(max(v, 0.0))) if which == "a" else float(v)
            w.writerow([repr(float(t)), repr(v), repr(float(rep.best_value))])
    print(f"flow_limit = {rep.flow_limit:.8f}  best_value = {rep.best_value:.8f}  relative_gap = {rep.relative_gap:.3e}  violations = {rep.inequality_violations}")
    return EXIT_OK if ok else EXIT_CONTRACT


def cmd_sweep(args) -> int:
    """Moment-weight inequality on random (metric, f) pairs, or best ratio against the number of pieces."""
    cfg = validate(load_config(args.config))
    out = _outdir(cfg, args)
    seed = cfg.get("rng_seed", 0) if args.seed is None else args.seed
    cfg["rng_seed"] = seed
    if args.mode == "pieces":
        P = resolve_polytope(args.polytope or cfg.get("polytope", "Bl1P2"))
        scfg = search_config(dict(cfg, search=dict(cfg.get("search", {}), max_pieces=args.max_pieces)))
        _, _, hist = op.maximize_ratio(P, scfg, return_history=True)
        with open(out / f"sweep_pieces_{P.name}.csv", "w", newline="") as fh:
            for line in _header(cfg):
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["max_pieces", "best_ratio"])
            for J, v in hist:
                w.writerow([J, repr(float(v))])
                print(f"{J} {v:.10f}")
        return EXIT_OK
    names = cfg.get("polytopes", ["P1", "P2", "P1xP1", "Bl1P2", "Bl2P2"])
    pairs = int(cfg.get("pairs", args.pairs))
    rows = moment_weight_sweep([resolve_polytope(n) for n in names], pairs, seed)
    with open(out / "sweep_moment_weight.csv", "w", newline="") as fh:
        for line in _header(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["polytope", "pair", "margin"])
        for name, i, m in rows:
            w.writerow([name, i, repr(float(m))])
    bad = sum(m < -op.MARGIN_TOL for _, _, m in rows)
    print(f"{len(rows)} pairs, min margin {min(m for *_, m in rows):.3e}, violations {bad}")
    return EXIT_OK if bad == 0 else EXIT_CONTRACT


def random_pl(P, rng, max_pieces: int = 4) -> na.PLConvex:
    J = int(rng.integers(1, max_pieces + 1))
    pieces = [(tuple(rng.standard_normal(P.dim)), float(rng.standard_normal())) for _ in range(J)]
    return na.pl_convex(P, pieces)


def random_metric(grid, rng, n_coef=None) -> sy.SymplecticMetric:
    """Lattice-coefficient metric, redrawn until its discrete Hessian is positive."""
    n_coef = n_coef or len(sy.lattice_points(grid.polytope, 1))
    while True:
        M = sy.from_lattice_coefficients(grid, rng.uniform(0.1, 1.0) * rng.standard_normal(n_coef))
        if M.is_convex():
            return M


def moment_weight_sweep(polytopes, pairs: int, seed: int, k: int = 16):
    """``(name, index, margin)`` for random metrics and random PL functions."""
    rows = []
    for P in polytopes:
        grid = sy.symplectic_grid(P, k)
        rng = np.random.default_rng([seed, len(P.normals), P.dim])
        n_coef = len(sy.lattice_points(P, 1))
        for i in range(pairs):
            M = random_metric(grid, rng, n_coef)
            while True:
                f = random_pl(P, rng)
                if na.norm_p(f, 2) > 1e-6:
                    break
            rows.append((P.name, i, op.verify_moment_weight(M, f)))
    return rows


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kstab", description="Toric flows, destabilizers and non-Archimedean invariants.")
    p.add_argument("--version", action="version", version=f"kstab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flow", help="run a flow and write its trace")
    f.add_argument("--config")
    f.add_argument("--polytope")
    f.add_argument("--kind", help="InverseMA (ima) or KahlerRicci (krf)")
    f.add_argument("--nodes", type=int)
    f.add_argument("--t-max", type=float, dest="t_max")
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.set_defaults(func=cmd_flow)

    n = sub.add_parser("na", help="non-Archimedean invariants of a PL function")
    n.add_argument("f_file", help='JSON file {"pieces": [[a..., b], ...]}')
    n.add_argument("--polytope", required=True)
    n.set_defaults(func=cmd_na)

    t = sub.add_parser("theorem", help="compare the flow limit with the best destabilizer")
    t.add_argument("which", choices=["a", "b", "A", "B"])
    t.add_argument("--config")
    t.add_argument("--polytope")
    t.add_argument("--nodes", type=int)
    t.add_argument("--t-max", type=float, dest="t_max")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_theorem)

    s = sub.add_parser("sweep", help="moment-weight sweep or best ratio against the number of pieces")
    s.add_argument("mode", choices=["moment-weight", "pieces"])
    s.add_argument("--config")
    s.add_argument("--polytope")
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--max-pieces", type=int, default=6, dest="max_pieces")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _check_threads()
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailed, NonConvex) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
