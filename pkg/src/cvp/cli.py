"""``cvp`` command line: one subcommand per pipeline stage.

Exit codes: 0 when the run passes its check, 1 when a check fails, 2 for
usage or configuration errors.  Every run emits a manifest with inputs,
parameters, versions and wall time.
"""
from __future__ import annotations

import os

# cap BLAS pools before numpy is imported
if os.environ.get("CVP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CVP_THREADS"])

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .action_el import check_restricted_el, eval_action, eval_ell, solve_critical_weights, translation_test_space
from .instance import (InstanceError, KernelSpec, dumps, generate_lattice, load_instance,
                       save_instance)
from .jets import jet_length, make_jet

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{path}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _load_instance(path):
    if not Path(path).exists():
        raise ConfigError(f"{path}: no such file")
    return load_instance(path)


def _write(path, text: str) -> None:
    Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _emit(doc, out) -> None:
    text = dumps(doc)
    if out:
        _write(out, text)
    else:
        sys.stdout.write(text + "\n")


def _load_vector(inst, path, what="inhomogeneity"):
    """Full jet (length ``N(1+m)``), vary coefficients (length ``N``) or ``{"points", "values"}``."""
    doc = _read_json(path)
    n, k = inst.n, jet_length(inst)
    if isinstance(doc, dict):
        if "points" not in doc or "values" not in doc:
            raise ConfigError(f"{path}: sparse {what} needs fields 'points' and 'values'")
        pts = np.asarray(doc["points"], dtype=int)
        vals = np.asarray(doc["values"], dtype=float)
        if pts.shape != vals.shape:
            raise ConfigError(f"{path}: 'points' and 'values' differ in length")
        if pts.size and (pts.min() < 0 or pts.max() >= n):
            raise ConfigError(f"{path}: point index out of range [0, {n})")
        c = np.zeros(n)
        np.add.at(c, pts, vals)
        return c
    arr = np.asarray(doc, dtype=float)
    if arr.ndim != 1 or arr.size not in (n, k):
        raise ConfigError(f"{path}: {what} must have length {n} (coefficients) or {k} (jet), "
                          f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path}: {what} has non-finite entries")
    return arr


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(args, inputs, outputs, t0, status) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}
    return {
        "command": args.command,
        "status": status,
        "parameters": params,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "outputs": [str(p) for p in outputs if p],
        "versions": {"cvp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "threads": os.environ.get("CVP_THREADS"),
        "wall_time_s": round(time.perf_counter() - t0, 6),
    }


def _parse_lattice(s: str):
    try:
        ext = tuple(int(p) for p in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"lattice must look like 8x8, got {s!r}") from None
    if not ext or min(ext) < 1:
        raise argparse.ArgumentTypeError("lattice extents must be positive")
    return ext


def _positive(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s!r}")
    return v


def _axes(s: str):
    if s.strip() == "":
        return ()
    try:
        return tuple(int(a) for a in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"axes must be a comma list of integers, got {s!r}") from None


def _template(path):
    from .gluing import CoveringTemplate
    if path is None:
        return CoveringTemplate(), None
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: covering must be a JSON object")
    doc = dict(doc)
    orientation = doc.pop("orientation", None)
    try:
        return CoveringTemplate.from_dict(doc), orientation
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    kernel = KernelSpec(args.kernel, args.range, args.amplitude, args.cone_slope)
    inst = generate_lattice(len(args.lattice), args.lattice, args.spacing, kernel,
                            periodic_axes=args.periodic, s_param=args.s)
    save_instance(inst, args.out)
    return EXIT_OK, {"n": inst.n, "dim": inst.dim}, [], [args.out]


def cmd_critical(args):
    inst = _load_instance(args.instance)
    try:
        crit = solve_critical_weights(inst)
    except InstanceError as exc:
        return EXIT_FAIL, {"error": str(exc)}, [args.instance], []
    out = args.out or args.instance
    save_instance(crit, out)
    rep = eval_ell(crit)
    return EXIT_OK, {"max_abs_ell": rep.max_abs_ell, "action": eval_action(crit),
                     "weight_min": float(crit.weights.min()),
                     "weight_max": float(crit.weights.max())}, [args.instance], [out]


def _interior(inst, margin: float):
    """Points farther than ``margin`` from every non-periodic boundary."""
    keep = np.ones(inst.n, dtype=bool)
    for ax, per in enumerate(inst.periodic):
        if per is None:
            x = inst.points[:, ax]
            keep &= (x - x.min() > margin) & (x.max() - x > margin)
    return np.flatnonzero(keep)


def cmd_check_el(args):
    inst = _load_instance(args.instance)
    pts = _interior(inst, args.interior_margin) if args.interior_margin > 0 else np.arange(inst.n)
    test = translation_test_space(inst, pts)
    passed, worst = check_restricted_el(inst, test, args.tol)
    rep = eval_ell(inst, test)
    doc = rep.to_dict()
    doc.update({"passed": passed, "worst": worst, "tol": args.tol, "test_points": int(pts.size),
                "max_abs_ell_ok": bool(rep.max_abs_ell <= args.tol * max(inst.s_param, 1.0))})
    ok = passed and doc["max_abs_ell_ok"]
    _emit(doc, args.out)
    return (EXIT_OK if ok else EXIT_FAIL), {"passed": ok, "worst": worst}, [args.instance], [args.out]


def cmd_delta(args):
    from .linfield import assemble_delta
    inst = _load_instance(args.instance)
    op = assemble_delta(inst)
    if args.dump:
        np.savetxt(args.dump, op.D, delimiter=",", fmt="%.17g")
    WD = op.W[:, None] * op.D
    asym = float(np.abs(WD - WD.T).max())
    doc = {"shape": list(op.D.shape), "weighted_asymmetry": asym}
    ok = asym <= 1e-12 * max(np.abs(WD).max(), 1.0)
    return (EXIT_OK if ok else EXIT_FAIL), doc, [args.instance], [args.dump]


def _random_jet(inst, seed):
    rng = np.random.default_rng(seed)
    return make_jet(inst, rng.standard_normal(inst.n), rng.standard_normal((inst.n, inst.dim)))


def _foliation(inst, args, U=None):
    from .surface_layers import Foliation
    tau = inst.times
    t_min = tau.min() if args.t_min is None else args.t_min
    t_max = tau.max() + args.delta if args.t_max is None else args.t_max
    return Foliation(inst, np.arange(inst.n) if U is None else U, float(t_min), float(t_max),
                     args.delta, args.n_grid)


def cmd_energy_check(args):
    from .linfield import assemble_delta, assemble_delta2
    from .surface_layers import energy_identity_check
    inst = _load_instance(args.instance)
    v = _load_vector(inst, args.jet, "jet") if args.jet else _random_jet(inst, args.seed)
    if v.size != jet_length(inst):
        raise ConfigError("energy-check needs a full jet")
    fol = _foliation(inst, args)
    op, d2 = assemble_delta(inst), assemble_delta2(inst)
    t = float(np.mean(inst.times)) if args.t is None else args.t
    gaps = [energy_identity_check(inst, fol, v, t, h, op, d2)[2] for h in (args.h, args.h / 2)]
    scale = max(abs(energy_identity_check(inst, fol, v, t, args.h, op, d2)[1]), 1.0)
    floor = 1e-11 * scale
    order = float(np.log2(gaps[0] / gaps[1])) if gaps[1] > floor else float("inf")
    ok = order >= 1.9 or gaps[0] <= floor
    doc = {"t": t, "h": [args.h, args.h / 2], "gap": gaps, "order": order, "passed": ok}
    _emit(doc, args.out)
    return (EXIT_OK if ok else EXIT_FAIL), {"order": order}, [args.instance, args.jet], [args.out]


def cmd_hyperbolicity(args):
    from .jets import direction_space, vary_directions
    from .linfield import assemble_delta2
    from .surface_layers import verify_hyperbolicity
    inst = _load_instance(args.instance)
    fol = _foliation(inst, args)
    vary = direction_space(inst, vary_directions(inst, args.lam))
    rep = verify_hyperbolicity(inst, fol, args.t, vary, args.trials, args.seed, assemble_delta2(inst))
    doc = rep.to_dict()
    _emit(doc, args.out)
    return (EXIT_OK if rep.ok else EXIT_FAIL), {"C": rep.C, "ok": rep.ok}, [args.instance], [args.out]


def _lens_from_json(ctx, path, trials, seed):
    from .local_solver import band_lens, build_lens
    from .surface_layers import Foliation
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: lens must be a JSON object")
    for key in ("t_min", "t_max"):
        if key not in doc:
            raise ConfigError(f"{path}: missing field '{key}'")
    delta = float(doc.get("delta", 1.0))
    n_grid = int(doc.get("n_grid", 9))
    orientation = doc.get("orientation", "future")
    if doc.get("U") is None:
        return band_lens(ctx, float(doc["t_min"]), float(doc["t_max"]), delta, orientation, n_grid,
                         trials=trials, seed=seed)
    U = np.asarray(doc["U"], dtype=int)
    if U.size and (U.min() < 0 or U.max() >= ctx.inst.n):
        raise ConfigError(f"{path}: field 'U' has indices outside [0, {ctx.inst.n})")
    fol = Foliation(ctx.inst, U, float(doc["t_min"]), float(doc["t_max"]), delta, n_grid)
    return build_lens(ctx, fol, orientation, trials=trials, seed=seed)


def cmd_solve_local(args):
    from .local_solver import Context, solve_weak
    inst = _load_instance(args.instance)
    doc = _read_json(args.lens)
    lam = doc.get("lam", args.lam) if isinstance(doc, dict) else args.lam
    ctx = Context(inst, float(lam))
    lens = _lens_from_json(ctx, args.lens, args.trials, args.seed)
    w = _load_vector(inst, args.inhom)
    sol = solve_weak(lens, w)
    _write(args.out, dumps([float(x) for x in sol.v]))
    doc = {"gamma": sol.gamma, "residual": sol.residual, "L": lens.L.tolist(), "W": lens.W.tolist(),
           "Z": lens.Z.tolist(), "test_dim": int(lens.test_basis.shape[0])}
    return EXIT_OK, doc, [args.instance, args.lens, args.inhom], [args.out]


def cmd_glue(args):
    from .gluing import build_covering, glue_global
    from .local_solver import Context
    inst = _load_instance(args.instance)
    tmpl, orient = _template(args.covering)
    orientation = args.orientation or orient or "future"
    ctx = Context(inst, tmpl.lam)
    cov = build_covering(ctx, tmpl, orientation)
    w = _load_vector(inst, args.inhom)
    v, trace = glue_global(cov, w, check_tol=args.tol)
    _write(args.out, dumps([float(x) for x in ctx.to_jet(v)]))
    if args.trace:
        doc = trace.to_dict()
        doc.update({"final_error": trace.final_error, "parked": trace.parked.tolist(),
                    "covering": cov.certificate()})
        _write(args.trace, dumps(doc))
    return EXIT_OK, {"rounds": trace.n_rounds, "final_error": trace.final_error}, \
        [args.instance, args.covering, args.inhom], [args.out, args.trace]


def cmd_green(args):
    from .gluing import build_covering
    from .green import assemble_greens, support_causality
    from .local_solver import Context
    inst = _load_instance(args.instance)
    tmpl, _ = _template(args.covering)
    ctx = Context(inst, tmpl.lam)
    gs = assemble_greens(build_covering(ctx, tmpl, "future"), build_covering(ctx, tmpl, "past"))
    gs.save(args.out)
    err = gs.weak_errors("G")
    doc = {"sources": int(gs.sources.size), "flagged": len(gs.flagged),
           "test_dim": int(gs.test_basis.shape[0]),
           "max_weak_error_G": float(err.max(initial=0.0)), "support": support_causality(gs)}
    ok = not gs.flagged and doc["max_weak_error_G"] <= 1e-6
    return (EXIT_OK if ok else EXIT_FAIL), doc, [args.instance, args.covering], [args.out]


def cmd_exact_seq(args):
    from .green import extract_sequence_spaces, verify_exact_sequence
    gs = _load_gs(args.gs)
    spaces = extract_sequence_spaces(gs, args.threshold)
    rep = verify_exact_sequence(gs, spaces, args.tol)
    _emit(rep, args.out)
    summary = {c["check"]: ("vacuous" if c["vacuous"] else ("pass" if c["passed"] else "FAIL"))
               for c in rep["checks"]}
    return (EXIT_OK if rep["passed"] else EXIT_FAIL), summary, [args.gs], [args.out]


def _load_gs(path):
    from .green import GreensSystem
    if not Path(path).exists():
        raise ConfigError(f"{path}: no such file")
    try:
        return GreensSystem.load(path)
    except (KeyError, OSError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_cones(args):
    from .cones import (build_hatR, lightcone_report, transitive_closure, write_dot, write_pairs_csv,
                        write_slices_csv)
    gs = _load_gs(args.gs)
    hat = build_hatR(gs, args.r_nb)
    R = transitive_closure(hat)
    rel = R if args.kind == "R" else hat
    write_pairs_csv(rel, args.out)
    if args.dot:
        write_dot(rel, args.dot, gs.inst)
    if args.slices:
        write_slices_csv(rel, gs.inst, args.slices)
    cone = lightcone_report(gs)
    doc = {"hatR_pairs": int(hat.pairs.sum()), "R_pairs": int(R.pairs.sum()),
           "transitive": R.is_transitive(), "empty": bool(gs.sources.size == 0),
           "lightcone_violations": cone["n_violations"],
           "max_excess_over_allowed": cone["max_excess_over_allowed"]}
    return (EXIT_OK if doc["transitive"] else EXIT_FAIL), doc, [args.gs], \
        [args.out, args.dot, args.slices]


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvp", description="Linear dynamics of discrete causal variational "
                                "principles: instances, field operators, lenses, gluing, Green's "
                                "operators and causal cones.")
    p.add_argument("--version", action="version", version=f"cvp {__version__}")
    p.add_argument("--manifest", help="manifest path (default: <first output>.manifest.json, else stderr)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def fol_args(sp):
        sp.add_argument("--t-min", type=float, help="foliation start (default: earliest time)")
        sp.add_argument("--t-max", type=float, help="foliation end (default: latest time + delta)")
        sp.add_argument("--delta", type=_positive, default=1.0, help="cutoff width")
        sp.add_argument("--n-grid", type=int, default=9, help="grid size of the foliation parameter")

    sp = add("gen", cmd_gen, "generate a lattice instance")
    sp.add_argument("--lattice", type=_parse_lattice, required=True, help="extents, e.g. 16x16 (time first)")
    sp.add_argument("--spacing", type=_positive, default=1.0)
    sp.add_argument("--kernel", choices=["iso_bump", "lightcone_bump"], default="iso_bump")
    sp.add_argument("--range", type=_positive, default=1.5, help="kernel range r")
    sp.add_argument("--amplitude", type=_positive, default=1.0)
    sp.add_argument("--cone-slope", type=_positive, default=1.0)
    sp.add_argument("--periodic", type=_axes, default=(1,), help="comma list of periodic axes (default: 1)")
    sp.add_argument("--s", type=_positive, default=1.0, help="Lagrange parameter s")
    sp.add_argument("--out", required=True)

    sp = add("critical", cmd_critical, "solve for critical weights")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--out", help="output instance (default: overwrite the input)")

    sp = add("check-el", cmd_check_el, "check the restricted Euler-Lagrange equations")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--tol", type=_positive, default=1e-10)
    sp.add_argument("--interior-margin", type=float, default=0.0,
                    help="only test points farther than this from non-periodic boundaries")
    sp.add_argument("--out")

    sp = add("delta", cmd_delta, "assemble the linearized field operator")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--dump", help="write D as row-major CSV")

    sp = add("energy-check", cmd_energy_check, "verify the energy identity by h-halving")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--jet", help="jet JSON (default: random with --seed)")
    sp.add_argument("--t", type=float)
    sp.add_argument("--h", type=_positive, default=1e-3)
    sp.add_argument("--seed", type=int, default=42)
    fol_args(sp)
    sp.add_argument("--out")

    sp = add("hyperbolicity", cmd_hyperbolicity, "certify the hyperbolicity condition at one time")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--trials", type=int, default=16)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--lam", type=_positive, default=0.4, help="vary-direction slope")
    fol_args(sp)
    sp.add_argument("--out")

    sp = add("solve-local", cmd_solve_local, "weak solution in one lens")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--lens", required=True, help="lens JSON: t_min, t_max, [U, delta, n_grid, orientation]")
    sp.add_argument("--inhom", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lam", type=_positive, default=0.4)
    sp.add_argument("--trials", type=int, default=8)
    sp.add_argument("--seed", type=int, default=42)

    sp = add("glue", cmd_glue, "global weak solution by inductive gluing")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--covering", help="covering template JSON (height, stride, delta, ...)")
    sp.add_argument("--orientation", choices=["future", "past"])
    sp.add_argument("--inhom", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    sp.add_argument("--tol", type=_positive, default=1e-6, help="global weak residual tolerance")

    sp = add("green", cmd_green, "assemble retarded and advanced Green's operators")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--covering", help="covering template JSON")
    sp.add_argument("--out", required=True)

    sp = add("exact-seq", cmd_exact_seq, "verify the exact sequence")
    sp.add_argument("--gs", required=True)
    sp.add_argument("--tol", type=_positive, default=1e-8)
    sp.add_argument("--threshold", type=_positive, default=1e-8, help="near-null threshold for the spaces")
    sp.add_argument("--out")

    sp = add("cones", cmd_cones, "causal relations from retarded supports")
    sp.add_argument("--gs", required=True)
    sp.add_argument("--out", required=True, help="CSV of pairs (i,j)")
    sp.add_argument("--dot")
    sp.add_argument("--slices", help="per-time-slice cross-section CSV")
    sp.add_argument("--kind", choices=["R", "hatR"], default="R")
    sp.add_argument("--r-nb", type=_positive, help="neighbourhood radius (default: lattice spacing)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        code, summary, inputs, outputs = args.func(args)
    except (ConfigError, InstanceError) as exc:
        print(f"cvp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"cvp {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    status = "pass" if code == EXIT_OK else "fail"
    man = _manifest(args, inputs, outputs, t0, status)
    man["summary"] = summary
    target = args.manifest or next((f"{o}.manifest.json" for o in outputs if o), None)
    if target:
        _write(target, dumps(man))
    else:
        sys.stderr.write(dumps(man) + "\n")
    print(f"cvp {args.command}: {status}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
