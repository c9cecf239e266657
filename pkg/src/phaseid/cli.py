"""Command-line front end: ``phaseid <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 simulation failure, 4 solver
failure, 5 oracle mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .connection import PhaseAssignment, ReducedSensitivity, phase_index
from .feeder import FeederError, assemble_admittance, load_feeder
from .linear_pf import (ConvergenceError, RankDeficientError, build_A, remove_substation,
                        sensitivities)
from .measurements import MeasurementError, read_measurements, write_measurements
from .mmle import exhaustive_search, prepare, run_mmle
from .simulate import SimulationError, SimulationSpec, generate, perturb_model
from .slsq import SolverError
from .stats import accuracy

DEFAULT_SEED = 2024
EXIT_OK, EXIT_INVALID, EXIT_SIMULATION, EXIT_SOLVER, EXIT_ORACLE = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _read_truth(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: truth file must map load ids to phase labels")
    return {str(k): str(v).upper() for k, v in doc.items()}


def _topologies(args, feeder):
    """Change times and the feeder in force from each one onward."""
    times, nets = [], [feeder]
    for item in args.topology_change or []:
        when, sep, path = item.partition("=")
        if not sep:
            raise CliError(f"--topology-change expects TIME=FEEDER.json, got '{item}'")
        times.append((when, path))
    times.sort()
    nets += [load_feeder(p) for _, p in times]
    return [w for w, _ in times], (nets if len(nets) > 1 else None)


def _load_inputs(args):
    feeder = load_feeder(args.feeder)
    changes, topologies = _topologies(args, feeder)
    ms = read_measurements(args.measurements, feeder.base_voltage, feeder.base_power,
                           consumption_positive=args.consumption, topology_changes=changes)
    model = feeder
    if args.perturbation or args.missing_branch:
        model = perturb_model(feeder, args.perturbation, seed=args.seed,
                              missing_branches=tuple(args.missing_branch or ()))
    return feeder, model, topologies, ms


def dump_matrices(directory, arrays: dict, fmt: str = "bin") -> None:
    """Write matrices as little-endian float64 row-major ``.bin`` or as CSV.

    Binary dumps get a ``shapes.json`` index next to them.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shapes[name] = list(arr.shape)
        if fmt == "csv":
            np.savetxt(out / f"{name}.csv", np.atleast_2d(arr), delimiter=",", fmt="%.17g")
        else:
            (out / f"{name}.bin").write_bytes(arr.tobytes(order="C"))
    if fmt != "csv":
        (out / "shapes.json").write_text(json.dumps(shapes, indent=2))


def _sensitivity_arrays(red, rs):
    sens = sensitivities(remove_substation(build_A(assemble_admittance(red))))
    K, L, Kth, Lth = sens.node_ordered()
    first = rs if isinstance(rs, ReducedSensitivity) else rs[0]
    return {"K": K, "L": L, "Kth": Kth, "Lth": Lth, "K_hat": first.K_hat, "L_hat": first.L_hat}


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    feeder = load_feeder(args.feeder)
    truth = _read_truth(args.truth) if args.truth else None
    spec = SimulationSpec(mode=args.mode, T=args.samples, noise=args.noise,
                          noise_model=args.noise_model, quantize=args.quantize,
                          penetration=args.penetration, seed=args.seed, truth=truth,
                          profiles_csv=args.profiles)
    res = generate(spec, feeder)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_measurements(out / "measurements.csv", res.measurements,
                       feeder.base_voltage, feeder.base_power)
    (out / "truth.json").write_text(res.truth_json() + "\n")
    print(f"wrote {out / 'measurements.csv'} ({res.measurements.T} samples, "
          f"{len(res.measurements.load_ids)} meters) and {out / 'truth.json'}")
    return EXIT_OK


def cmd_identify(args) -> int:
    _, model, topologies, ms = _load_inputs(args)
    truth = _read_truth(args.truth) if args.truth else None
    red, ds, rs = prepare(model, ms, topologies=topologies)
    if args.dump_matrices:
        dump_matrices(args.dump_matrices, _sensitivity_arrays(red, rs), args.matrix_format)
    report = run_mmle(ds, rs, red.classes, red.load_ids, jobs=args.jobs, truth=truth,
                      diagnostics=args.diagnostics,
                      solver_options={"accelerated": args.accelerated})
    Path(args.out).write_text(report.to_json() + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
        rows = report["assignments"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"{args.report}: not an identification report ({exc})") from None
    truth = _read_truth(args.truth)
    x = PhaseAssignment.from_labels([r["phase"] for r in rows], [r["class"] for r in rows],
                                    [r["load"] for r in rows])
    acc = accuracy(x, truth)
    wrong = [lid for m, lid in enumerate(x.load_ids)
             if lid in truth and phase_index(x.classes[m], truth[lid]) != x.indices[m]]
    result = {"accuracy": acc, "n_loads": sum(lid in truth for lid in x.load_ids),
              "mismatches": wrong}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(f"accuracy={acc:.4f} mismatches={len(wrong)}" + (f" {wrong}" if wrong else ""))
    return EXIT_OK


def cmd_validate(args) -> int:
    feeder = load_feeder(args.feeder)
    sm = remove_substation(build_A(assemble_admittance(feeder)))
    N = feeder.n_nodes
    msg = (f"feeder ok: {N} nodes, {len(feeder.lines)} lines, {len(feeder.loads)} loads, "
           f"meshed={feeder.has_cycle()}, rank={sm.rank}/{6 * N}")
    if sm.rank < 6 * N:
        raise CliError(f"{msg}\n{sm.diagnostic}")
    if args.measurements:
        _, _, topologies, ms = _load_inputs(args)
        _, ds, _ = prepare(feeder, ms, topologies=topologies)
        msg += f"; measurements ok: {ms.T} samples, {ds.T} differenced, {len(ms.load_ids)} meters"
    print(msg)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    feeder = load_feeder(args.feeder)
    if len(feeder.loads) > args.max_loads:
        raise CliError(f"{len(feeder.loads)} loads exceed the enumeration limit {args.max_loads}")
    if args.measurements:
        ms = read_measurements(args.measurements, feeder.base_voltage, feeder.base_power,
                               consumption_positive=args.consumption)
    else:
        ms = generate(SimulationSpec(mode="linear", T=args.samples, seed=args.seed),
                      feeder).measurements
    red, ds, rs = prepare(feeder, ms)
    rs_solver = rs
    if args.corrupt:
        rng = np.random.default_rng(args.seed)

        def scramble(a):
            return a + args.corrupt * np.abs(a).max() * rng.standard_normal(a.shape)

        rs_solver = ReducedSensitivity(scramble(rs.K_hat), scramble(rs.L_hat))
    report = run_mmle(ds, rs_solver, red.classes, red.load_ids, jobs=args.jobs, diagnostics="none")
    got = report.assignment
    ok, best, best_val, got_val, note = exhaustive_search(ds, rs, got)
    if ok:
        print(f"oracle-check passed: sum_f={got_val:.6e} (global minimum {best_val:.6e}){note}")
        return EXIT_OK
    diff = {lid: {"identify": a, "oracle": b}
            for lid, a, b in zip(red.load_ids, got.labels(), best.labels()) if a != b}
    print(f"oracle-check FAILED: sum_f={got_val:.6e} vs global minimum {best_val:.6e}",
          file=sys.stderr)
    print(json.dumps(diff, indent=2), file=sys.stderr)
    return EXIT_ORACLE


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phaseid", description=(
        "Identify the phase connection of feeder loads from smart-meter voltage and power data."))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, measurements=True):
        sp.add_argument("--feeder", required=True, help="feeder JSON")
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED,
                        help=f"seed for every random draw (default {DEFAULT_SEED})")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker threads (default: logical cores)")
        if measurements:
            sp.add_argument("--consumption", action="store_true",
                            help="CSV power columns are consumption-positive (flip sign)")
            sp.add_argument("--topology-change", action="append", metavar="TIME=FEEDER.json",
                            help="feeder in force from TIME on (repeatable)")
            sp.add_argument("--perturbation", type=float, default=0.0,
                            help="three-sigma fraction of line admittance noise in the model")
            sp.add_argument("--missing-branch", action="append", metavar="BRANCH_ID",
                            help="service branch absent from the model (repeatable)")

    s = sub.add_parser("simulate", help="generate measurements and truth for a feeder")
    common(s, measurements=False)
    s.add_argument("--mode", choices=("linear", "nonlinear"), default="linear")
    s.add_argument("--noise", type=float, default=0.0, help="meter class, e.g. 0.001 for 0.1%%")
    s.add_argument("--noise-model", choices=("measurement", "increment"),
                   help="noise on levels or on sample-to-sample changes (default by mode)")
    s.add_argument("--quantize", action="store_true", help="round to meter resolution")
    s.add_argument("--penetration", type=float, default=1.0, help="fraction of metered loads")
    s.add_argument("--samples", type=int, default=2160, help="hourly samples (default 2160)")
    s.add_argument("--truth", help="JSON load id -> phase overriding the feeder's labels")
    s.add_argument("--profiles", help="consumption CSV time,load_id,p (kW)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify", help="estimate phase connections")
    common(s)
    s.add_argument("--measurements", required=True, help="measurement CSV")
    s.add_argument("--truth", help="truth JSON; adds accuracy to the report")
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--diagnostics", choices=("none", "summary", "full"), default="summary")
    s.add_argument("--accelerated", action="store_true", help="momentum variant of the QP solver")
    s.add_argument("--dump-matrices", metavar="DIR", help="write sensitivity matrices to DIR")
    s.add_argument("--matrix-format", choices=("bin", "csv"), default="bin")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("evaluate", help="score a report against truth")
    s.add_argument("--report", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", help="write the score as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("validate", help="check a feeder (and optionally measurements)")
    common(s)
    s.add_argument("--measurements", help="measurement CSV")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("oracle-check", help="compare identify with exhaustive search")
    common(s, measurements=False)
    s.add_argument("--measurements", help="measurement CSV (default: noiseless simulation)")
    s.add_argument("--consumption", action="store_true")
    s.add_argument("--samples", type=int, default=500)
    s.add_argument("--max-loads", type=int, default=7)
    s.add_argument("--corrupt", type=float, default=0.0,
                   help="scramble the solver's sensitivities by this relative amount (self-test)")
    s.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (SimulationError, ConvergenceError) as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (FeederError, MeasurementError, RankDeficientError, ValueError, KeyError,
            OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
