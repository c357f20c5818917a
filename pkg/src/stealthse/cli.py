"""Command-line entry point: ``stealthse {estimate,sweep,metrics,verify}``.

Measurement indices on the command line and in every output are 1-based.
Exit status: 0 success, 2 infeasible attack, 3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from .bdd import DEFAULT_TAU, analyze_residuals, residual_sensitivity
from .estimator import Diverged, EstimationError, EstimatorConfig, Mode, estimate
from .harness import (
    DEFAULT_NOISE_SCALE,
    AttackMode,
    ExperimentPlan,
    bdd_noise_variance,
    bias_schedule,
    report_to_text,
    run_metric_scan,
    run_sweep,
)
from .measurement import MeasurementFileError, eval_jacobian, load_measurements, simulate_measurements
from .netmodel import CaseError, load_case

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_IO = 3

_CONFIG_KEYS = {
    "max_iterations": int,
    "convergence_tol": float,
    "pseudo_weight": float,
    "mode": str,
}


class InputError(Exception):
    """Bad input file or argument; maps to exit status 3."""


def parse_config(text: str | None) -> dict:
    """``key=value`` pairs separated by commas, semicolons or whitespace."""
    out: dict = {}
    if not text:
        return out
    for tok in text.replace(",", " ").replace(";", " ").split():
        key, sep, val = tok.partition("=")
        if not sep or key not in _CONFIG_KEYS:
            raise InputError(f"bad config entry {tok!r}; known keys: {', '.join(_CONFIG_KEYS)}")
        try:
            out[key] = _CONFIG_KEYS[key](val)
        except ValueError:
            raise InputError(f"bad value for {key}: {val!r}") from None
    return out


def _estimator_config(args) -> EstimatorConfig:
    cfg = parse_config(getattr(args, "config", None))
    if getattr(args, "solver", None):
        cfg["mode"] = args.solver
    try:
        return EstimatorConfig(**cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _read_protected(path) -> frozenset[int]:
    if path is None:
        return frozenset()
    return atk.parse_protected(Path(path).read_text(encoding="utf-8"))


def _write(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    Path(out).write_text(text, encoding="utf-8")


def _num(v):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return None
    return float(f"{v:.10g}")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    network = load_case(args.case)
    mset = load_measurements(args.measurements, network)
    config = _estimator_config(args)
    z = simulate_measurements(network, mset, network.true_state(), noise_seed=args.seed, noise_scale=args.noise_scale)
    try:
        res = estimate(network, z, config)
        diverged = None
    except Diverged as exc:
        res, diverged = exc.result, str(exc)
    va = np.degrees(res.x_hat.angles(network))
    vm = res.x_hat.vm
    doc = {
        "converged": res.converged,
        "iterations": res.iterations,
        "objective": _num(res.objective),
        "diverged": diverged,
        "state": [
            {"bus": b.id, "vm": _num(vm[p]), "va_deg": _num(va[p])} for p, b in enumerate(network.buses)
        ],
    }
    if res.converged:
        H = eval_jacobian(network, z, res.x_hat).H
        var = bdd_noise_variance(mset, args.noise_scale, config.pseudo_weight)
        ra = analyze_residuals(H, res.residual, res.weights, tau=args.tau, pseudo=mset.pseudo, noise_variance=var)
        bdd = ra.to_dict()
        bdd["max_value"] = _num(bdd["max_value"])
        bdd["rN"] = [_num(v) for v in bdd["rN"]]
        doc["bdd"] = bdd
    if args.format == "json":
        _write(json.dumps(doc, indent=2) + "\n", args.out)
    else:
        _write(_csv(("bus", "vm", "va_deg"), [(s["bus"], s["vm"], s["va_deg"]) for s in doc["state"]]), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.target is None:
        raise InputError("--target is required")
    biases = bias_schedule(args.bias_start, args.bias_step, args.bias_end)
    network = load_case(args.case)
    if args.bias_unit == "mw":
        biases = tuple(b / network.base_mva for b in biases)
    plan = ExperimentPlan(
        case=args.case,
        measurements=args.measurements,
        target=args.target - 1,
        biases=biases,
        mode=AttackMode(args.mode),
        protected=args.protected,
        estimator=_estimator_config(args),
        tau=args.tau,
        seed=args.seed,
        noise_scale=args.noise_scale,
    )
    report = run_sweep(plan)
    _write(report_to_text(report, args.format), args.out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    network = load_case(args.case)
    mset = load_measurements(args.measurements, network)
    protected = _read_protected(args.protected)
    groups = None
    if args.rtus:
        groups = atk.parse_rtu_groups(Path(args.rtus).read_text(encoding="utf-8"))
    scan = run_metric_scan(
        network, mset, protected,
        method=args.method, with_bar=not args.no_bar, max_rows=args.max_rows, rtu_groups=groups,
    )
    entries = scan.report.to_json()
    if args.format == "json":
        text = json.dumps(entries, indent=2) + "\n"
    else:
        text = _csv(
            ("k", "alpha", "alpha_bar", "support", "rtus"),
            [
                (e["k"], e["alpha"], e["alpha_bar"], " ".join(map(str, e["support"])),
                 None if e["rtus"] is None else " ".join(e["rtus"]))
                for e in entries
            ],
        )
    _write(text, args.out)
    hist = " ".join(f"[{b}]={n}" for b, n in scan.histogram.items())
    print(f"alpha histogram: {hist}", file=sys.stderr)
    if scan.bar_histogram is not None:
        hist = " ".join(f"[{b}]={n}" for b, n in scan.bar_histogram.items())
        print(f"alpha_bar histogram: {hist}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    """Synthesise the target's witness and run the structural checks on it."""
    if args.target is None:
        raise InputError("--target is required")
    network = load_case(args.case)
    mset = load_measurements(args.measurements, network)
    model = atk.dc_model(network, mset, _read_protected(args.protected))
    k = args.target - 1
    witness = atk.synth_attack(atk.AttackSpec(model, k, 1.0))
    bias = args.bias / network.base_mva if args.bias_unit == "mw" else args.bias
    a = witness.scaled(bias)

    rows = list(model.rows)
    S = residual_sensitivity(model.H)
    stealth = float(np.max(np.abs(S @ witness.a[rows])))

    z = simulate_measurements(network, mset, network.true_state(), noise_seed=args.seed, noise_scale=args.noise_scale)
    za = atk.apply_attack(z, a)
    sat = atk.check_saturation(network, mset, za.values, a)

    invariance = []
    support = set(witness.support)
    for i, j in _measured_lines(model):
        flows = [r for r, ms in enumerate(model.measurements)
                 if ms.kind.is_flow and {ms.bus, ms.to_bus} == {i, j}]
        if any(model.rows[r] in support for r in flows):
            continue
        perturbed = atk.perturb_line(model, network, (i, j), args.factor)
        invariance.append({"line": [i, j], "invariant": atk.check_model_invariance(model, perturbed, witness)})

    doc = {
        "target": args.target,
        "alpha": witness.cardinality,
        "support": [i + 1 for i in witness.support],
        "a": {str(i + 1): _num(witness.a[i]) for i in witness.support},
        "rank_lemma": atk.verify_rank_lemma(model, witness),
        "dc_residual_change": _num(stealth),
        "saturation": [
            {"index": v.index + 1, "value": _num(v.value), "limit": _num(v.limit), "headroom": _num(v.headroom)}
            for v in sat
        ],
        "bias": _num(bias),
        "factor": args.factor,
        "invariance": invariance,
    }
    if args.format == "json":
        text = json.dumps(doc, indent=2) + "\n"
    else:
        text = _csv(("index", "a"), [(i + 1, _num(witness.a[i])) for i in witness.support])
    _write(text, args.out)
    return EXIT_OK


def _measured_lines(model: atk.DCModel) -> list[tuple[int, int]]:
    seen = []
    for ms in model.measurements:
        if ms.kind.is_flow:
            line = tuple(sorted((ms.bus, ms.to_bus)))
            if line not in seen:
                seen.append(line)
    return seen


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stealthse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, target=False):
        sp.add_argument("--case", default="case14", help="case file path or bundled case name")
        sp.add_argument("--measurements", default=None, help="measurement file (default: the case's bundled set)")
        sp.add_argument("--protected", default=None, help="file of protected measurement indices")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--noise-scale", type=float, default=DEFAULT_NOISE_SCALE)
        sp.add_argument("--tau", type=float, default=DEFAULT_TAU)
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        sp.add_argument("--out", default=None, help="output file (default: stdout)")
        if target:
            sp.add_argument("--target", type=int, default=None, help="1-based measurement index")

    sp = sub.add_parser("estimate", help="run the state estimator and bad-data detector on simulated telemetry")
    common(sp)
    sp.add_argument("--solver", choices=[m.value for m in Mode], default=None)
    sp.add_argument("--config", default=None, help="key=value estimator settings")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("sweep", help="bias sweep of a naive or stealthy attack")
    common(sp, target=True)
    sp.add_argument("--mode", choices=[m.value for m in AttackMode], default="stealthy")
    sp.add_argument("--bias-start", type=float, default=0.0)
    sp.add_argument("--bias-step", type=float, default=10.0)
    sp.add_argument("--bias-end", type=float, default=100.0)
    sp.add_argument("--bias-unit", choices=("mw", "pu"), default="mw")
    sp.add_argument("--solver", choices=[m.value for m in Mode], default=None)
    sp.add_argument("--config", default=None, help="key=value estimator settings")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("metrics", help="security metrics alpha_k and alpha_bar_k")
    common(sp)
    sp.add_argument("--method", choices=("exact", "relaxation"), default="exact")
    sp.add_argument("--no-bar", action="store_true", help="skip the all-possible-measurements variant")
    sp.add_argument("--max-rows", type=int, default=atk.MAX_EXACT_ROWS)
    sp.add_argument("--rtus", default=None, help="RTU grouping file 'rtu_id: k1,k2,...'")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("verify", help="structural checks on a target's minimal attack")
    common(sp, target=True)
    sp.add_argument("--bias", type=float, default=100.0, help="bias for the saturation check")
    sp.add_argument("--bias-unit", choices=("mw", "pu"), default="mw")
    sp.add_argument("--factor", type=float, default=1.5, help="susceptance scale factor for the invariance check")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.measurements is None:
        case = Path(args.case)
        args.measurements = str(case.with_suffix(".meas")) if case.exists() else args.case
    try:
        return args.func(args)
    except atk.AttackInfeasible as exc:
        print(f"stealthse: infeasible attack: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, CaseError, MeasurementFileError, InputError) as exc:
        print(f"stealthse: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EstimationError, atk.AttackError, ValueError) as exc:
        print(f"stealthse: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
