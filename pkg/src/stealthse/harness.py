"""Experiment runner: bias sweeps of naive and stealthy attacks, metric scans, reports.

A sweep simulates telemetry once from the case's own voltage solution,
adds a scaled attack for each bias, runs the nonlinear estimator and the
LNR detector, and records one row per bias. Biases are per-unit on the
case MVA base internally; reports carry both per-unit and MW.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as atk
from .bdd import DEFAULT_TAU, analyze_residuals
from .estimator import Diverged, EstimatorConfig, estimate
from .measurement import MeasurementSet, eval_jacobian, load_measurements, simulate_measurements
from .netmodel import Network, load_case

__all__ = [
    "AttackMode",
    "ExperimentPlan",
    "SweepRow",
    "SweepReport",
    "MetricScan",
    "HISTOGRAM_BUCKETS",
    "bias_schedule",
    "bdd_noise_variance",
    "run_sweep",
    "emit_report",
    "report_to_text",
    "read_report",
    "run_metric_scan",
    "histogram",
]

DEFAULT_NOISE_SCALE = 0.01


class AttackMode(str, enum.Enum):
    STEALTHY = "stealthy"
    NAIVE = "naive"


def bias_schedule(start: float, step: float, end: float) -> tuple[float, ...]:
    """start, start+step, ... up to and including end (tolerant to float drift)."""
    if step <= 0:
        raise ValueError("bias step must be positive")
    if end < start:
        raise ValueError("bias end must not be below bias start")
    count = int(math.floor((end - start) / step + 1e-9)) + 1
    return tuple(round(start + i * step, 12) for i in range(count))


@dataclass(frozen=True)
class ExperimentPlan:
    """One sweep. ``target`` is a 0-based measurement index; ``biases`` are per-unit."""

    case: str | Path
    measurements: str | Path
    target: int
    biases: tuple[float, ...]
    mode: AttackMode = AttackMode.STEALTHY
    protected: str | Path | None = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    tau: float = DEFAULT_TAU
    seed: int = 0
    noise_scale: float = DEFAULT_NOISE_SCALE

    def __post_init__(self):
        object.__setattr__(self, "mode", AttackMode(self.mode))
        object.__setattr__(self, "biases", tuple(float(b) for b in self.biases))
        if not self.biases:
            raise ValueError("bias schedule is empty")
        if any(b2 < b1 for b1, b2 in zip(self.biases, self.biases[1:])):
            raise ValueError("bias schedule must be sorted ascending")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive (the detector is calibrated to it)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def load(self) -> tuple[Network, MeasurementSet, frozenset[int]]:
        network = load_case(self.case)
        mset = load_measurements(self.measurements, network)
        protected = frozenset()
        if self.protected is not None:
            protected = atk.parse_protected(Path(self.protected).read_text(encoding="utf-8"))
        if not 0 <= self.target < mset.m:
            raise ValueError(f"target {self.target + 1} outside 1..{mset.m}")
        return network, mset, protected

    def describe(self) -> dict:
        return {
            "case": str(self.case),
            "measurements": str(self.measurements),
            "protected": None if self.protected is None else str(self.protected),
            "target": self.target + 1,
            "mode": self.mode.value,
            "tau": self.tau,
            "seed": self.seed,
            "noise_scale": self.noise_scale,
            "solver": self.estimator.mode.value,
        }


ROW_FIELDS = (
    "bias_pu", "bias_mw", "false_pu", "false_mw", "estimate_pu", "estimate_mw",
    "converged", "iterations", "alarm", "n_alarms", "max_rN", "max_index",
)


@dataclass(frozen=True)
class SweepRow:
    bias_pu: float
    bias_mw: float
    false_pu: float  # z^a_k
    false_mw: float
    estimate_pu: float | None  # zhat^a_k, None when the estimator diverged
    estimate_mw: float | None
    converged: bool
    iterations: int
    alarm: bool | None  # None for diverged rows
    n_alarms: int | None
    max_rN: float | None
    max_index: int | None  # 1-based

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in ROW_FIELDS}


@dataclass
class SweepReport:
    plan: dict
    rows: list[SweepRow]
    first_detected_bias: float | None = None  # per-unit
    first_divergence_bias: float | None = None
    slope: float | None = None
    base_mva: float = 100.0
    support: list[int] | None = None  # 1-based attacked measurements (stealthy)

    def __post_init__(self):
        self.summarize()

    def summarize(self) -> None:
        self.first_detected_bias = next((r.bias_pu for r in self.rows if r.alarm), None)
        self.first_divergence_bias = next((r.bias_pu for r in self.rows if not r.converged), None)
        ok = [r for r in self.rows if r.converged and not r.alarm]
        self.slope = None
        if len({r.false_pu for r in ok}) >= 2:
            x = np.array([r.false_pu for r in ok])
            y = np.array([r.estimate_pu for r in ok])
            self.slope = float(np.polyfit(x, y, 1)[0])

    def summary(self) -> dict:
        def mw(v):
            return None if v is None else v * self.base_mva

        return {
            "first_detected_bias_pu": self.first_detected_bias,
            "first_detected_bias_mw": mw(self.first_detected_bias),
            "first_divergence_bias_pu": self.first_divergence_bias,
            "first_divergence_bias_mw": mw(self.first_divergence_bias),
            "slope": self.slope,
        }


def bdd_noise_variance(mset: MeasurementSet, noise_scale: float, pseudo_weight: float) -> np.ndarray:
    """Variance of the simulated noise; pseudo rows get the variance implied by their weight."""
    var = noise_scale**2 * mset.variance
    var[mset.pseudo] = mset.variance[mset.pseudo] / pseudo_weight
    return var


def run_sweep(plan: ExperimentPlan) -> SweepReport:
    """Run the plan's bias schedule; divergence is recorded per row, never fatal.

    Raises :class:`stealthse.attack.AttackInfeasible` in stealthy mode when
    the target cannot be attacked without touching a protected measurement.
    """
    network, mset, protected = plan.load()
    k = plan.target
    support = None
    if plan.mode is AttackMode.STEALTHY:
        model = atk.dc_model(network, mset, protected)
        unit = atk.synth_attack(atk.AttackSpec(model, k, 1.0))
        support = [i + 1 for i in unit.support]
    elif mset.pseudo[k] or k in protected:
        raise atk.AttackError(f"target {k + 1} is protected")

    clean = simulate_measurements(network, mset, network.true_state(), noise_seed=plan.seed, noise_scale=plan.noise_scale)
    variance = bdd_noise_variance(mset, plan.noise_scale, plan.estimator.pseudo_weight)
    base = network.base_mva
    rows = []
    for b in plan.biases:
        a = unit.scaled(b) if plan.mode is AttackMode.STEALTHY else atk.naive_attack(mset, k, b)
        attacked = atk.apply_attack(clean, a)
        z_false = float(attacked.values[k])
        try:
            res = estimate(network, attacked, plan.estimator)
        except Diverged as exc:
            rows.append(SweepRow(b, b * base, z_false, z_false * base, None, None, False,
                                 exc.result.iterations, None, None, None, None))
            continue
        H = eval_jacobian(network, attacked, res.x_hat).H
        ra = analyze_residuals(H, res.residual, res.weights, tau=plan.tau, pseudo=mset.pseudo, noise_variance=variance)
        est = float(res.estimated[k])
        rows.append(SweepRow(
            b, b * base, z_false, z_false * base, est, est * base, True, res.iterations,
            ra.alarm, ra.n_alarms, ra.max_value, None if ra.max_index is None else ra.max_index + 1,
        ))
    return SweepReport(plan.describe(), rows, base_mva=base, support=support)


# ---------------------------------------------------------------------------
# report files


def _round(v):
    if isinstance(v, float):
        if not math.isfinite(v):
            return None
        return float(f"{v:.6g}")
    return v


def _report_dict(report: SweepReport) -> dict:
    return {
        "plan": report.plan,
        "base_mva": report.base_mva,
        "support": report.support,
        "summary": {k: _round(v) for k, v in report.summary().items()},
        "rows": [{k: _round(v) for k, v in r.as_dict().items()} for r in report.rows],
    }


def report_to_text(report: SweepReport, fmt: str = "json") -> str:
    """Serialise with a stable field order and floats rounded to 6 significant digits."""
    if not report.rows:
        raise ValueError("empty sweep: nothing to report")
    d = _report_dict(report)
    if fmt == "json":
        return json.dumps(d, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    for key in ("plan", "summary"):
        buf.write(f"# {key}: {json.dumps(d[key])}\n")
    buf.write(f"# base_mva: {json.dumps(d['base_mva'])}\n")
    buf.write(f"# support: {json.dumps(d['support'])}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for row in d["rows"]:
        w.writerow(["" if row[f] is None else _csv_cell(row[f]) for f in ROW_FIELDS])
    return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def emit_report(report: SweepReport, path: str | Path, fmt: str = "json") -> Path:
    """Write the report atomically; an empty sweep raises and leaves no file."""
    text = report_to_text(report, fmt)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


_INT_FIELDS = {"iterations", "n_alarms", "max_index"}
_BOOL_FIELDS = {"converged", "alarm"}


def _parse_cell(name: str, s: str):
    if s == "":
        return None
    if name in _BOOL_FIELDS:
        return s == "true"
    if name in _INT_FIELDS:
        return int(s)
    return float(s)


def read_report(path: str | Path, fmt: str | None = None) -> SweepReport:
    """Inverse of :func:`emit_report`; the summary is taken from the file, not recomputed."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    text = path.read_text(encoding="utf-8")
    if fmt == "json":
        d = json.loads(text)
    else:
        d = {}
        lines = text.splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, val = line[2:].partition(": ")
                d[key] = json.loads(val)
            else:
                body.append(line)
        reader = csv.DictReader(body)
        d["rows"] = [{f: _parse_cell(f, r[f]) for f in ROW_FIELDS} for r in reader]
    report = SweepReport(d["plan"], [SweepRow(**r) for r in d["rows"]], base_mva=d["base_mva"], support=d["support"])
    s = d["summary"]
    report.first_detected_bias = s["first_detected_bias_pu"]
    report.first_divergence_bias = s["first_divergence_bias_pu"]
    report.slope = s["slope"]
    return report


# ---------------------------------------------------------------------------
# metric scan

HISTOGRAM_BUCKETS = ("1-2", "3-4", "5-10", "11-20", ">20", "inf")


def histogram(values) -> dict[str, int]:
    counts = dict.fromkeys(HISTOGRAM_BUCKETS, 0)
    for v in values:
        if math.isinf(v):
            counts["inf"] += 1
        elif v <= 2:
            counts["1-2"] += 1
        elif v <= 4:
            counts["3-4"] += 1
        elif v <= 10:
            counts["5-10"] += 1
        elif v <= 20:
            counts["11-20"] += 1
        else:
            counts[">20"] += 1
    return counts


@dataclass
class MetricScan:
    report: atk.SecurityMetricReport
    histogram: dict[str, int]
    bar_histogram: dict[str, int] | None


def run_metric_scan(
    network: Network,
    mset: MeasurementSet,
    protected=(),
    *,
    method: str = "exact",
    with_bar: bool = True,
    max_rows: int | None = atk.MAX_EXACT_ROWS,
    rtu_groups=None,
) -> MetricScan:
    """alpha_k (and alpha_bar_k) for every unprotected active measurement, bucketed."""
    if method not in ("exact", "relaxation"):
        raise ValueError(f"unknown method {method!r}")
    report = atk.security_metrics(
        network, mset, protected, method=method, with_bar=with_bar, max_rows=max_rows, rtu_groups=rtu_groups
    )
    bar = histogram(e.alpha_bar for e in report.entries) if with_bar else None
    return MetricScan(report, histogram(e.alpha for e in report.entries), bar)
