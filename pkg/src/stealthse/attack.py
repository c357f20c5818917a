"""Stealthy deception attacks synthesised from the DC measurement model.

An attack ``a`` is stealthy for the linear model when ``a = H_DC c`` for
some angle perturbation ``c``. The security metric alpha_k is the fewest
measurements an attacker must corrupt to move measurement k by one unit
without touching protected rows (pseudo-measurements and secured meters).

Indices are 0-based measurement positions throughout this module; files and
reports use 1-based indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .measurement import Kind, Measurement, MeasurementSet, build_dc_jacobian, full_measurement_set
from .netmodel import Network

__all__ = [
    "ZERO_TOL",
    "AttackError",
    "AttackInfeasible",
    "SizeGuardExceeded",
    "PreconditionViolation",
    "DCModel",
    "AttackSpec",
    "AttackVector",
    "MetricEntry",
    "SecurityMetricReport",
    "SaturationViolation",
    "dc_model",
    "minimum_support",
    "synth_attack",
    "attack_from_support",
    "security_metric_exact",
    "security_metric_relaxation",
    "security_metrics",
    "all_possible_measurements",
    "verify_rank_lemma",
    "perturb_line",
    "check_model_invariance",
    "projection_residual",
    "check_saturation",
    "apply_attack",
    "naive_attack",
    "parse_protected",
    "parse_rtu_groups",
]

ZERO_TOL = 1e-9  # |a_i| below this counts as zero
_RANK_TOL = 1e-9  # on unit-normalised rows
MAX_EXACT_ROWS = 60


class AttackError(ValueError):
    pass


class AttackInfeasible(AttackError):
    """The target cannot be biased without touching a protected measurement."""


class SizeGuardExceeded(AttackError):
    pass


class PreconditionViolation(AttackError):
    pass


@dataclass(frozen=True)
class DCModel:
    """H_DC with the bookkeeping that maps its rows back to measurement indices."""

    H: np.ndarray  # (m_P, N-1)
    rows: tuple[int, ...]  # measurement index of each row
    measurements: tuple[Measurement, ...]  # the active measurements, row order
    m: int  # size of the full measurement set
    protected: frozenset[int]  # measurement indices that must stay zero

    @property
    def n(self) -> int:
        return self.H.shape[1]

    def row_of(self, k: int) -> int:
        try:
            return self.rows.index(k)
        except ValueError:
            raise AttackError(f"measurement {k + 1} is not an active-power measurement of the DC model") from None

    @property
    def protected_rows(self) -> list[int]:
        return [r for r, k in enumerate(self.rows) if k in self.protected]

    @property
    def targets(self) -> list[int]:
        """Unprotected active measurements, the ones alpha_k is defined for."""
        return [k for k in self.rows if k not in self.protected]

    def with_protected(self, extra) -> "DCModel":
        return DCModel(self.H, self.rows, self.measurements, self.m, self.protected | frozenset(extra))


def dc_model(network: Network, mset: MeasurementSet, protected=()) -> DCModel:
    """DC model of ``mset``; pseudo-measurements are always protected."""
    H = build_dc_jacobian(network, mset)
    rows = tuple(int(k) for k in np.flatnonzero(mset.active))
    prot = frozenset(int(k) for k in np.flatnonzero(mset.pseudo)) | frozenset(int(k) for k in protected)
    bad = [k for k in prot if not 0 <= k < mset.m]
    if bad:
        raise AttackError(f"protected indices out of range: {[k + 1 for k in bad]}")
    return DCModel(H, rows, tuple(mset[k] for k in rows), mset.m, prot)


@dataclass(frozen=True)
class AttackSpec:
    model: DCModel
    target: int
    magnitude: float = 1.0

    def __post_init__(self):
        if self.target in self.model.protected:
            raise AttackError(f"target {self.target + 1} is protected")
        self.model.row_of(self.target)


@dataclass(frozen=True)
class AttackVector:
    a: np.ndarray  # length m, zero on reactive rows
    c: np.ndarray  # angle perturbation certificate, a = H_DC c on active rows
    target: int
    support: tuple[int, ...]

    @property
    def magnitude(self) -> float:
        return float(self.a[self.target])

    @property
    def complement(self) -> tuple[int, ...]:
        s = set(self.support)
        return tuple(k for k in range(self.a.size) if k not in s)

    @property
    def cardinality(self) -> int:
        return len(self.support)

    def scaled(self, factor: float) -> "AttackVector":
        if factor == 0:
            return AttackVector(np.zeros_like(self.a), np.zeros_like(self.c), self.target, ())
        return AttackVector(self.a * factor, self.c * factor, self.target, self.support)

    def normalized(self) -> "AttackVector":
        return self.scaled(1.0 / self.magnitude)


@dataclass
class MetricEntry:
    k: int
    alpha: float  # math.inf when fully protected
    witness: AttackVector | None
    alpha_bar: float | None = None
    rtus: list[str] | None = None

    def to_dict(self) -> dict:
        return {
            "k": self.k + 1,
            "alpha": _jsonable_count(self.alpha),
            "alpha_bar": None if self.alpha_bar is None else _jsonable_count(self.alpha_bar),
            "support": [] if self.witness is None else [i + 1 for i in self.witness.support],
            "rtus": self.rtus,
        }


@dataclass
class SecurityMetricReport:
    entries: list[MetricEntry]
    method: str  # "exact" or "relaxation"
    bar_method: str | None = None

    def alpha(self, k: int) -> float:
        return self.entry(k).alpha

    def entry(self, k: int) -> MetricEntry:
        for e in self.entries:
            if e.k == k:
                return e
        raise KeyError(f"no metric for measurement {k + 1}")

    def as_dict(self) -> dict[int, float]:
        return {e.k: e.alpha for e in self.entries}

    def to_json(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]


def _jsonable_count(v: float):
    return "inf" if math.isinf(v) else int(v)


# ---------------------------------------------------------------------------
# exact minimum-cardinality search


def _unit_rows(H: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(H, axis=1)
    return np.divide(H, norms[:, None], out=np.zeros_like(H), where=norms[:, None] > 0)


def _project_out(R: np.ndarray, v: np.ndarray) -> np.ndarray:
    q = v / np.linalg.norm(v)
    R = R - np.outer(R @ q, q)
    return R - np.outer(R @ q, q)  # second pass for orthogonality


def minimum_support(
    H: np.ndarray,
    target: int,
    protected=(),
    incumbent: tuple[int, ...] | None = None,
) -> tuple[int, ...] | None:
    """Lexicographically smallest minimum-cardinality support of a = H c with a_target != 0.

    Works on row positions of ``H``. Rows are decided one at a time: either
    they join the zero set U (its span, and every row that falls into it,
    must keep ``target`` out) or they are committed to the support. The
    optimum is always a zero set of rank n-1, so only those leaves are
    scored. ``incumbent`` is a known feasible support used for pruning.
    Returns None when every feasible ``c`` forces the target to zero.
    """
    Hn = _unit_rows(np.asarray(H, dtype=float))
    m, n = Hn.shape
    if np.linalg.norm(Hn[target]) == 0:
        return None
    R = Hn.copy()
    rank = 0
    for p in protected:
        if np.linalg.norm(R[p]) > _RANK_TOL:
            R = _project_out(R, R[p])
            rank += 1
    norms = np.linalg.norm(R, axis=1)
    if norms[target] <= _RANK_TOL:
        return None
    protected = set(protected)
    order = [i for i in range(m) if i != target and i not in protected and norms[i] > _RANK_TOL]

    best: list = [m + 1, None]
    if incumbent is not None:
        best[:] = [len(incumbent), tuple(sorted(incumbent))]

    def better(sup: tuple[int, ...]) -> bool:
        return best[1] is None or (len(sup), sup) < (best[0], best[1])

    def dfs(pos: int, R: np.ndarray, norms: np.ndarray, rank: int, excl: list[int]) -> None:
        cost = len(excl) + 1
        if cost > best[0]:
            return
        if cost == best[0] and best[1] is not None and tuple(sorted(excl + [target])) >= best[1]:
            return
        while pos < len(order) and norms[order[pos]] <= _RANK_TOL:
            pos += 1
        if rank == n - 1:
            sup = tuple(sorted(i for i in range(m) if norms[i] > _RANK_TOL))
            if better(sup):
                best[:] = [len(sup), sup]
            return
        if pos == len(order):
            return
        e = order[pos]
        R2 = _project_out(R, R[e])
        n2 = np.linalg.norm(R2, axis=1)
        if n2[target] > _RANK_TOL and all(n2[i] > _RANK_TOL for i in excl):
            dfs(pos + 1, R2, n2, rank + 1, excl)
        if cost + 1 <= best[0]:
            dfs(pos + 1, R, norms, rank, excl + [e])

    dfs(0, R, norms, rank, [])
    return best[1]


def attack_from_support(model: DCModel, target: int, support, magnitude: float = 1.0) -> AttackVector:
    """Build a = H_DC c vanishing outside ``support`` with a_target = magnitude."""
    t = model.row_of(target)
    sup_rows = {model.row_of(k) for k in support}
    zero_rows = [r for r in range(len(model.rows)) if r not in sup_rows]
    A = np.vstack([model.H[zero_rows], model.H[t]])
    rhs = np.zeros(len(zero_rows) + 1)
    rhs[-1] = magnitude
    c, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    a_rows = model.H @ c
    scale = max(abs(magnitude), 1.0)
    if np.max(np.abs(a_rows[zero_rows]), initial=0.0) > 1e-7 * scale or abs(a_rows[t] - magnitude) > 1e-7 * scale:
        raise AttackError("support does not admit an attack on the target")
    a_rows[np.abs(a_rows) < ZERO_TOL * scale] = 0.0
    a_rows[zero_rows] = 0.0
    a = np.zeros(model.m)
    a[list(model.rows)] = a_rows
    sup = tuple(int(k) for k in np.flatnonzero(a))
    return AttackVector(a, c, target, sup)


def _exact_witness(model: DCModel, k: int, incumbent=None) -> AttackVector | None:
    t = model.row_of(k)
    inc_rows = None
    if incumbent is not None:
        inc_rows = tuple(model.row_of(i) for i in incumbent.support)
    sup = minimum_support(model.H, t, model.protected_rows, inc_rows)
    if sup is None:
        return None
    return attack_from_support(model, k, [model.rows[r] for r in sup])


def synth_attack(spec: AttackSpec) -> AttackVector:
    """Minimum-cardinality stealthy attack with a_target = magnitude.

    Raises :class:`AttackInfeasible` when alpha_target is infinite.
    """
    model, k = spec.model, spec.target
    witness = _exact_witness(model, k, _relaxed_witness(model, k))
    if witness is None:
        raise AttackInfeasible(f"measurement {k + 1} is fully protected (alpha = inf)")
    if spec.magnitude == 0:
        return witness.scaled(0.0)
    return witness.scaled(spec.magnitude)


def _check_size(model: DCModel, max_rows: int | None) -> None:
    limit = MAX_EXACT_ROWS if max_rows is None else max_rows
    if len(model.rows) > limit:
        raise SizeGuardExceeded(
            f"exact search over {len(model.rows)} active rows exceeds the guard of {limit}; "
            "raise max_rows or use the relaxation"
        )


def security_metric_exact(
    model: DCModel, targets=None, *, max_rows: int | None = MAX_EXACT_ROWS, rtu_groups=None
) -> SecurityMetricReport:
    """alpha_k for each unprotected active measurement, with minimal witnesses."""
    _check_size(model, max_rows)
    entries = []
    for k in model.targets if targets is None else targets:
        w = _exact_witness(model, k, _relaxed_witness(model, k))
        entries.append(MetricEntry(k, math.inf if w is None else float(w.cardinality), w, rtus=_rtus(w, rtu_groups)))
    return SecurityMetricReport(entries, "exact")


# ---------------------------------------------------------------------------
# l1 relaxation


def _relaxed_witness(model: DCModel, k: int) -> AttackVector | None:
    """min sum|a_i| s.t. a = H c, a_k = 1, protected rows zero; sparsified."""
    H = model.H
    mp, n = H.shape
    t = model.row_of(k)
    prot = set(model.protected_rows)
    free = [r for r in range(mp) if r != t and r not in prot]
    nf = len(free)
    # variables [c (n, free), s (nf, >= 0)]; minimise sum s with |H_free c| <= s
    cost = np.concatenate([np.zeros(n), np.ones(nf)])
    Hf = H[free]
    A_ub = np.block([[Hf, -np.eye(nf)], [-Hf, -np.eye(nf)]]) if nf else None
    b_ub = np.zeros(2 * nf) if nf else None
    eq_rows = [t] + sorted(prot)
    A_eq = np.hstack([H[eq_rows], np.zeros((len(eq_rows), nf))])
    b_eq = np.zeros(len(eq_rows))
    b_eq[0] = 1.0
    bounds = [(None, None)] * n + [(0, None)] * nf
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status == 2:
        return None
    if res.status != 0:
        raise AttackError(f"relaxation solve failed: {res.message}")
    a_rows = H @ res.x[:n]
    sup = [model.rows[r] for r in np.flatnonzero(np.abs(a_rows) > ZERO_TOL)]
    try:
        return attack_from_support(model, k, sup)
    except AttackError:
        # sparsification lost feasibility; keep the raw LP point
        a_rows[np.abs(a_rows) <= ZERO_TOL] = 0.0
        a = np.zeros(model.m)
        a[list(model.rows)] = a_rows
        return AttackVector(a, res.x[:n], k, tuple(int(i) for i in np.flatnonzero(a)))


def security_metric_relaxation(model: DCModel, targets=None, *, rtu_groups=None) -> SecurityMetricReport:
    """Upper bounds on alpha_k from the l1 relaxation (support of the LP optimum)."""
    entries = []
    for k in model.targets if targets is None else targets:
        w = _relaxed_witness(model, k)
        entries.append(MetricEntry(k, math.inf if w is None else float(w.cardinality), w, rtus=_rtus(w, rtu_groups)))
    return SecurityMetricReport(entries, "relaxation")


def _rtus(witness: AttackVector | None, groups) -> list[str] | None:
    if groups is None or witness is None:
        return None
    return sorted({groups[k] for k in witness.support if k in groups})


# ---------------------------------------------------------------------------
# alpha_bar: every flow (both ends) and every injection metered


def all_possible_measurements(
    network: Network, mset: MeasurementSet, protected=()
) -> tuple[MeasurementSet, frozenset[int], dict[int, int]]:
    """Active set with both-end flows on every branch and injections at every bus.

    Returns the set, its protected indices (pseudo injections carried over
    from ``mset`` plus protected measurements that exist in both sets), and
    a map from active indices of ``mset`` to indices of the new set.
    """
    pseudo_buses = {ms.bus for ms in mset.measurements if ms.pseudo and ms.kind == Kind.PINJ}
    full = full_measurement_set(network, reactive=False, voltages=False, pseudo_buses=pseudo_buses)
    key = {(ms.kind, ms.bus, ms.to_bus): i for i, ms in enumerate(full.measurements)}
    mapping = {}
    for k, ms in enumerate(mset.measurements):
        if ms.kind.active:
            mapping[k] = key[(ms.kind, ms.bus, ms.to_bus)]
    prot = frozenset(mapping[k] for k in protected if k in mapping)
    return full, prot, mapping


def security_metrics(
    network: Network,
    mset: MeasurementSet,
    protected=(),
    *,
    method: str = "exact",
    with_bar: bool = True,
    max_rows: int | None = MAX_EXACT_ROWS,
    rtu_groups=None,
) -> SecurityMetricReport:
    """alpha_k for ``mset`` and alpha_bar_k for the all-possible-measurements set."""
    model = dc_model(network, mset, protected)
    run = security_metric_exact if method == "exact" else security_metric_relaxation
    kwargs = {"max_rows": max_rows} if method == "exact" else {}
    report = run(model, rtu_groups=rtu_groups, **kwargs)
    if with_bar:
        full, prot_full, mapping = all_possible_measurements(network, mset, protected)
        full_model = dc_model(network, full, prot_full)
        targets = [mapping[e.k] for e in report.entries if mapping[e.k] not in full_model.protected]
        bar = run(full_model, targets, **kwargs).as_dict()
        for e in report.entries:
            e.alpha_bar = bar.get(mapping[e.k], math.inf)
        report.bar_method = method
    return report


# ---------------------------------------------------------------------------
# structural checks


def verify_rank_lemma(model: DCModel, attack: AttackVector) -> bool:
    """rank(H_U) = n-1 and rank(H_{U+i}) = n for each attacked row i."""
    if not attack.support:
        raise AttackError("empty attack: the rank certificate needs a nonzero attack")
    Hn = _unit_rows(model.H)
    sup = {model.row_of(k) for k in attack.support}
    U = [r for r in range(len(model.rows)) if r not in sup]
    n = model.n

    def rank(rows):
        return int(np.linalg.matrix_rank(Hn[rows], tol=1e-8)) if rows else 0

    if rank(U) != n - 1:
        return False
    return all(rank(U + [i]) == n for i in sorted(sup))


def perturb_line(model: DCModel, network: Network, line: tuple[int, int], factor: float) -> DCModel:
    """Scale the susceptance of ``line`` by ``factor`` via row operations on H_DC.

    Flow rows of the line are multiplied by ``factor``; the injection rows at
    its end buses absorb (factor - 1) times the line's flow row.
    """
    if factor == 0:
        raise ValueError("factor must be nonzero")
    i, j = line
    pi, pj = network.index[i], network.index[j]
    bsum = sum(1.0 / br.x for br in network.branches
               if br.in_service and {br.from_bus, br.to_bus} == {i, j})
    if bsum == 0:
        raise AttackError(f"no in-service line between buses {i} and {j}")
    full = np.zeros(network.n_bus)
    full[pi], full[pj] = bsum, -bsum
    flow_ij = full[network.non_ref]
    Ht = model.H.copy()
    for r, ms in enumerate(model.measurements):
        if ms.kind == Kind.PFLOW and {ms.bus, ms.to_bus} == {i, j}:
            Ht[r] = factor * model.H[r]
        elif ms.kind == Kind.PINJ and ms.bus == i:
            Ht[r] = model.H[r] + (factor - 1) * flow_ij
        elif ms.kind == Kind.PINJ and ms.bus == j:
            Ht[r] = model.H[r] - (factor - 1) * flow_ij
    return DCModel(Ht, model.rows, model.measurements, model.m, model.protected)


def check_model_invariance(model: DCModel, perturbed: DCModel, attack: AttackVector, tol: float = 1e-8) -> bool:
    """True iff ``attack`` is still stealthy for the perturbed model.

    Raises :class:`PreconditionViolation` if the perturbation touches a flow
    row inside the attack support, or changes injections without touching
    any measured flow (outside the invariance result's hypothesis).
    """
    if perturbed.rows != model.rows:
        raise ValueError("models describe different measurement sets")
    changed = [r for r in range(len(model.rows)) if not np.allclose(model.H[r], perturbed.H[r], rtol=0, atol=1e-12)]
    flows = [r for r in changed if model.measurements[r].kind == Kind.PFLOW]
    if changed and not flows:
        raise PreconditionViolation("perturbation changes injections but no measured flow of the line")
    hit = [model.rows[r] + 1 for r in flows if model.rows[r] in attack.support]
    if hit:
        raise PreconditionViolation(f"perturbed flow measurement(s) {hit} are in the attack support")
    if any(abs(attack.a[k]) > ZERO_TOL for k in perturbed.protected):
        return False
    a = attack.a[list(model.rows)]
    return bool(projection_residual(perturbed, attack) <= tol * max(1.0, np.max(np.abs(a))))


def projection_residual(model: DCModel, attack: AttackVector) -> float:
    """max |H c - a| over active rows for the least-squares c; zero iff a is in Im(H)."""
    a = attack.a[list(model.rows)]
    c, *_ = np.linalg.lstsq(model.H, a, rcond=None)
    return float(np.max(np.abs(model.H @ c - a)))


@dataclass(frozen=True)
class SaturationViolation:
    index: int
    value: float
    limit: float
    headroom: float  # limit - |value|, negative when violated


def check_saturation(
    network: Network, mset: MeasurementSet, z_a, attack: AttackVector | None = None
) -> list[SaturationViolation]:
    """Attacked active flows beyond |V_i V_j b_ij| at nominal voltage."""
    z_a = np.asarray(z_a, dtype=float)
    rows = range(mset.m) if attack is None else attack.support
    out = []
    for k in rows:
        ms = mset[k]
        if ms.kind != Kind.PFLOW:
            continue
        y, _ = network.pairs[(network.index[ms.bus], network.index[ms.to_bus])]
        limit = abs(y.imag)
        headroom = limit - abs(z_a[k])
        if headroom < 0:
            out.append(SaturationViolation(k, float(z_a[k]), limit, headroom))
    return out


def apply_attack(mset: MeasurementSet, attack: AttackVector) -> MeasurementSet:
    """z^a = z + a."""
    z = mset.require_values()
    if attack.a.shape != z.shape:
        raise ValueError(f"attack has length {attack.a.size}, measurement set has {z.size}")
    touched = np.flatnonzero(mset.pseudo & (attack.a != 0))
    if touched.size:
        raise AttackError(f"attack modifies pseudo-measurement(s) {[int(k) + 1 for k in touched]}")
    return mset.with_values(z + attack.a)


def naive_attack(mset: MeasurementSet, target: int, magnitude: float) -> AttackVector:
    """Bias only the target measurement."""
    a = np.zeros(mset.m)
    a[target] = magnitude
    return AttackVector(a, np.zeros(0), target, (target,) if magnitude else ())


# ---------------------------------------------------------------------------
# side files


def parse_protected(text: str) -> frozenset[int]:
    """One 1-based measurement index per line; returns 0-based indices."""
    out = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        try:
            k = int(s)
        except ValueError:
            raise ValueError(f"line {lineno}: expected a measurement index, got {s!r}") from None
        if k < 1:
            raise ValueError(f"line {lineno}: indices are 1-based")
        out.add(k - 1)
    return frozenset(out)


def parse_rtu_groups(text: str) -> dict[int, str]:
    """``rtu_id: k1,k2,...`` lines -> {0-based measurement index: rtu_id}."""
    groups: dict[int, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, rest = line.partition(":")
        if not sep or not name.strip():
            raise ValueError(f"line {lineno}: expected 'rtu_id: k1,k2,...'")
        for tok in rest.split(","):
            tok = tok.strip()
            if not tok:
                continue
            k = int(tok) - 1
            if k in groups:
                raise ValueError(f"line {lineno}: measurement {k + 1} already assigned to RTU {groups[k]}")
            groups[k] = name.strip()
    return groups
