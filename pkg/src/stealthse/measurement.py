"""Measurement sets, the AC measurement function h(x) and its Jacobians.

State ordering is ``[theta (non-reference buses, bus order), V (all buses)]``.
The reference-bus angle is fixed at zero and never appears as a column.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .netmodel import Network

__all__ = [
    "Kind",
    "Measurement",
    "MeasurementSet",
    "MeasurementFileError",
    "StateVector",
    "JacobianBlocks",
    "eval_h",
    "eval_jacobian",
    "build_dc_jacobian",
    "simulate_measurements",
    "parse_measurements",
    "serialize_measurements",
    "load_measurements",
    "full_measurement_set",
]


class Kind(str, enum.Enum):
    PFLOW = "PFLOW"
    QFLOW = "QFLOW"
    PINJ = "PINJ"
    QINJ = "QINJ"
    VMAG = "VMAG"

    @property
    def active(self) -> bool:
        return self in (Kind.PFLOW, Kind.PINJ)

    @property
    def is_flow(self) -> bool:
        return self in (Kind.PFLOW, Kind.QFLOW)


class MeasurementFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Measurement:
    kind: Kind
    bus: int
    to_bus: int | None = None
    sigma: float = 1.0
    pseudo: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.is_flow and self.to_bus is None:
            raise ValueError(f"{self.kind.value} needs two bus ids")
        if not self.kind.is_flow and self.to_bus is not None:
            raise ValueError(f"{self.kind.value} takes a single bus id")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def variance(self) -> float:
        return self.sigma**2

    def label(self) -> str:
        if self.kind.is_flow:
            return f"{self.kind.value} {self.bus}-{self.to_bus}"
        return f"{self.kind.value} {self.bus}"


@dataclass(frozen=True)
class MeasurementSet:
    """Ordered measurements; position k is the measurement index everywhere.

    ``values`` is None for a bare definition (as read from a file) and a
    length-m array once telemetered or simulated data is attached.
    """

    measurements: tuple[Measurement, ...]
    values: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))
        if self.values is not None:
            vals = np.array(self.values, dtype=float)
            if vals.shape != (len(self.measurements),):
                raise ValueError(f"values has shape {vals.shape}, expected ({len(self.measurements)},)")
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.measurements)

    def __getitem__(self, k: int) -> Measurement:
        return self.measurements[k]

    @property
    def m(self) -> int:
        return len(self.measurements)

    @property
    def sigma(self) -> np.ndarray:
        return np.array([ms.sigma for ms in self.measurements])

    @property
    def variance(self) -> np.ndarray:
        return self.sigma**2

    @property
    def pseudo(self) -> np.ndarray:
        return np.array([ms.pseudo for ms in self.measurements], dtype=bool)

    @property
    def active(self) -> np.ndarray:
        return np.array([ms.kind.active for ms in self.measurements], dtype=bool)

    def weights(self, pseudo_weight: float = 1.0) -> np.ndarray:
        """Diagonal of W = R^-1, pseudo rows multiplied by ``pseudo_weight``."""
        w = 1.0 / self.variance
        return np.where(self.pseudo, w * pseudo_weight, w)

    def with_values(self, values) -> "MeasurementSet":
        return replace(self, values=np.asarray(values, dtype=float))

    def require_values(self) -> np.ndarray:
        if self.values is None:
            raise ValueError("measurement set has no values attached")
        return self.values

    def find(self, kind: Kind | str, bus: int, to_bus: int | None = None) -> int:
        kind = Kind(kind)
        for k, ms in enumerate(self.measurements):
            if ms.kind == kind and ms.bus == bus and ms.to_bus == to_bus:
                return k
        raise KeyError(f"no {kind.value} measurement at {bus}" + (f"-{to_bus}" if to_bus else ""))

    def validate(self, network: Network) -> None:
        for k, ms in enumerate(self.measurements, start=1):
            for bus in (ms.bus, ms.to_bus):
                if bus is not None and bus not in network.index:
                    raise MeasurementFileError(f"{ms.label()} references unknown bus {bus}", k)
            if ms.kind.is_flow:
                key = (network.index[ms.bus], network.index[ms.to_bus])
                if key not in network.pairs:
                    raise MeasurementFileError(f"{ms.label()}: no in-service branch between the buses", k)


@dataclass(frozen=True)
class StateVector:
    """Bus voltage angles (non-reference buses, radians) and magnitudes (pu)."""

    theta: np.ndarray
    vm: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        vm = np.array(self.vm, dtype=float)
        if theta.shape != (vm.size - 1,):
            raise ValueError(f"need N-1 angles for N magnitudes, got {theta.size} and {vm.size}")
        if np.any(vm <= 0):
            raise ValueError("voltage magnitudes must be positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "vm", vm)

    @classmethod
    def flat(cls, network: Network) -> "StateVector":
        return cls(np.zeros(network.n_bus - 1), np.ones(network.n_bus))

    @classmethod
    def from_array(cls, network: Network, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        n = network.n_bus
        if x.shape != (2 * n - 1,):
            raise ValueError(f"state array must have length {2 * n - 1}")
        return cls(x[: n - 1], x[n - 1 :])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.theta, self.vm])

    def angles(self, network: Network) -> np.ndarray:
        """Angles for every bus, reference included (zero)."""
        full = np.zeros(network.n_bus)
        full[network.non_ref] = self.theta
        return full

    def voltages(self, network: Network) -> np.ndarray:
        return self.vm * np.exp(1j * self.angles(network))


@dataclass(frozen=True)
class JacobianBlocks:
    H: np.ndarray
    active_rows: np.ndarray
    reactive_rows: np.ndarray
    n_theta: int

    @property
    def H_Ptheta(self) -> np.ndarray:
        return self.H[np.ix_(self.active_rows, np.arange(self.n_theta))]

    @property
    def H_PV(self) -> np.ndarray:
        return self.H[self.active_rows, self.n_theta :]

    @property
    def H_Qtheta(self) -> np.ndarray:
        return self.H[np.ix_(self.reactive_rows, np.arange(self.n_theta))]

    @property
    def H_QV(self) -> np.ndarray:
        return self.H[self.reactive_rows, self.n_theta :]


@dataclass(frozen=True)
class _Layout:
    """Index arrays that vectorise h(x) for one (network, measurement set)."""

    inj_rows: np.ndarray
    inj_bus: np.ndarray
    inj_real: np.ndarray  # True -> P, False -> Q
    flow_rows: np.ndarray
    flow_from: np.ndarray
    flow_to: np.ndarray
    flow_real: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    vm_rows: np.ndarray
    vm_bus: np.ndarray


@lru_cache(maxsize=64)
def _layout(network: Network, measurements: tuple[Measurement, ...]) -> _Layout:
    idx = network.index
    inj, flow, vmag = [], [], []
    for k, ms in enumerate(measurements):
        if ms.bus not in idx or (ms.to_bus is not None and ms.to_bus not in idx):
            raise MeasurementFileError(f"{ms.label()} references a bus not in the network", k + 1)
        if ms.kind in (Kind.PINJ, Kind.QINJ):
            inj.append((k, idx[ms.bus], ms.kind == Kind.PINJ))
        elif ms.kind == Kind.VMAG:
            vmag.append((k, idx[ms.bus]))
        else:
            i, j = idx[ms.bus], idx[ms.to_bus]
            if (i, j) not in network.pairs:
                raise MeasurementFileError(f"{ms.label()}: no in-service branch between the buses", k + 1)
            y, bsh = network.pairs[(i, j)]
            flow.append((k, i, j, ms.kind == Kind.PFLOW, y + 1j * bsh, -y))

    def col(rows, pos, dtype):
        return np.array([r[pos] for r in rows], dtype=dtype)

    return _Layout(
        inj_rows=col(inj, 0, int), inj_bus=col(inj, 1, int), inj_real=col(inj, 2, bool),
        flow_rows=col(flow, 0, int), flow_from=col(flow, 1, int), flow_to=col(flow, 2, int),
        flow_real=col(flow, 3, bool), yff=col(flow, 4, complex), yft=col(flow, 5, complex),
        vm_rows=col(vmag, 0, int), vm_bus=col(vmag, 1, int),
    )


def _pick(S: np.ndarray, real: np.ndarray) -> np.ndarray:
    return np.where(real, S.real, S.imag)


def eval_h(network: Network, mset: MeasurementSet, x: StateVector) -> np.ndarray:
    """Evaluate the nonlinear measurement function h(x)."""
    lay = _layout(network, mset.measurements)
    V = x.voltages(network)
    h = np.empty(mset.m)
    if lay.inj_rows.size:
        S = V * np.conj(network.ybus @ V)
        h[lay.inj_rows] = _pick(S[lay.inj_bus], lay.inj_real)
    if lay.flow_rows.size:
        Vi, Vj = V[lay.flow_from], V[lay.flow_to]
        S = Vi * np.conj(lay.yff * Vi + lay.yft * Vj)
        h[lay.flow_rows] = _pick(S, lay.flow_real)
    if lay.vm_rows.size:
        h[lay.vm_rows] = x.vm[lay.vm_bus]
    return h


def eval_jacobian(network: Network, mset: MeasurementSet, x: StateVector) -> JacobianBlocks:
    """Analytic Jacobian dh/dx, columns ``[theta_nonref, V_all]``."""
    lay = _layout(network, mset.measurements)
    n = network.n_bus
    V = x.voltages(network)
    Vn = V / np.abs(V)
    dtheta = np.zeros((mset.m, n), dtype=complex)  # dS/dtheta for all buses, ref dropped later
    dvm = np.zeros((mset.m, n), dtype=complex)

    if lay.inj_rows.size:
        Y = network.ybus
        I = Y @ V
        dS_da = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
        dS_dm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
        dtheta[lay.inj_rows] = dS_da[lay.inj_bus]
        dvm[lay.inj_rows] = dS_dm[lay.inj_bus]

    if lay.flow_rows.size:
        i, j, r = lay.flow_from, lay.flow_to, lay.flow_rows
        Vi, Vj = V[i], V[j]
        I = lay.yff * Vi + lay.yft * Vj
        dtheta[r, i] = 1j * Vi * np.conj(I) - 1j * Vi * np.conj(lay.yff * Vi)
        dtheta[r, j] = -1j * Vi * np.conj(lay.yft * Vj)
        dvm[r, i] = Vn[i] * np.conj(I) + Vi * np.conj(lay.yff * Vn[i])
        dvm[r, j] = Vi * np.conj(lay.yft * Vn[j])

    real = np.zeros(mset.m, dtype=bool)
    real[lay.inj_rows] = lay.inj_real
    real[lay.flow_rows] = lay.flow_real
    H = np.hstack([_pick(dtheta, real[:, None])[:, network.non_ref], _pick(dvm, real[:, None])])
    if lay.vm_rows.size:
        H[lay.vm_rows] = 0.0
        H[lay.vm_rows, n - 1 + lay.vm_bus] = 1.0

    act = mset.active
    return JacobianBlocks(H, np.flatnonzero(act), np.flatnonzero(~act), n - 1)


def build_dc_jacobian(network: Network, mset: MeasurementSet) -> np.ndarray:
    """DC model H_DC: active rows of H_Ptheta at flat start, r and shunts ignored.

    Rows follow the order of the active measurements in ``mset``; there is
    one column per non-reference bus angle.
    """
    active = np.flatnonzero(mset.active)
    if active.size == 0:
        raise ValueError("measurement set has no active-power measurements")
    n = network.n_bus
    bpair: dict[tuple[int, int], float] = {}
    Bp = np.zeros((n, n))
    for br in network.branches:
        if not br.in_service:
            continue
        if br.x == 0:
            raise ValueError(f"branch {br.from_bus}-{br.to_bus} has zero reactance; DC model undefined")
        i, j = network.index[br.from_bus], network.index[br.to_bus]
        s = 1.0 / br.x
        bpair[(i, j)] = bpair.get((i, j), 0.0) + s
        bpair[(j, i)] = bpair.get((j, i), 0.0) + s
        Bp[i, i] += s
        Bp[j, j] += s
        Bp[i, j] -= s
        Bp[j, i] -= s

    H = np.zeros((active.size, n))
    for row, k in enumerate(active):
        ms = mset[k]
        i = network.index[ms.bus]
        if ms.kind == Kind.PINJ:
            H[row] = Bp[i]
        else:
            j = network.index[ms.to_bus]
            if (i, j) not in bpair:
                raise MeasurementFileError(f"{ms.label()}: no in-service branch between the buses", k + 1)
            H[row, i] = bpair[(i, j)]
            H[row, j] = -bpair[(i, j)]
    return H[:, network.non_ref]


def simulate_measurements(
    network: Network,
    mset: MeasurementSet,
    x_true: StateVector,
    noise_seed: int = 0,
    noise_scale: float = 0.01,
) -> MeasurementSet:
    """Telemetered data h(x_true) + N(0, (noise_scale*sigma)^2); pseudo rows exact."""
    rng = np.random.default_rng(noise_seed)
    h = eval_h(network, mset, x_true)
    noise = rng.standard_normal(mset.m) * noise_scale * mset.sigma
    noise[mset.pseudo] = 0.0
    return mset.with_values(h + noise)


# ---------------------------------------------------------------------------
# measurement definition files: `KIND i [j] sigma [PSEUDO]`, one per line


def parse_measurements(text: str) -> MeasurementSet:
    out = []
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok:
            raise MeasurementFileError("blank line (each line is one measurement)", lineno)
        try:
            kind = Kind(tok[0].upper())
        except ValueError:
            raise MeasurementFileError(f"unknown measurement kind {tok[0]!r}", lineno) from None
        pseudo = tok[-1].upper() == "PSEUDO"
        if pseudo:
            tok = tok[:-1]
        nbus = 2 if kind.is_flow else 1
        if len(tok) != nbus + 2:
            raise MeasurementFileError(f"{kind.value} expects {nbus} bus id(s) and sigma", lineno)
        try:
            buses = [int(t) for t in tok[1 : 1 + nbus]]
            sigma = float(tok[-1])
        except ValueError as exc:
            raise MeasurementFileError(str(exc), lineno) from None
        try:
            out.append(Measurement(kind, buses[0], buses[1] if nbus == 2 else None, sigma, pseudo))
        except ValueError as exc:
            raise MeasurementFileError(str(exc), lineno) from None
    return MeasurementSet(tuple(out))


def serialize_measurements(mset: MeasurementSet) -> str:
    lines = []
    for ms in mset.measurements:
        parts = [ms.kind.value, str(ms.bus)]
        if ms.to_bus is not None:
            parts.append(str(ms.to_bus))
        parts.append(repr(ms.sigma))
        if ms.pseudo:
            parts.append("PSEUDO")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_measurements(source: str | Path, network: Network | None = None) -> MeasurementSet:
    """Read a measurement file, or a bundled default set by case name."""
    path = Path(source)
    if not path.exists():
        from .data import bundled_path

        path = bundled_path(str(source), ".meas")
    mset = parse_measurements(path.read_text(encoding="utf-8"))
    if network is not None:
        mset.validate(network)
    return mset


def full_measurement_set(
    network: Network,
    *,
    flows: str = "both",
    injections: bool = True,
    reactive: bool = True,
    voltages: bool = True,
    sigma: float = 1.0,
    pseudo_buses=(),
) -> MeasurementSet:
    """Every flow (per ``flows``: "both", "from" or "none"), injection and voltage.

    Injections at ``pseudo_buses`` are flagged as pseudo-measurements.
    """
    pseudo_buses = set(pseudo_buses)
    seen = set()
    pairs = []
    for br in network.branches:
        key = (br.from_bus, br.to_bus)
        if br.in_service and key not in seen and key[::-1] not in seen:
            seen.add(key)
            pairs.append(key)
    kinds = [(Kind.PFLOW, Kind.PINJ)] + ([(Kind.QFLOW, Kind.QINJ)] if reactive else [])
    out = []
    for flow_kind, inj_kind in kinds:
        if flows != "none":
            for i, j in pairs:
                out.append(Measurement(flow_kind, i, j, sigma))
                if flows == "both":
                    out.append(Measurement(flow_kind, j, i, sigma))
        if injections:
            for bus in network.buses:
                out.append(Measurement(inj_kind, bus.id, None, sigma, bus.id in pseudo_buses))
    if voltages:
        out.extend(Measurement(Kind.VMAG, b.id, None, sigma) for b in network.buses)
    return MeasurementSet(tuple(out))
