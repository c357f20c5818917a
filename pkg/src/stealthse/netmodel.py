"""Bus-branch network model and MATPOWER-style case file parsing.

Electrical quantities are kept exactly as written in the case file (MW,
MVAr, per-unit impedances) so that parse -> serialize -> parse is lossless.
Per-unit shunt and series admittances are exposed as derived properties.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "Network",
    "CaseError",
    "CaseSyntaxError",
    "CaseSemanticError",
    "parse_case",
    "serialize_case",
    "load_case",
    "build_admittance",
    "neighborhood",
]

REF_BUS_TYPE = 3


class CaseError(ValueError):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseSemanticError(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    type: int = 1
    pd: float = 0.0  # MW
    qd: float = 0.0  # MVAr
    gs: float = 0.0  # MW demanded at V = 1 pu
    bs: float = 0.0  # MVAr injected at V = 1 pu
    vm: float = 1.0  # pu
    va: float = 0.0  # degrees
    base_kv: float = 0.0

    @property
    def is_reference(self) -> bool:
        return self.type == REF_BUS_TYPE


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0  # total line charging, pu
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)

    @property
    def g(self) -> float:
        return self.series_admittance.real

    @property
    def b_series(self) -> float:
        return self.series_admittance.imag

    @property
    def b_shunt(self) -> float:
        """Charging susceptance placed at each end of the pi model."""
        return self.b / 2.0


@dataclass(frozen=True)
class Network:
    """Validated, immutable bus-branch model.

    Construction checks ids, endpoints, the reference bus and connectivity,
    so every ``Network`` in circulation is estimable.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_state(self) -> int:
        return 2 * self.n_bus - 1

    @cached_property
    def index(self) -> dict[int, int]:
        """Bus id -> position in ``buses``."""
        return {bus.id: pos for pos, bus in enumerate(self.buses)}

    @cached_property
    def ref(self) -> int:
        """Position of the reference bus."""
        return next(pos for pos, bus in enumerate(self.buses) if bus.is_reference)

    @cached_property
    def non_ref(self) -> np.ndarray:
        return np.array([p for p in range(self.n_bus) if p != self.ref], dtype=int)

    @cached_property
    def ybus(self) -> np.ndarray:
        return build_admittance(self)

    @cached_property
    def shunt_admittance(self) -> np.ndarray:
        """Per-unit bus shunt g_si + j b_si (bus table only, no line charging)."""
        return np.array([complex(b.gs, b.bs) / self.base_mva for b in self.buses])

    @cached_property
    def pairs(self) -> dict[tuple[int, int], tuple[complex, float]]:
        """(pos_i, pos_j) -> (series admittance, end shunt susceptance).

        Parallel in-service branches are lumped. Both orientations are keyed.
        """
        out: dict[tuple[int, int], tuple[complex, float]] = {}
        for br in self.branches:
            if not br.in_service:
                continue
            i, j = self.index[br.from_bus], self.index[br.to_bus]
            for key in ((i, j), (j, i)):
                y, bsh = out.get(key, (0j, 0.0))
                out[key] = (y + br.series_admittance, bsh + br.b_shunt)
        return out

    def with_branch_status(self, position: int, in_service: bool) -> "Network":
        branches = list(self.branches)
        old = branches[position]
        branches[position] = Branch(old.from_bus, old.to_bus, old.r, old.x, old.b, in_service)
        return Network(self.buses, tuple(branches), self.base_mva, self.name)

    def true_state(self):
        """State taken from the case's Vm/Va columns (angles re-referenced)."""
        from .measurement import StateVector

        va = np.deg2rad([b.va for b in self.buses])
        va = va - va[self.ref]
        vm = np.array([b.vm for b in self.buses], dtype=float)
        return StateVector(theta=va[self.non_ref], vm=vm)


def _validate(net: Network) -> None:
    seen: set[int] = set()
    for bus in net.buses:
        if bus.id < 1:
            raise CaseSemanticError(f"bus id {bus.id} must be >= 1")
        if bus.id in seen:
            raise CaseSemanticError(f"duplicate bus id {bus.id}")
        seen.add(bus.id)
    refs = [b.id for b in net.buses if b.is_reference]
    if not refs:
        raise CaseSemanticError("no reference bus (type 3) in bus table")
    if len(refs) > 1:
        raise CaseSemanticError(f"multiple reference buses: {refs}")
    for k, br in enumerate(net.branches, start=1):
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise CaseSemanticError(f"branch {k} references bus {end}, which is not in the bus table")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"branch {k} connects bus {br.from_bus} to itself")
        if br.r == 0 and br.x == 0:
            raise CaseSemanticError(f"branch {k} has zero impedance")
    # connectivity over in-service branches
    adj: dict[int, set[int]] = {b.id: set() for b in net.buses}
    for br in net.branches:
        if br.in_service:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    start = net.buses[0].id
    stack, reached = [start], {start}
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in reached:
                reached.add(nb)
                stack.append(nb)
    if len(reached) != len(net.buses):
        islanded = sorted(seen - reached)
        raise CaseSemanticError(f"network is disconnected; buses {islanded} unreachable from bus {start}")


def build_admittance(network: Network) -> np.ndarray:
    """Assemble the nodal admittance matrix Y = G + jB.

    Y_ii collects the bus shunt, the charging halves and the series
    admittances of incident in-service branches; Y_ij = -sum of series
    admittances between i and j. Out-of-service branches are skipped.
    """
    n = network.n_bus
    Y = np.zeros((n, n), dtype=complex)
    Y[np.diag_indices(n)] = network.shunt_admittance
    for br in network.branches:
        if not br.in_service:
            continue
        i, j = network.index[br.from_bus], network.index[br.to_bus]
        y = br.series_admittance
        ysh = 1j * br.b_shunt
        Y[i, i] += y + ysh
        Y[j, j] += y + ysh
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def neighborhood(network: Network, bus: int) -> set[int]:
    """Ids of buses sharing an in-service branch with ``bus``."""
    if bus not in network.index:
        raise KeyError(f"unknown bus id {bus}")
    out = set()
    for br in network.branches:
        if not br.in_service:
            continue
        if br.from_bus == bus:
            out.add(br.to_bus)
        elif br.to_bus == bus:
            out.add(br.from_bus)
    return out


# ---------------------------------------------------------------------------
# case file grammar

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?Inf|NaN")

# MATPOWER column positions (0-based)
_BUS_MIN_COLS = 13
_BRANCH_MIN_COLS = 11
_TAP, _SHIFT, _STATUS = 8, 9, 10


def _strip_comment(line: str) -> str:
    quoted = False
    for pos, ch in enumerate(line):
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            return line[:pos]
    return line


def _parse_matrix(lines: list[str], lineno: int, col: int) -> tuple[list[list[float]], int]:
    """Parse a bracketed numeric matrix starting at ``lines[lineno][col]`` ('[').

    Returns rows and the index of the line holding the closing bracket.
    """
    rows: list[list[float]] = []
    current: list[float] = []
    pos = col + 1
    ln = lineno
    while ln < len(lines):
        text = lines[ln]
        while pos < len(text):
            ch = text[pos]
            if ch in " \t,\r":
                pos += 1
            elif ch == ";":
                if current:
                    rows.append(current)
                current = []
                pos += 1
            elif ch == "]":
                if current:
                    rows.append(current)
                rest = text[pos + 1 :].strip()
                if rest not in ("", ";"):
                    raise CaseSyntaxError(f"unexpected text after ']': {rest!r}", ln + 1, pos + 2)
                return rows, ln
            elif ch == "." and text.startswith("...", pos):
                pos = len(text)
            else:
                m = _NUMBER.match(text, pos)
                if not m:
                    raise CaseSyntaxError(f"expected a number, found {text[pos:pos + 12]!r}", ln + 1, pos + 1)
                current.append(float(m.group()))
                pos = m.end()
        if current:  # newline ends a row
            rows.append(current)
            current = []
        ln += 1
        pos = 0
    raise CaseSyntaxError("unterminated matrix (missing ']')", lineno + 1, col + 1)


def parse_case(text: str, name: str = "") -> Network:
    """Parse MATPOWER-style case text into a validated :class:`Network`.

    Only ``mpc.baseMVA``, ``mpc.bus`` and ``mpc.branch`` are interpreted;
    other ``mpc.*`` tables are syntax-checked and ignored. Off-nominal tap
    ratios and phase shifters are rejected.
    """
    lines = [_strip_comment(line) for line in text.splitlines()]
    tables: dict[str, tuple[list[list[float]], int]] = {}
    base_mva = None
    ln = 0
    while ln < len(lines):
        text_line = lines[ln]
        stripped = text_line.strip()
        if not stripped or stripped.startswith("function"):
            ln += 1
            continue
        m = _ASSIGN.search(text_line)
        if not m:
            col = len(text_line) - len(text_line.lstrip()) + 1
            raise CaseSyntaxError(f"expected 'mpc.<field> = ...', found {stripped[:20]!r}", ln + 1, col)
        key = m.group(1)
        pos = m.end()
        if pos < len(text_line) and text_line[pos] == "[":
            rows, end = _parse_matrix(lines, ln, pos)
            tables[key] = (rows, ln + 1)
            ln = end + 1
            continue
        value = text_line[pos:].strip().rstrip(";").strip()
        if key == "baseMVA":
            try:
                base_mva = float(value)
            except ValueError:
                raise CaseSyntaxError(f"baseMVA must be numeric, found {value!r}", ln + 1, pos + 1) from None
        ln += 1

    if base_mva is None:
        raise CaseSyntaxError("missing mpc.baseMVA", len(lines) or 1, 1)
    for required in ("bus", "branch"):
        if required not in tables:
            raise CaseSyntaxError(f"missing mpc.{required} table", len(lines) or 1, 1)

    bus_rows, bus_line = tables["bus"]
    buses = []
    for k, row in enumerate(bus_rows):
        if len(row) < _BUS_MIN_COLS:
            raise CaseSyntaxError(f"bus row {k + 1} has {len(row)} columns, need {_BUS_MIN_COLS}", bus_line + k, 1)
        if row[0] != int(row[0]):
            raise CaseSemanticError(f"bus id {row[0]} is not an integer")
        buses.append(
            Bus(id=int(row[0]), type=int(row[1]), pd=row[2], qd=row[3], gs=row[4], bs=row[5],
                vm=row[7], va=row[8], base_kv=row[9])
        )

    branch_rows, branch_line = tables["branch"]
    branches = []
    for k, row in enumerate(branch_rows):
        if len(row) < _BRANCH_MIN_COLS:
            raise CaseSyntaxError(
                f"branch row {k + 1} has {len(row)} columns, need {_BRANCH_MIN_COLS}", branch_line + k, 1
            )
        tap, shift = row[_TAP], row[_SHIFT]
        if tap not in (0.0, 1.0):
            raise CaseSemanticError(
                f"branch {k + 1} ({int(row[0])}-{int(row[1])}) has tap ratio {tap}; off-nominal taps are not supported"
            )
        if shift != 0.0:
            raise CaseSemanticError(
                f"branch {k + 1} ({int(row[0])}-{int(row[1])}) has phase shift {shift}; phase shifters are not supported"
            )
        branches.append(Branch(int(row[0]), int(row[1]), row[2], row[3], row[4], bool(row[_STATUS])))

    return Network(tuple(buses), tuple(branches), base_mva, name)


def serialize_case(network: Network) -> str:
    """Write a case file that :func:`parse_case` reads back to an equal network."""
    out = [f"function mpc = {network.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {network.base_mva!r};", ""]
    out.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
    out.append("mpc.bus = [")
    for b in network.buses:
        cols = [b.id, b.type, b.pd, b.qd, b.gs, b.bs, 1, b.vm, b.va, b.base_kv, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(c) for c in cols) + ";")
    out.append("];")
    out.append("")
    out.append("%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax")
    out.append("mpc.branch = [")
    for br in network.branches:
        cols = [br.from_bus, br.to_bus, br.r, br.x, br.b, 0, 0, 0, 0, 0, int(br.in_service), -360, 360]
        out.append("\t" + "\t".join(_fmt(c) for c in cols) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def load_case(source: str | Path) -> Network:
    """Load a case from a file path or a bundled case name (e.g. ``"case14"``)."""
    path = Path(source)
    if not path.exists():
        from .data import bundled_path

        path = bundled_path(str(source), ".m")
    return parse_case(path.read_text(encoding="utf-8"), name=path.stem)
