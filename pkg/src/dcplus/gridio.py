"""MATPOWER case ingestion and internal bus ordering.

Only the four power-flow tables are read (``baseMVA``, ``bus``, ``gen``,
``branch``); other matrices and cell arrays in the file are skipped. Powers
are converted to per unit on ``baseMVA`` at parse time, angles to radians.

Internal bus order puts PQ buses first, then PV buses, then the slack, each
group sorted by external bus number.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class GridError(ValueError):
    """Raised for malformed or inconsistent grid data."""


class CaseSyntaxError(GridError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: BusKind
    p_load: float
    q_load: float
    g_shunt: float
    b_shunt: float
    v_set: float
    base_kv: float
    v_init: float = 1.0
    theta_init: float = 0.0


@dataclass(frozen=True)
class GenRecord:
    bus: int
    p_gen: float
    q_gen: float
    v_set: float
    in_service: bool = True


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tau: float = 1.0
    alpha: float = 0.0
    in_service: bool = True

    def admittance(self) -> tuple[complex, complex, complex, complex]:
        """Return the pi-model two-port entries ``(y_ff, y_ft, y_tf, y_tt)``."""
        if not self.in_service:
            return 0j, 0j, 0j, 0j
        ys = 1.0 / complex(self.r, self.x)
        yc = 0.5j * self.b_charging
        shift = np.exp(1j * self.alpha)
        return (
            (ys + yc) / self.tau**2,
            -ys / (self.tau * np.conj(shift)),
            -ys / (self.tau * shift),
            ys + yc,
        )


@dataclass(frozen=True)
class GridCase:
    name: str
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...] = ()

    def __post_init__(self):
        if not self.base_mva > 0:
            raise GridError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise GridError(f"duplicate bus id {dup[0]}")
        known = set(ids)
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise GridError(f"branch {k} references unknown bus {end}")
            if br.tau <= 0:
                raise GridError(f"branch {k} has non-positive tap ratio")
            if br.in_service and br.r == 0 and br.x == 0:
                raise GridError(f"branch {k} has zero impedance")
        for g in self.gens:
            if g.bus not in known:
                raise GridError(f"generator references unknown bus {g.bus}")
        slack = [b.id for b in self.buses if b.kind == BusKind.SLACK]
        if len(slack) != 1:
            raise GridError(f"expected exactly one slack bus, found {len(slack)}")
        for b in self.buses:
            if b.kind != BusKind.PQ and not b.v_set > 0:
                raise GridError(f"bus {b.id} needs a positive voltage set point")

    def branch_labels(self) -> list[tuple[int, int, int]]:
        """``(from, to, ordinal)`` per branch, ordinal counting parallel circuits."""
        seen: dict[tuple[int, int], int] = {}
        labels = []
        for br in self.branches:
            key = (br.from_bus, br.to_bus)
            seen[key] = seen.get(key, 0) + 1
            labels.append((br.from_bus, br.to_bus, seen[key]))
        return labels

    def to_json(self) -> str:
        """Canonical JSON dump with stable key order."""
        payload = {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [_record_dict(b) for b in self.buses],
            "branches": [_record_dict(b) for b in self.branches],
            "gens": [_record_dict(g) for g in self.gens],
        }
        return json.dumps(payload, indent=1, sort_keys=True)


def _record_dict(rec) -> dict:
    out = dataclasses.asdict(rec)
    for k, v in out.items():
        if isinstance(v, enum.Enum):
            out[k] = v.name
    return out


# --------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_BUS_TYPES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def _tables(text: str) -> tuple[dict[str, float], dict[str, list[tuple[int, list[float]]]]]:
    scalars: dict[str, float] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: str | None = None
    skipping_cell = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if skipping_cell:
            if "}" in line:
                skipping_cell = False
            continue
        if current is None:
            m = _ASSIGN.match(line)
            if not m:
                continue
            name, rhs = m.group(1), m.group(2).strip()
            if rhs.startswith("{"):
                skipping_cell = "}" not in rhs
                continue
            if rhs.startswith("["):
                current = name
                tables[name] = []
                line = rhs[1:]
            else:
                value = rhs.rstrip(";").strip()
                try:
                    scalars[name] = float(value)
                except ValueError:
                    if not value.startswith("'"):
                        raise CaseSyntaxError(f"cannot parse value of mpc.{name}", lineno) from None
                continue
        closed = "]" in line
        if closed:
            line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                tables[current].append((lineno, [float(t) for t in tokens]))
            except ValueError:
                raise CaseSyntaxError(f"non-numeric entry in mpc.{current}", lineno) from None
        if closed:
            current = None
    if current is not None:
        raise CaseSyntaxError(f"unterminated matrix mpc.{current}", len(text.splitlines()))
    return scalars, tables


def parse_matpower(text: str, name: str = "case") -> GridCase:
    """Parse the body of a MATPOWER ``.m`` case file into a :class:`GridCase`."""
    m = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
    if m:
        name = m.group(1)
    scalars, tables = _tables(text)
    if "baseMVA" not in scalars:
        raise CaseSyntaxError("missing mpc.baseMVA", 1)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseSyntaxError(f"missing mpc.{required}", 1)
    base = scalars["baseMVA"]

    raw_buses = []
    for lineno, row in tables["bus"]:
        if len(row) < 10:
            raise CaseSyntaxError("bus row needs at least 10 columns", lineno)
        code = int(row[1])
        if code == 4:
            logger.warning("dropping isolated bus %d", int(row[0]))
            continue
        if code not in _BUS_TYPES:
            raise CaseSyntaxError(f"unknown bus type code {code}", lineno)
        raw_buses.append((lineno, row))

    gens = []
    for lineno, row in tables["gen"]:
        if len(row) < 8:
            raise CaseSyntaxError("gen row needs at least 8 columns", lineno)
        gens.append(GenRecord(int(row[0]), row[1] / base, row[2] / base, row[5], row[7] > 0))

    v_sets: dict[int, float] = {}
    for g in gens:
        if not g.in_service:
            continue
        if g.bus in v_sets and not math.isclose(v_sets[g.bus], g.v_set):
            logger.warning("conflicting voltage set points at bus %d; keeping %.4f", g.bus, v_sets[g.bus])
        v_sets.setdefault(g.bus, g.v_set)

    buses = []
    seen: set[int] = set()
    for lineno, row in raw_buses:
        bid = int(row[0])
        if bid in seen:
            raise CaseSyntaxError(f"duplicate bus id {bid}", lineno)
        seen.add(bid)
        kind = _BUS_TYPES[int(row[1])]
        if kind == BusKind.PV and bid not in v_sets:
            logger.warning("PV bus %d has no in-service generator; treating as PQ", bid)
            kind = BusKind.PQ
        v_set = v_sets.get(bid, row[7]) if kind != BusKind.PQ else 0.0
        buses.append(
            BusRecord(
                id=bid,
                kind=kind,
                p_load=row[2] / base,
                q_load=row[3] / base,
                g_shunt=row[4] / base,
                b_shunt=row[5] / base,
                v_set=v_set,
                base_kv=row[9],
                v_init=row[7],
                theta_init=math.radians(row[8]),
            )
        )

    branches = []
    for lineno, row in tables["branch"]:
        if len(row) < 11:
            raise CaseSyntaxError("branch row needs at least 11 columns", lineno)
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in seen:
                raise CaseSyntaxError(f"branch references unknown bus {end}", lineno)
        tau = row[8] if row[8] != 0 else 1.0
        branches.append(BranchRecord(f, t, row[2], row[3], row[4], tau, math.radians(row[9]), row[10] > 0))

    return GridCase(name, base, tuple(buses), tuple(branches), tuple(gens))


def load_case(path: str | Path) -> GridCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def _invert(target: float, guess: float, forward) -> float:
    """Search ulps around ``guess`` for ``z`` with ``forward(z) == target``."""
    lo = hi = guess
    for _ in range(16):
        for z in (lo, hi):
            if forward(z) == target:
                return float(z)
        lo, hi = np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)
    return guess


def dump_matpower(case: GridCase) -> str:
    """Serialize ``case`` back to MATPOWER text; re-parsing yields an equal case."""
    base = case.base_mva

    def mw(v):
        return _invert(v, v * base, lambda z: z / base) if v else 0.0

    def deg(v):
        return _invert(v, math.degrees(v), math.radians) if v else 0.0

    def row(vals):
        return "\t" + "\t".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals) + ";"

    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for b in case.buses:
        out.append(row([b.id, int(b.kind), mw(b.p_load), mw(b.q_load), mw(b.g_shunt), mw(b.b_shunt),
                        1, b.v_init, deg(b.theta_init), b.base_kv, 1, 1.1, 0.9]))
    out += ["];", "mpc.gen = ["]
    for g in case.gens:
        out.append(row([g.bus, mw(g.p_gen), mw(g.q_gen), 0.0, 0.0, g.v_set, base, int(g.in_service)]))
    out += ["];", "mpc.branch = ["]
    for br in case.branches:
        out.append(row([br.from_bus, br.to_bus, br.r, br.x, br.b_charging, 0.0, 0.0, 0.0,
                        br.tau, deg(br.alpha), int(br.in_service)]))
    out.append("];")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# indexing

@dataclass(frozen=True, eq=False)
class IndexedGrid:
    """Array view of a case in internal bus order.

    Bus arrays are indexed by internal bus number (PQ, then PV, then slack).
    Branch arrays keep file row order; ``status`` marks in-service branches,
    so outages flip a flag instead of renumbering.
    """

    case: GridCase
    n: int
    m: int
    bus_ids: np.ndarray
    kind: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    v_set: np.ndarray
    g_shunt: np.ndarray
    b_shunt: np.ndarray
    base_kv: np.ndarray
    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b_charging: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    status: np.ndarray
    labels: tuple[tuple[int, int, int], ...]
    pos: dict[int, int] = field(repr=False)

    @property
    def n_bus(self) -> int:
        return self.n + self.m + 1

    @property
    def slack(self) -> int:
        return self.n + self.m

    @property
    def n_branch(self) -> int:
        return len(self.f)

    @property
    def base_mva(self) -> float:
        return self.case.base_mva

    def admittances(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized pi-model entries ``(y_ff, y_ft, y_tf, y_tt)``; zero for out-of-service branches."""
        on = self.status
        z = np.where(on, self.r + 1j * self.x, 1.0)
        ys = np.where(on, 1.0 / z, 0.0)
        yc = np.where(on, 0.5j * self.b_charging, 0.0)
        shift = np.exp(1j * self.alpha)
        return (
            (ys + yc) / self.tau**2,
            -ys / (self.tau * np.conj(shift)),
            -ys / (self.tau * shift),
            ys + yc,
        )

    def with_status(self, branches, in_service: bool = False) -> IndexedGrid:
        """Copy with the given branch indices switched out of (or into) service."""
        status = self.status.copy()
        status[list(branches)] = in_service
        return dataclasses.replace(self, status=status)

    def with_branch(self, k: int, **params) -> IndexedGrid:
        """Copy with electrical parameters of branch ``k`` replaced."""
        arrays = {}
        for name, value in params.items():
            arr = getattr(self, name).copy()
            arr[k] = value
            arrays[name] = arr
        return dataclasses.replace(self, **arrays)

    def branch_index(self, label) -> int:
        """Resolve ``(from, to)`` or ``(from, to, ordinal)`` to a branch index."""
        label = tuple(int(v) for v in label)
        if len(label) == 2:
            label = (*label, 1)
        for k, lab in enumerate(self.labels):
            if lab == label or (lab[1], lab[0], lab[2]) == label:
                return k
        raise KeyError(f"no branch {label}")

    def incident(self, bus: int) -> np.ndarray:
        return np.flatnonzero((self.f == bus) | (self.t == bus))


def index_grid(case: GridCase) -> IndexedGrid:
    """Order buses PQ, PV, slack (ascending external id within each kind)."""
    slack = [b for b in case.buses if b.kind == BusKind.SLACK]
    if len(slack) != 1:
        raise GridError(f"expected exactly one slack bus, found {len(slack)}")
    pq = sorted((b for b in case.buses if b.kind == BusKind.PQ), key=lambda b: b.id)
    pv = sorted((b for b in case.buses if b.kind == BusKind.PV), key=lambda b: b.id)
    ordered = pq + pv + slack
    pos = {b.id: i for i, b in enumerate(ordered)}

    p_inj = np.array([-b.p_load for b in ordered])
    q_inj = np.array([-b.q_load for b in ordered])
    for g in case.gens:
        if g.in_service:
            p_inj[pos[g.bus]] += g.p_gen
            q_inj[pos[g.bus]] += g.q_gen

    br = case.branches
    return IndexedGrid(
        case=case,
        n=len(pq),
        m=len(pv),
        bus_ids=np.array([b.id for b in ordered]),
        kind=np.array([int(b.kind) for b in ordered]),
        p_inj=p_inj,
        q_inj=q_inj,
        v_set=np.array([b.v_set if b.kind != BusKind.PQ else np.nan for b in ordered]),
        g_shunt=np.array([b.g_shunt for b in ordered]),
        b_shunt=np.array([b.b_shunt for b in ordered]),
        base_kv=np.array([b.base_kv for b in ordered]),
        f=np.array([pos[b.from_bus] for b in br], dtype=int),
        t=np.array([pos[b.to_bus] for b in br], dtype=int),
        r=np.array([b.r for b in br], dtype=float),
        x=np.array([b.x for b in br], dtype=float),
        b_charging=np.array([b.b_charging for b in br], dtype=float),
        tau=np.array([b.tau for b in br], dtype=float),
        alpha=np.array([b.alpha for b in br], dtype=float),
        status=np.array([b.in_service for b in br], dtype=bool),
        labels=tuple(case.branch_labels()),
        pos=pos,
    )


@dataclass(frozen=True)
class Connectivity:
    connected: bool
    islanded: frozenset[int] = frozenset()

    def __bool__(self) -> bool:
        return self.connected


def connectivity_check(grid: IndexedGrid, removed=()) -> Connectivity:
    """Check connectivity over in-service branches minus ``removed``.

    On islanding, ``islanded`` holds the external ids of buses not connected
    to the slack.
    """
    on = grid.status.copy()
    removed = list(removed)
    if removed:
        on[removed] = False
    nb = grid.n_bus
    adj = coo_matrix((np.ones(on.sum()), (grid.f[on], grid.t[on])), shape=(nb, nb))
    _, labels = connected_components(adj, directed=False)
    cut = labels != labels[grid.slack]
    if not cut.any():
        return Connectivity(True)
    return Connectivity(False, frozenset(int(i) for i in grid.bus_ids[cut]))


def bridges(grid: IndexedGrid) -> list[int]:
    """Branch indices whose single removal islands part of the grid."""
    return [k for k in np.flatnonzero(grid.status) if not connectivity_check(grid, [k])]
