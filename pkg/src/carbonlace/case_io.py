"""Grid case model, parsers and serializer.

Two dialects are read:

* ``matpower-subset``: ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``,
  ``mpc.branch`` and ``mpc.gencost`` written as numeric matrices. Only the
  columns needed for a DC dispatch are used.
* ``native``: a JSON document holding the same data plus fuels, zones and
  clusters (see ``serialize_case``).
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

FUEL_FACTORS = {"CCGT": 0.3625, "PEL": 0.7018, "ANT": 0.9143}

# Table of fuel assignments used for the 30-bus experiments (bus id -> fuel).
CASE30_FUELS = {1: "CCGT", 2: "PEL", 13: "PEL", 22: "ANT", 23: "ANT", 27: "ANT"}

NATIVE_FORMAT = "carbonlace-case/1"


class CaseError(ValueError):
    pass


class CaseSyntaxError(CaseError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {msg}")
        self.line = line
        self.column = column


class CaseSemanticError(CaseError):
    def __init__(self, msg: str, entity: str | None = None):
        super().__init__(f"{entity}: {msg}" if entity else msg)
        self.entity = entity


@dataclass(frozen=True)
class Bus:
    id: int
    zone_id: int | None = None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    reactance: float
    flow_limit: float


@dataclass(frozen=True)
class Generator:
    bus: int
    cost_linear: float
    g_min: float
    g_max: float
    fuel: str = "unassigned"
    emission_factor: float = 0.0


@dataclass(frozen=True)
class Load:
    bus: int
    nominal_mw: float


@dataclass(frozen=True)
class ZoneMap:
    """Assignment of loads to ``K`` groups (zones or clusters)."""

    K: int
    assignment: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        if self.K < 1:
            raise CaseSemanticError("zone count must be positive", "zones")
        for i, a in enumerate(self.assignment):
            if not 0 <= a < self.K:
                raise CaseSemanticError(f"zone index {a} out of range", f"load {i}")
        missing = set(range(self.K)) - set(self.assignment)
        if missing:
            raise CaseSemanticError(f"empty zone(s) {sorted(missing)}", "zones")

    @property
    def indicator(self) -> np.ndarray:
        """K x D binary matrix with ``M[k, i] = 1`` when load i is in zone k."""
        M = np.zeros((self.K, len(self.assignment)))
        M[list(self.assignment), np.arange(len(self.assignment))] = 1.0
        return M

    def members(self, k: int) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a == k]


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    slack_bus: int
    zones: ZoneMap | None = None
    clusters: ZoneMap | None = None
    name: str = ""
    _bus_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("buses", "lines", "generators", "loads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "_bus_index", {b.id: k for k, b in enumerate(self.buses)})
        validate(self)

    @property
    def n_loads(self) -> int:
        return len(self.loads)

    @property
    def n_gens(self) -> int:
        return len(self.generators)

    def bus_index(self, bus_id: int) -> int:
        return self._bus_index[bus_id]

    @property
    def nominal_loads(self) -> np.ndarray:
        return np.array([ld.nominal_mw for ld in self.loads])

    @property
    def emission_factors(self) -> np.ndarray:
        return np.array([g.emission_factor for g in self.generators])

    @property
    def costs(self) -> np.ndarray:
        return np.array([g.cost_linear for g in self.generators])

    @property
    def load_buses(self) -> list[int]:
        return [ld.bus for ld in self.loads]

    def load_index(self, bus_id: int) -> int:
        for i, ld in enumerate(self.loads):
            if ld.bus == bus_id:
                return i
        raise KeyError(f"no load at bus {bus_id}")

    def digest(self) -> str:
        return hashlib.sha256(serialize_case(self).encode()).hexdigest()[:16]


def validate(case: GridCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseSemanticError("duplicate bus id", "buses")
    known = set(ids)
    if case.slack_bus not in known:
        raise CaseSemanticError(f"slack bus {case.slack_bus} does not exist", "slack_bus")
    if not case.generators:
        raise CaseSemanticError("no generators", "generators")
    for k, ln in enumerate(case.lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in known:
                raise CaseSemanticError(f"endpoint bus {end} does not exist", f"line {k}")
        if not ln.reactance > 0:
            raise CaseSemanticError(f"reactance {ln.reactance} must be positive", f"line {k}")
        if not ln.flow_limit > 0:
            raise CaseSemanticError(f"flow limit {ln.flow_limit} must be positive", f"line {k}")
    for k, g in enumerate(case.generators):
        if g.bus not in known:
            raise CaseSemanticError(f"bus {g.bus} does not exist", f"generator {k}")
        if g.g_min > g.g_max:
            raise CaseSemanticError(f"g_min {g.g_min} exceeds g_max {g.g_max}", f"generator {k}")
        if g.emission_factor < 0:
            raise CaseSemanticError("negative emission factor", f"generator {k}")
        if g.fuel in FUEL_FACTORS and abs(g.emission_factor - FUEL_FACTORS[g.fuel]) > 1e-12:
            raise CaseSemanticError(
                f"emission factor {g.emission_factor} inconsistent with fuel {g.fuel}", f"generator {k}"
            )
    for k, ld in enumerate(case.loads):
        if ld.bus not in known:
            raise CaseSemanticError(f"bus {ld.bus} does not exist", f"load {k}")
        if ld.nominal_mw < 0:
            raise CaseSemanticError("negative nominal load", f"load {k}")
    for label, zm in (("zones", case.zones), ("clusters", case.clusters)):
        if zm is not None and len(zm.assignment) != len(case.loads):
            raise CaseSemanticError("assignment length differs from load count", label)


# ---------------------------------------------------------------- MATPOWER

_SECTION_RE = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_matrix(lines: list[str], start_line: int, start_col: int, text_after: str):
    """Read a ``[ ... ];`` numeric block starting right after ``=``."""
    rows: list[list[float]] = []
    current: list[float] = []
    body = text_after
    lineno = start_line
    col0 = start_col
    stripped = body.lstrip()
    if not stripped.startswith("["):
        raise CaseSyntaxError("expected '[' to open matrix", lineno, col0 + len(body) - len(stripped) + 1)
    col0 += len(body) - len(stripped) + 1
    body = stripped[1:]
    idx = start_line - 1
    while True:
        pos = 0
        while pos < len(body):
            ch = body[pos]
            if ch in " \t,":
                pos += 1
            elif ch == ";" or ch == "\n":
                if current:
                    rows.append(current)
                    current = []
                pos += 1
            elif ch == "]":
                if current:
                    rows.append(current)
                rest = body[pos + 1 :].strip()
                if rest not in ("", ";"):
                    raise CaseSyntaxError(f"unexpected text {rest!r} after matrix", lineno, col0 + pos + 2)
                return rows, idx + 1
            else:
                m = re.match(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?|[-+]?[Ii]nf", body[pos:])
                if not m:
                    raise CaseSyntaxError(f"invalid number near {body[pos:pos + 10]!r}", lineno, col0 + pos + 1)
                current.append(float(m.group(0)))
                pos += m.end()
        if current:
            rows.append(current)
            current = []
        idx += 1
        if idx >= len(lines):
            raise CaseSyntaxError("unterminated matrix (missing ']')", lineno, col0 + len(body))
        lineno = idx + 1
        col0 = 0
        body = _strip_comment(lines[idx])


def _parse_matpower(text: str, name: str = "") -> GridCase:
    lines = text.splitlines()
    sections: dict[str, list[list[float]] | float] = {}
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        m = _SECTION_RE.search(raw)
        if not m:
            i += 1
            continue
        key = m.group(1)
        after = raw[m.end() :]
        if after.lstrip().startswith("["):
            rows, i = _parse_matrix(lines, i + 1, m.end(), after)
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                raise CaseSyntaxError(f"ragged rows in mpc.{key}", i, 1)
            sections[key] = rows
        elif after.lstrip().startswith("{"):
            # cell arrays such as mpc.genfuel are not part of the subset
            warnings.warn(f"ignoring unsupported section mpc.{key}", stacklevel=3)
            while "}" not in _strip_comment(lines[i]):
                i += 1
            i += 1
            continue
        else:
            val = after.strip().rstrip(";").strip()
            try:
                sections[key] = float(val)
            except ValueError:
                if key != "version":
                    raise CaseSyntaxError(f"cannot parse value {val!r}", i + 1, m.end() + 1) from None
            i += 1
            continue
    known = {"baseMVA", "bus", "gen", "branch", "gencost", "version"}
    for key in sections:
        if key not in known:
            warnings.warn(f"ignoring unsupported section mpc.{key}", stacklevel=3)
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in sections:
            raise CaseSemanticError(f"missing section mpc.{key}")

    bus_rows = np.atleast_2d(np.array(sections["bus"], dtype=float))
    gen_rows = np.array(sections["gen"], dtype=float)
    br_rows = np.atleast_2d(np.array(sections["branch"], dtype=float))
    if gen_rows.size == 0:
        raise CaseSemanticError("no generators", "generators")
    gen_rows = np.atleast_2d(gen_rows)
    cost_rows = sections.get("gencost")

    buses = []
    slack = None
    loads = []
    for r in bus_rows:
        bid = int(r[0])
        zone = int(r[10]) if bus_rows.shape[1] > 10 else None
        buses.append(Bus(bid, zone))
        if int(r[1]) == 3:
            slack = bid
        if r[2] > 0:
            loads.append(Load(bid, float(r[2])))
    if slack is None:
        raise CaseSemanticError("no reference (type 3) bus", "buses")
    loads.sort(key=lambda ld: ld.bus)

    lines_out = []
    for k, r in enumerate(br_rows):
        if br_rows.shape[1] > 10 and r[10] <= 0:
            continue
        rate = float(r[5]) if br_rows.shape[1] > 5 else 0.0
        lines_out.append(Line(int(r[0]), int(r[1]), float(r[3]), rate if rate > 0 else float("inf")))

    gens = []
    for k, r in enumerate(gen_rows):
        if gen_rows.shape[1] > 7 and r[7] <= 0:
            continue
        c1 = 0.0
        if cost_rows is not None:
            if k >= len(cost_rows):
                raise CaseSemanticError("missing gencost row", f"generator {k}")
            crow = cost_rows[k]
            model, ncost = int(crow[0]), int(crow[3])
            if model != 2:
                raise CaseSemanticError("only polynomial gencost (model 2) is supported", f"generator {k}")
            coeffs = crow[4 : 4 + ncost]
            c1 = float(coeffs[-2]) if ncost >= 2 else 0.0
        gens.append(Generator(int(r[0]), c1, float(r[9]), float(r[8])))

    return GridCase(
        base_mva=float(sections["baseMVA"]),
        buses=buses,
        lines=lines_out,
        generators=gens,
        loads=loads,
        slack_bus=slack,
        name=name,
    )


# ------------------------------------------------------------------ native


def _zone_from_json(obj, count_key: str) -> ZoneMap | None:
    if obj is None:
        return None
    return ZoneMap(int(obj[count_key]), tuple(obj["assignment"]))


def _finite_or_none(v: float):
    return v if np.isfinite(v) else None


def _parse_native(text: str) -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise CaseSyntaxError("top level must be an object", 1, 1)
    for key in ("base_mva", "buses", "lines", "generators", "loads", "slack_bus"):
        if key not in doc:
            raise CaseSemanticError(f"missing key {key!r}")
    try:
        buses = [Bus(int(b["id"]), b.get("zone_id")) for b in doc["buses"]]
        lines = [
            Line(
                int(ln["from_bus"]),
                int(ln["to_bus"]),
                float(ln["reactance"]),
                float("inf") if ln.get("flow_limit") is None else float(ln["flow_limit"]),
            )
            for ln in doc["lines"]
        ]
        gens = [
            Generator(
                int(g["bus"]),
                float(g["cost_linear"]),
                float(g["g_min"]),
                float(g["g_max"]),
                str(g.get("fuel", "unassigned")),
                float(g.get("emission_factor", 0.0)),
            )
            for g in doc["generators"]
        ]
        loads = [Load(int(ld["bus"]), float(ld["nominal_mw"])) for ld in doc["loads"]]
    except (KeyError, TypeError) as exc:
        raise CaseSemanticError(f"malformed entry: {exc}") from None
    return GridCase(
        base_mva=float(doc["base_mva"]),
        buses=buses,
        lines=lines,
        generators=gens,
        loads=loads,
        slack_bus=int(doc["slack_bus"]),
        zones=_zone_from_json(doc.get("zones"), "K"),
        clusters=_zone_from_json(doc.get("clusters"), "count"),
        name=str(doc.get("name", "")),
    )


def parse_case(text: str, dialect: str = "native", name: str = "") -> GridCase:
    """Parse case text in the ``native`` or ``matpower-subset`` dialect.

    Raises:
        CaseSyntaxError: malformed text (carries line and column).
        CaseSemanticError: data violating a case invariant (names the entity).
    """
    if dialect == "native":
        return _parse_native(text)
    if dialect in ("matpower", "matpower-subset"):
        return _parse_matpower(text, name=name)
    raise ValueError(f"unknown dialect {dialect!r}")


def serialize_case(case: GridCase) -> str:
    doc = {
        "format": NATIVE_FORMAT,
        "name": case.name,
        "base_mva": case.base_mva,
        "slack_bus": case.slack_bus,
        "buses": [{"id": b.id, "zone_id": b.zone_id} for b in case.buses],
        "lines": [
            {
                "from_bus": ln.from_bus,
                "to_bus": ln.to_bus,
                "reactance": ln.reactance,
                "flow_limit": _finite_or_none(ln.flow_limit),
            }
            for ln in case.lines
        ],
        "generators": [
            {
                "bus": g.bus,
                "cost_linear": g.cost_linear,
                "g_min": g.g_min,
                "g_max": g.g_max,
                "fuel": g.fuel,
                "emission_factor": g.emission_factor,
            }
            for g in case.generators
        ],
        "loads": [{"bus": ld.bus, "nominal_mw": ld.nominal_mw} for ld in case.loads],
    }
    if case.zones is not None:
        doc["zones"] = {"K": case.zones.K, "assignment": list(case.zones.assignment)}
    if case.clusters is not None:
        doc["clusters"] = {"count": case.clusters.K, "assignment": list(case.clusters.assignment)}
    return json.dumps(doc, indent=1) + "\n"


def apply_fuel_assignment(
    case: GridCase, mapping: dict[int, str], table: dict[str, float] | None = None
) -> GridCase:
    """Set fuel and emission factor of every generator at the mapped buses."""
    table = FUEL_FACTORS if table is None else table
    gen_buses = {g.bus for g in case.generators}
    for bus, fuel in mapping.items():
        if fuel not in table:
            raise CaseSemanticError(f"unknown fuel {fuel!r}", f"bus {bus}")
        if bus not in gen_buses:
            raise CaseSemanticError(f"no generator at bus {bus}", f"bus {bus}")
    if not mapping:
        return case
    gens = [
        replace(g, fuel=mapping[g.bus], emission_factor=table[mapping[g.bus]]) if g.bus in mapping else g
        for g in case.generators
    ]
    return replace(case, generators=tuple(gens))


def with_annotations(case: GridCase, zones: ZoneMap | None = None, clusters: ZoneMap | None = None) -> GridCase:
    return replace(
        case,
        zones=zones if zones is not None else case.zones,
        clusters=clusters if clusters is not None else case.clusters,
    )


def read_case(path) -> GridCase:
    """Load a case file, picking the dialect from the extension (.m or .json)."""
    from pathlib import Path

    path = Path(path)
    text = path.read_text()
    dialect = "matpower-subset" if path.suffix == ".m" else "native"
    return parse_case(text, dialect, name=path.stem)


BUNDLED = {"case2": "case2.json", "case14-tight": "case14_tight.json", "case30": "case30.json"}

# load multipliers on the nominal profile of case14-tight that put the network in
# two different congestion regimes
CASE14_PATTERNS = {
    "light": (1.0, 1.0, 0.9, 0.9, 0.9, 0.9),
    "skewed": (1.0, 1.0, 1.5, 1.5, 0.75, 0.75),
}


def bundled_text(name: str) -> str:
    fname = BUNDLED.get(name, name)
    return resources.files("carbonlace.data").joinpath(fname).read_text()


def load_bundled(name: str) -> GridCase:
    """One of ``case2``, ``case14-tight``, ``case30`` (or a raw data file name)."""
    fname = BUNDLED.get(name, name)
    dialect = "matpower-subset" if fname.endswith(".m") else "native"
    return parse_case(bundled_text(fname), dialect, name=name)
