"""Network data: MATPOWER case parsing, branch admittances and scenarios.

All quantities are stored per-unit on the system MVA base. Scenario
randomness comes from numpy's PCG64 bit generator (PCG-XSL-RR 128/64),
seeded directly with the integer scenario seed, so a given seed produces
the same draws on every platform numpy supports.
"""

from __future__ import annotations

import cmath
import dataclasses
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "BusType",
    "Bus",
    "Generator",
    "Branch",
    "NetworkModel",
    "ScenarioKind",
    "Scenario",
    "CaseParseError",
    "UnsupportedFeatureError",
    "DegenerateBranchError",
    "ScenarioError",
    "parse_matpower",
    "load_case",
    "write_matpower",
    "compute_admittance",
    "perturb_loads",
    "enumerate_gen_outages",
    "sample_line_outages",
    "is_connected",
    "non_bridging_lines",
    "make_rng",
]

DATA_DIR = Path(__file__).parent / "data"


class CaseParseError(ValueError):
    """Malformed or incomplete case text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFeatureError(CaseParseError):
    pass


class DegenerateBranchError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


class BusType(Enum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    btype: BusType
    pd: float
    qd: float
    gs: float
    bs: float
    vmin2: float
    vmax2: float

    def __post_init__(self):
        if not self.vmin2 > 0:
            raise ValueError(f"bus {self.id}: vmin2 must be positive")
        if self.vmax2 < self.vmin2:
            raise ValueError(f"bus {self.id}: vmax2 < vmin2")


@dataclass(frozen=True)
class Generator:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: tuple[float, float, float]
    status: bool = True

    def __post_init__(self):
        if self.pmin > self.pmax or self.qmin > self.qmax:
            raise ValueError(f"generator at bus index {self.bus}: bounds out of order")
        if self.cost[0] < 0:
            raise ValueError(f"generator at bus index {self.bus}: negative quadratic cost")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    bc: float
    tap: float = 1.0
    shift: float = 0.0
    rate: float = 0.0
    status: bool = True
    adm: tuple[float, ...] = field(default=(), compare=True)

    def __post_init__(self):
        if self.tap <= 0:
            raise ValueError("branch tap ratio must be positive")
        adm = compute_admittance(self.r, self.x, self.bc, self.tap, self.shift)
        object.__setattr__(self, "adm", adm)


@dataclass(frozen=True)
class NetworkModel:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "branches", tuple(self.branches))
        nb = len(self.buses)
        for k, g in enumerate(self.generators):
            if not 0 <= g.bus < nb:
                raise ValueError(f"generator {k} references missing bus index {g.bus}")
        for k, br in enumerate(self.branches):
            if not (0 <= br.from_bus < nb and 0 <= br.to_bus < nb):
                raise ValueError(f"branch {k} references a missing bus")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def in_service_generators(self) -> list[int]:
        return [k for k, g in enumerate(self.generators) if g.status]

    def in_service_branches(self) -> list[int]:
        return [k for k, br in enumerate(self.branches) if br.status]

    def slack_bus(self) -> int:
        slack = [k for k, b in enumerate(self.buses) if b.btype is BusType.SLACK]
        if len(slack) != 1:
            raise ValueError(f"expected exactly one slack bus, found {len(slack)}")
        return slack[0]

    def validate(self) -> "NetworkModel":
        """Check the structural invariants the solver relies on."""
        self.slack_bus()
        if not is_connected(self.n_bus, self._edges()):
            raise ValueError(f"{self.name}: in-service network is not connected")
        return self

    def _edges(self, skip: int | None = None) -> list[tuple[int, int]]:
        return [
            (br.from_bus, br.to_bus)
            for k, br in enumerate(self.branches)
            if br.status and k != skip
        ]


# ---------------------------------------------------------------------------
# admittance


def compute_admittance(r: float, x: float, bc: float, tap: float = 1.0,
                       shift: float = 0.0) -> tuple[float, ...]:
    """Branch admittance coefficients of the pi model.

    Returns ``(g_ii, b_ii, g_ij, b_ij, g_ji, b_ji, g_jj, b_jj)``: real and
    imaginary parts of ``Y_ff, Y_ft, Y_tf, Y_tt`` with the series element,
    line charging ``bc`` split between ends, and a phase-shifting
    transformer of ratio ``tap`` and angle ``shift`` (radians) at the
    from end.
    """
    if x == 0:
        raise DegenerateBranchError("branch reactance is zero")
    if not tap > 0:
        raise DegenerateBranchError("tap ratio must be positive")
    y = 1.0 / complex(r, x)
    half = complex(0.0, bc / 2.0)
    yff = (y + half) / (tap * tap)
    yft = -y / (tap * cmath.exp(complex(0.0, -shift)))
    ytf = -y / (tap * cmath.exp(complex(0.0, shift)))
    ytt = y + half
    return (yff.real, yff.imag, yft.real, yft.imag,
            ytf.real, ytf.imag, ytt.real, ytt.imag)


# ---------------------------------------------------------------------------
# MATPOWER parsing

_REQUIRED = ("bus", "gen", "branch", "gencost")
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
_NUMBER = {"inf": math.inf, "+inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def _to_float(tok: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        low = tok.lower()
        if low in _NUMBER:
            return _NUMBER[low]
        raise CaseParseError(f"cannot read number {tok!r}", line) from None


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _scan(text: str) -> tuple[str, dict[str, str], dict[str, tuple[list[list[float]], int]]]:
    name = "case"
    scalars: dict[str, str] = {}
    matrices: dict[str, tuple[list[list[float]], int]] = {}
    assign = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
    func = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        m = func.match(raw)
        if m:
            name = m.group(1)
        m = assign.match(raw)
        if not m:
            i += 1
            continue
        key, rhs = m.group(1), m.group(2).strip()
        if not rhs.startswith("["):
            scalars[key] = rhs.rstrip(";").strip()
            i += 1
            continue
        start = i + 1
        rows: list[list[float]] = []
        width = None
        body = rhs[1:]
        lineno = i + 1
        while True:
            end = body.find("]")
            chunk = body if end < 0 else body[:end]
            for piece in chunk.split(";"):
                toks = piece.replace(",", " ").split()
                if not toks:
                    continue
                row = [_to_float(t, lineno) for t in toks]
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise CaseParseError(
                        f"mpc.{key}: row has {len(row)} columns, expected {width}", lineno)
                rows.append(row)
            if end >= 0:
                break
            i += 1
            if i >= len(lines):
                raise CaseParseError(f"mpc.{key}: unterminated matrix", start)
            body = _strip_comment(lines[i])
            lineno = i + 1
        matrices[key] = (rows, start)
        i += 1
    return name, scalars, matrices


def parse_matpower(text: str) -> NetworkModel:
    """Parse MATPOWER case text into a per-unit :class:`NetworkModel`.

    Only literal numeric matrices are understood. Extra columns are ignored;
    out-of-service generators and branches are kept with ``status=False``.
    """
    name, scalars, matrices = _scan(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("missing mpc.baseMVA")
    base = _to_float(scalars["baseMVA"], 0)
    if not base > 0:
        raise CaseParseError("mpc.baseMVA must be positive")
    for key in _REQUIRED:
        if key not in matrices:
            raise CaseParseError(f"missing required matrix mpc.{key}")
        rows, line = matrices[key]
        if rows and len(rows[0]) < _MIN_COLS[key]:
            raise CaseParseError(
                f"mpc.{key}: need at least {_MIN_COLS[key]} columns, got {len(rows[0])}", line)

    bus_rows, bus_line = matrices["bus"]
    index: dict[int, int] = {}
    buses = []
    for k, row in enumerate(bus_rows):
        bid = int(row[0])
        btype = int(row[1])
        if btype == 4:
            raise UnsupportedFeatureError(f"bus {bid}: isolated bus type 4", bus_line + k)
        if bid in index:
            raise CaseParseError(f"duplicate bus number {bid}", bus_line + k)
        index[bid] = k
        buses.append(Bus(
            id=bid, btype=BusType(btype),
            pd=row[2] / base, qd=row[3] / base,
            gs=row[4] / base, bs=row[5] / base,
            vmin2=row[12] * row[12], vmax2=row[11] * row[11],
        ))

    def bus_index(num: float, what: str, line: int) -> int:
        try:
            return index[int(num)]
        except KeyError:
            raise CaseParseError(f"{what} references unknown bus {int(num)}", line) from None

    gen_rows, gen_line = matrices["gen"]
    cost_rows, cost_line = matrices["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseParseError("mpc.gencost has fewer rows than mpc.gen", cost_line)
    gens = []
    for k, row in enumerate(gen_rows):
        cost = _parse_cost(cost_rows[k], base, cost_line + k)
        gens.append(Generator(
            bus=bus_index(row[0], "generator", gen_line + k),
            pmin=row[9] / base, pmax=row[8] / base,
            qmin=row[4] / base, qmax=row[3] / base,
            cost=cost, status=row[7] > 0,
        ))

    br_rows, br_line = matrices["branch"]
    branches = []
    for k, row in enumerate(br_rows):
        ratio = row[8]
        try:
            branches.append(Branch(
                from_bus=bus_index(row[0], "branch", br_line + k),
                to_bus=bus_index(row[1], "branch", br_line + k),
                r=row[2], x=row[3], bc=row[4],
                tap=ratio if ratio != 0 else 1.0,
                shift=math.radians(row[9]),
                rate=row[5] / base,
                status=row[10] > 0,
            ))
        except (DegenerateBranchError, ValueError) as exc:
            raise CaseParseError(str(exc), br_line + k) from None
    return NetworkModel(base_mva=base, buses=tuple(buses), generators=tuple(gens),
                        branches=tuple(branches), name=name)


def _parse_cost(row: Sequence[float], base: float, line: int) -> tuple[float, float, float]:
    model = int(row[0])
    if model == 1:
        raise UnsupportedFeatureError("piecewise-linear generator cost (MODEL=1)", line)
    if model != 2:
        raise CaseParseError(f"unknown cost model {model}", line)
    n = int(row[3])
    if n > 3:
        raise UnsupportedFeatureError(f"polynomial cost of order {n - 1} (NCOST > 3)", line)
    coeffs = list(row[4:4 + n])
    if len(coeffs) != n:
        raise CaseParseError("gencost row shorter than NCOST", line)
    coeffs = [0.0] * (3 - n) + coeffs
    c2, c1, c0 = coeffs
    return (c2 * base * base, c1 * base, c0)


def load_case(path: str | Path) -> NetworkModel:
    """Load a case by file path, or by bundled name such as ``"case9"``."""
    p = Path(path)
    if not p.exists():
        bundled = DATA_DIR / (p.name if p.suffix == ".m" else p.name + ".m")
        if p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"case file not found: {path}")
    return parse_matpower(p.read_text())


# ---------------------------------------------------------------------------
# canonical writer


def _invert(target: float, forward: Callable[[float], float], guess: float) -> float:
    """Find a float ``t`` near ``guess`` with ``forward(t) == target`` exactly."""
    if not math.isfinite(guess) or forward(guess) == target:
        return guess
    lo = hi = guess
    for _ in range(64):
        lo = math.nextafter(lo, -math.inf)
        if forward(lo) == target:
            return lo
        hi = math.nextafter(hi, math.inf)
        if forward(hi) == target:
            return hi
    return guess


def write_matpower(net: NetworkModel) -> str:
    """Serialize ``net`` as canonical MATPOWER text.

    Values are chosen so that :func:`parse_matpower` reproduces every field
    bit for bit.
    """
    base = net.base_mva

    def unscale(v: float) -> str:
        return repr(_invert(v, lambda t: t / base, v * base))

    def vmag(v2: float) -> str:
        return repr(_invert(v2, lambda t: t * t, math.sqrt(v2)))

    lines = [f"function mpc = {net.name}", "mpc.version = '2';",
             f"mpc.baseMVA = {base!r};", "", "mpc.bus = ["]
    for b in net.buses:
        lines.append("\t" + "\t".join([
            str(b.id), str(b.btype.value), unscale(b.pd), unscale(b.qd),
            unscale(b.gs), unscale(b.bs), "1", "1", "0", "0", "1",
            vmag(b.vmax2), vmag(b.vmin2)]) + ";")
    lines += ["];", "", "mpc.gen = ["]
    for g in net.generators:
        lines.append("\t" + "\t".join([
            str(net.buses[g.bus].id), "0", "0", unscale(g.qmax), unscale(g.qmin),
            "1", repr(base), "1" if g.status else "0",
            unscale(g.pmax), unscale(g.pmin)]) + ";")
    lines += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        shift = _invert(br.shift, math.radians, math.degrees(br.shift))
        lines.append("\t" + "\t".join([
            str(net.buses[br.from_bus].id), str(net.buses[br.to_bus].id),
            repr(br.r), repr(br.x), repr(br.bc), unscale(br.rate), "0", "0",
            repr(br.tap), repr(shift), "1" if br.status else "0"]) + ";")
    lines += ["];", "", "mpc.gencost = ["]
    for g in net.generators:
        c2, c1, c0 = g.cost
        lines.append("\t" + "\t".join([
            "2", "0", "0", "3",
            repr(_invert(c2, lambda t: t * base * base, c2 / (base * base))),
            repr(_invert(c1, lambda t: t * base, c1 / base)),
            repr(c0)]) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# connectivity


def is_connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    """Breadth-first connectivity test over ``n`` nodes."""
    if n == 0:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = [False] * n
    seen[0] = True
    queue = deque([0])
    count = 1
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                queue.append(v)
    return count == n


def non_bridging_lines(net: NetworkModel) -> list[int]:
    """In-service branches whose removal leaves the network connected."""
    return [k for k in net.in_service_branches()
            if is_connected(net.n_bus, net._edges(skip=k))]


# ---------------------------------------------------------------------------
# scenarios


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator used for every scenario draw."""
    return np.random.Generator(np.random.PCG64(seed))


class ScenarioKind(str, Enum):
    DEFAULT = "default"
    LOAD_PERTURB = "load_perturb"
    GEN_OUTAGE = "gen_outage"
    LINE_OUTAGE = "line_outage"


@dataclass(frozen=True)
class Scenario:
    base: NetworkModel = field(repr=False)
    kind: ScenarioKind = ScenarioKind.DEFAULT
    load_scale: tuple[float, ...] | None = None
    removed_gen: int | None = None
    removed_line: int | None = None
    seed: int | None = None

    @property
    def label(self) -> str:
        if self.kind is ScenarioKind.LOAD_PERTURB:
            return f"loads-s{self.seed}"
        if self.kind is ScenarioKind.GEN_OUTAGE:
            return f"gen{self.removed_gen}"
        if self.kind is ScenarioKind.LINE_OUTAGE:
            return f"line{self.removed_line}"
        return "default"

    def apply(self) -> NetworkModel:
        net = self.base
        buses = net.buses
        if self.load_scale is not None:
            buses = tuple(
                dataclasses.replace(b, pd=b.pd * f, qd=b.qd * f)
                for b, f in zip(net.buses, self.load_scale))
        gens = net.generators
        if self.removed_gen is not None:
            gens = tuple(dataclasses.replace(g, status=False) if k == self.removed_gen else g
                         for k, g in enumerate(gens))
        branches = net.branches
        if self.removed_line is not None:
            branches = tuple(dataclasses.replace(b, status=False) if k == self.removed_line else b
                             for k, b in enumerate(branches))
        return NetworkModel(net.base_mva, buses, gens, branches,
                            name=f"{net.name}:{self.label}")

    def to_json(self) -> str:
        return json.dumps({
            "case": self.base.name,
            "kind": self.kind.value,
            "seed": self.seed,
            "factors": list(self.load_scale) if self.load_scale is not None else None,
            "removed_gen": self.removed_gen,
            "removed_line": self.removed_line,
        })

    @classmethod
    def from_json(cls, text: str, base: NetworkModel) -> "Scenario":
        d = json.loads(text)
        factors = d.get("factors")
        return cls(base=base, kind=ScenarioKind(d["kind"]),
                   load_scale=tuple(factors) if factors is not None else None,
                   removed_gen=d.get("removed_gen"), removed_line=d.get("removed_line"),
                   seed=d.get("seed"))


def perturb_loads(net: NetworkModel, seed: int, spread: float = 0.1) -> Scenario:
    """Scale every bus load by an independent uniform factor in ``1 ± spread``."""
    rng = make_rng(seed)
    factors = rng.uniform(1.0 - spread, 1.0 + spread, size=net.n_bus)
    return Scenario(base=net, kind=ScenarioKind.LOAD_PERTURB,
                    load_scale=tuple(float(f) for f in factors), seed=seed)


def enumerate_gen_outages(net: NetworkModel) -> list[Scenario]:
    return [Scenario(base=net, kind=ScenarioKind.GEN_OUTAGE, removed_gen=k)
            for k in net.in_service_generators()]


def sample_line_outages(net: NetworkModel, count: int, seed: int) -> list[Scenario]:
    """Sample ``count`` distinct single-line outages that keep the grid connected."""
    candidates = non_bridging_lines(net)
    if count > len(candidates):
        raise ScenarioError(
            f"requested {count} line outages but only {len(candidates)} lines can be "
            f"removed without islanding (short by {count - len(candidates)})")
    rng = make_rng(seed)
    picks = rng.choice(len(candidates), size=count, replace=False)
    return [Scenario(base=net, kind=ScenarioKind.LINE_OUTAGE,
                     removed_line=candidates[int(p)], seed=seed) for p in picks]
