"""Circuit topologies, parameter grids, PVT corners and node-feature encoding.

A benchmark is a device graph whose nodes carry tunable parameter slots.
The flat parameter vector used everywhere else in the package is the
concatenation of every node's slots in canonical node order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvariantError


@dataclass(frozen=True)
class DeviceKind:
    code: int
    label: str

    def __post_init__(self):
        if not 0 <= self.code <= 7:
            raise InvariantError(f"device kind code {self.code} does not fit in 3 bits")

    def bits(self) -> tuple[int, int, int]:
        return ((self.code >> 2) & 1, (self.code >> 1) & 1, self.code & 1)


NMOS = DeviceKind(1, "NMOS")
PMOS = DeviceKind(2, "PMOS")
CAP = DeviceKind(3, "CAP")
LOAD_CAP = DeviceKind(4, "CLOAD")
RES = DeviceKind(5, "RES")

KINDS = {k.label: k for k in (NMOS, PMOS, CAP, LOAD_CAP, RES)}
TRANSISTOR_KINDS = (NMOS, PMOS)


@dataclass(frozen=True)
class ParamSlot:
    """One tunable parameter on the grid ``lower + k * step``."""

    name: str
    unit: str
    lower: float
    upper: float
    step: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InvariantError(f"slot {self.name}: lower must be < upper")
        if self.step <= 0:
            raise InvariantError(f"slot {self.name}: step must be positive")
        n = (self.upper - self.lower) / self.step
        if abs(n - round(n)) > 1e-6:
            raise InvariantError(
                f"slot {self.name}: range {self.upper - self.lower} is not a multiple of {self.step}"
            )

    @property
    def n_steps(self) -> int:
        return int(round((self.upper - self.lower) / self.step))

    @property
    def midpoint(self) -> float:
        """Grid point nearest the middle of the range (ties toward lower)."""
        return _grid_value(self, (self.n_steps) // 2)


def _grid_value(slot: ParamSlot, k) -> np.ndarray | float:
    # rounding keeps e.g. 0.1 + 3*0.1 from drifting off its decimal grid value
    return np.round(slot.lower + np.asarray(k) * slot.step, 10)


@dataclass(frozen=True)
class DeviceNode:
    name: str
    kind: DeviceKind
    slots: tuple[ParamSlot, ...] = ()
    nets: tuple[str, ...] = ()
    fixed_value: float | None = None  # e.g. load capacitance in pF for zero-slot loads

    def __post_init__(self):
        if self.kind in TRANSISTOR_KINDS and len(self.slots) != 2:
            raise InvariantError(f"transistor {self.name} needs exactly two slots (width, fingers)")
        if self.kind not in TRANSISTOR_KINDS and len(self.slots) > 1:
            raise InvariantError(f"passive {self.name} carries at most one slot")


@dataclass(frozen=True)
class CircuitGraph:
    name: str
    nodes: tuple[DeviceNode, ...]
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        n = len(self.nodes)
        if n == 0:
            raise InvariantError("circuit graph has no nodes")
        names = [d.name for d in self.nodes]
        if len(set(names)) != n:
            raise InvariantError("duplicate device names")
        for i, j in self.edges:
            if i == j:
                raise InvariantError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise InvariantError(f"edge ({i}, {j}) out of range")
        if not _connected(n, self.edges):
            raise InvariantError(f"circuit graph {self.name} is not connected")

    @property
    def slots(self) -> tuple[ParamSlot, ...]:
        return tuple(s for d in self.nodes for s in d.slots)

    @property
    def n_params(self) -> int:
        return len(self.slots)

    @property
    def param_names(self) -> list[str]:
        return [f"{d.name}.{s.name}" for d in self.nodes for s in d.slots]

    def node(self, name: str) -> DeviceNode:
        for d in self.nodes:
            if d.name == name:
                return d
        raise KeyError(name)

    def slot_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.param_names)}

    def edge_array(self) -> np.ndarray:
        """Undirected edges as a sorted (E, 2) integer array."""
        if not self.edges:
            return np.zeros((0, 2), dtype=int)
        return np.array(sorted(self.edges), dtype=int)

    def adjacency(self, self_loops: bool = True) -> np.ndarray:
        n = len(self.nodes)
        adj = np.zeros((n, n), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        if self_loops:
            adj[np.arange(n), np.arange(n)] = True
        return adj

    def lower(self) -> np.ndarray:
        return np.array([s.lower for s in self.slots])

    def upper(self) -> np.ndarray:
        return np.array([s.upper for s in self.slots])

    def step(self) -> np.ndarray:
        return np.array([s.step for s in self.slots])

    def midpoint(self) -> np.ndarray:
        return np.array([s.midpoint for s in self.slots])


def _connected(n: int, edges) -> bool:
    seen = {0}
    stack = [0]
    nbrs: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    while stack:
        u = stack.pop()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


RAILS = ("vdd", "gnd")


def edges_from_nets(nodes: Sequence[DeviceNode], exclude: Iterable[str] = RAILS) -> frozenset:
    """Connect every pair of devices sharing a signal net (supply rails excluded)."""
    exclude = set(exclude)
    by_net: dict[str, list[int]] = {}
    for i, d in enumerate(nodes):
        for net in set(d.nets) - exclude:
            by_net.setdefault(net, []).append(i)
    edges = set()
    for members in by_net.values():
        for a, b in itertools.combinations(sorted(members), 2):
            edges.add((a, b))
    return frozenset(edges)


# --------------------------------------------------------------------------
# PVT corners

PROCESS_CODES = {"T": "typical", "F": "fast", "S": "slow"}


@dataclass(frozen=True)
class PvtCorner:
    process_n: str
    process_p: str
    vdd: float
    temperature: float  # degC

    def __post_init__(self):
        for p in (self.process_n, self.process_p):
            if p not in PROCESS_CODES.values():
                raise InvariantError(f"unknown process flavour {p!r}")

    @property
    def label(self) -> str:
        inv = {v: k for k, v in PROCESS_CODES.items()}
        return f"{inv[self.process_n]}{inv[self.process_p]}_{self.vdd:g}V_{self.temperature:g}C"

    @classmethod
    def from_code(cls, process: str, vdd: float, temperature: float) -> "PvtCorner":
        if len(process) != 2 or any(c not in PROCESS_CODES for c in process):
            raise ConfigError(f"bad process code {process!r}")
        return cls(PROCESS_CODES[process[0]], PROCESS_CODES[process[1]], float(vdd), float(temperature))


NOMINAL_CORNER = PvtCorner("typical", "typical", 1.2, 25.0)

CORNER_PROCESSES = ("SS", "SF", "FS", "FF")
CORNER_VDDS = (1.1, 1.3)
CORNER_TEMPS = (-40.0, 125.0)


def make_corners(processes=CORNER_PROCESSES, vdds=CORNER_VDDS, temps=CORNER_TEMPS) -> tuple[PvtCorner, ...]:
    corners = tuple(
        PvtCorner.from_code(p, v, t) for p, v, t in itertools.product(processes, vdds, temps)
    )
    if len(set(corners)) != len(corners):
        raise InvariantError("duplicate PVT corners")
    return corners


# --------------------------------------------------------------------------
# goal sampling space

AT_LEAST = "at_least"
AT_MOST = "at_most"

SPEC_NAMES = ("gain", "bandwidth", "phase_margin", "current")


@dataclass(frozen=True)
class GoalRange:
    """Sampling range for one specification.

    ``bound`` ranges (phase margin) only give a lower limit; the sampled
    target lies in ``[low, low + bound_span]``.
    """

    spec: str
    low: float
    high: float
    direction: str
    unit: str = ""
    bound: bool = False
    log: bool = False

    def __post_init__(self):
        if self.direction not in (AT_LEAST, AT_MOST):
            raise InvariantError(f"bad direction {self.direction!r}")
        if not self.low < self.high:
            raise InvariantError(f"degenerate goal range for {self.spec}")
        if self.log and self.low <= 0:
            raise InvariantError(f"log-sampled range for {self.spec} must be positive")


PM_BOUND_SPAN = 10.0


def pm_bound(low: float) -> GoalRange:
    return GoalRange("phase_margin", low, low + PM_BOUND_SPAN, AT_LEAST, "deg", bound=True)


@dataclass(frozen=True)
class Benchmark:
    graph: CircuitGraph
    corners: tuple[PvtCorner, ...]
    goal_space: tuple[GoalRange, ...]
    model: str

    @property
    def name(self) -> str:
        return self.graph.name

    @property
    def spec_names(self) -> tuple[str, ...]:
        return tuple(g.spec for g in self.goal_space)

    @property
    def c_load(self) -> float:
        """Fixed load capacitance in pF."""
        for d in self.graph.nodes:
            if d.kind == LOAD_CAP:
                return float(d.fixed_value)
        raise InvariantError(f"{self.name} has no fixed load capacitor")

    def __iter__(self):
        # allows ``graph, corners, space = build_benchmark(name)``
        return iter((self.graph, self.corners, self.goal_space))


def _mos(name, kind, w_lo, w_hi, w_step, nets, f_lo=1, f_hi=16):
    return DeviceNode(
        name,
        kind,
        (ParamSlot("w", "nm", w_lo, w_hi, w_step), ParamSlot("nf", "", f_lo, f_hi, 1)),
        nets,
    )


def _cap(name, lo, hi, step, nets):
    return DeviceNode(name, CAP, (ParamSlot("c", "pF", lo, hi, step),), nets)


def _load(value, nets=("vout", "gnd")):
    return DeviceNode("cl", LOAD_CAP, (), nets, fixed_value=value)


def _graph(name, nodes):
    return CircuitGraph(name, tuple(nodes), edges_from_nets(nodes))


def _single_stage():
    # telescopic cascode, NMOS input pair; pairs share one node
    nodes = [
        _mos("mp1", PMOS, 200, 2000, 10, ("vdd", "vbp", "x1")),  # load current source
        _mos("mp2", PMOS, 200, 2000, 10, ("x1", "vcp", "vout")),  # load cascode
        _mos("mp3", PMOS, 200, 2000, 10, ("vdd", "vbp")),  # bias diode, load side
        _mos("mp4", PMOS, 200, 2000, 10, ("vdd", "vcp")),  # bias diode, cascode gate
        _mos("mn1", NMOS, 2000, 10000, 10, ("vin", "x2", "tail")),  # input pair
        _mos("mn2", NMOS, 2000, 10000, 10, ("x2", "vcn", "vout")),  # input cascode
        _mos("mn3", NMOS, 2000, 10000, 10, ("tail", "vbn", "gnd")),  # tail source
        _load(0.12),
    ]
    goals = (
        GoalRange("gain", 40.0, 45.0, AT_LEAST, "dB"),
        GoalRange("bandwidth", 0.5e6, 1.0e6, AT_LEAST, "Hz"),
        pm_bound(50.0),
        GoalRange("current", 1e-5, 1e-4, AT_MOST, "A", log=True),
    )
    return _graph("single_stage", nodes), goals


def _two_stage():
    nodes = [
        _mos("mp1", PMOS, 1000, 100000, 1000, ("vdd", "x1", "out1")),  # mirror load
        _mos("mp2", PMOS, 1000, 100000, 1000, ("vdd", "out1", "vout")),  # second stage driver
        _mos("mn1", NMOS, 1000, 100000, 1000, ("vin", "out1", "x1", "tail")),  # input pair
        _mos("mn2", NMOS, 1000, 100000, 1000, ("tail", "vbn", "gnd")),  # first stage tail
        _mos("mn3", NMOS, 1000, 100000, 1000, ("vout", "vbn", "gnd")),  # second stage sink
        _mos("mn4", NMOS, 1000, 100000, 1000, ("vbn", "gnd")),  # bias diode
        _cap("c", 0.1, 10.0, 0.1, ("out1", "vout")),
        _load(1.0),
    ]
    goals = (
        GoalRange("gain", 10.0, 20.0, AT_LEAST, "dB"),
        GoalRange("bandwidth", 1e6, 20e6, AT_LEAST, "Hz"),
        pm_bound(60.0),
        GoalRange("current", 1e-3, 1e-2, AT_MOST, "A", log=True),
    )
    return _graph("two_stage", nodes), goals


def _folded_cascode():
    nodes = [
        _mos("mp1", PMOS, 1000, 10000, 200, ("vin", "tail", "fold")),  # PMOS input pair
        _mos("mp2", PMOS, 1000, 10000, 200, ("vdd", "vbp", "tail")),  # tail source
        _mos("mn1", NMOS, 160, 1000, 20, ("fold", "vbn", "gnd")),  # folding sinks
        _mos("mn2", NMOS, 160, 1000, 20, ("fold", "vcn", "vout")),  # NMOS cascode
        _mos("mn3", NMOS, 160, 1000, 20, ("vbn", "gnd")),  # bias diode
        # grid upper bound shifted so the range is a whole number of 0.2 pF steps
        _cap("c", 0.2, 10.0, 0.2, ("vout", "gnd")),
        _load(1.0),
    ]
    goals = (
        GoalRange("gain", 20.0, 30.0, AT_LEAST, "dB"),
        GoalRange("bandwidth", 4e6, 6e6, AT_LEAST, "Hz"),
        pm_bound(85.0),
        GoalRange("current", 1e-4, 1e-3, AT_MOST, "A", log=True),
    )
    return _graph("folded_cascode", nodes), goals


def _nmcf():
    nodes = [
        _mos("mp1", PMOS, 10000, 50000, 1000, ("vin", "tail", "o1")),  # input pair
        _mos("mp2", PMOS, 10000, 50000, 1000, ("vdd", "vbp", "tail")),  # first stage tail
        _mos("mp3", PMOS, 10000, 50000, 1000, ("vdd", "vbp", "o2")),  # second stage load
        _mos("mp4", PMOS, 50000, 250000, 10000, ("vdd", "o2", "vout")),  # output stage
        _mos("mn1", NMOS, 2000, 20000, 1000, ("o1", "gnd")),  # first stage load
        _mos("mn2", NMOS, 2000, 20000, 1000, ("o1", "o2", "gnd")),  # second stage
        _mos("mn3", NMOS, 2000, 20000, 1000, ("vout", "vbn", "gnd")),  # output sink
        _mos("mn4", NMOS, 10000, 50000, 1000, ("o1", "vout", "gnd")),  # feedforward stage
        _cap("c1", 25.0, 50.0, 0.5, ("o1", "vout")),
        _cap("c2", 1.0, 25.0, 0.5, ("o2", "vout")),
        _load(100.0),
    ]
    goals = (
        GoalRange("gain", 40.0, 45.0, AT_LEAST, "dB"),
        GoalRange("bandwidth", 1e6, 2e6, AT_LEAST, "Hz"),
        pm_bound(55.0),
        GoalRange("current", 1e-3, 1e-2, AT_MOST, "A", log=True),
    )
    return _graph("nmcf", nodes), goals


_BUILDERS = {
    "single_stage": _single_stage,
    "two_stage": _two_stage,
    "folded_cascode": _folded_cascode,
    "nmcf": _nmcf,
}

BENCHMARKS = tuple(_BUILDERS)


def build_benchmark(name: str) -> Benchmark:
    if name not in _BUILDERS:
        raise ConfigError(f"unknown benchmark {name!r}; expected one of {', '.join(BENCHMARKS)}")
    graph, goals = _BUILDERS[name]()
    return Benchmark(graph, make_corners(), goals, model=name)


# --------------------------------------------------------------------------
# parameter vectors

def _steps(x: np.ndarray, slots: Sequence[ParamSlot]) -> np.ndarray:
    lo = np.array([s.lower for s in slots])
    st = np.array([s.step for s in slots])
    return (np.asarray(x, dtype=float) - lo) / st


def clamp_to_grid(raw, slots: Sequence[ParamSlot]) -> np.ndarray:
    """Clamp to slot bounds, then snap to the nearest grid point (ties go down)."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != len(slots):
        raise InvariantError(f"expected {len(slots)} values, got {raw.shape[-1]}")
    lo = np.array([s.lower for s in slots])
    hi = np.array([s.upper for s in slots])
    k = _steps(np.clip(raw, lo, hi), slots)
    k = np.ceil(k - 0.5 - 1e-9)
    k = np.clip(k, 0, [s.n_steps for s in slots])
    out = np.empty_like(k)
    for i, s in enumerate(slots):
        out[..., i] = _grid_value(s, k[..., i])
    return out


def grid_index(x, slots: Sequence[ParamSlot]) -> np.ndarray:
    return np.rint(_steps(x, slots)).astype(int)


def from_grid_index(k, slots: Sequence[ParamSlot]) -> np.ndarray:
    k = np.asarray(k)
    out = np.empty(k.shape, dtype=float)
    for i, s in enumerate(slots):
        out[..., i] = _grid_value(s, k[..., i])
    return out


def check_params(graph: CircuitGraph, x) -> np.ndarray:
    """Validate that ``x`` is an in-bounds, on-grid parameter vector for ``graph``."""
    x = np.asarray(x, dtype=float)
    slots = graph.slots
    if x.shape != (len(slots),):
        raise InvariantError(f"{graph.name}: expected {len(slots)} parameters, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvariantError("non-finite parameter value")
    k = _steps(x, slots)
    names = graph.param_names
    for i, s in enumerate(slots):
        if k[i] < -1e-6 or k[i] > s.n_steps + 1e-6:
            raise InvariantError(f"{names[i]}={x[i]} outside [{s.lower}, {s.upper}]")
        if abs(k[i] - round(k[i])) > 1e-6:
            raise InvariantError(f"{names[i]}={x[i]} is off the {s.step} grid")
    return x


def random_params(graph: CircuitGraph, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    slots = graph.slots
    shape = (len(slots),) if size is None else (size, len(slots))
    k = rng.integers(0, [s.n_steps + 1 for s in slots], size=shape)
    return from_grid_index(k, slots)


FEATURE_DIM = 5


def encode_node_features(graph: CircuitGraph, params) -> np.ndarray:
    """Per-node features: 3-bit kind code then two normalized parameter entries.

    Transistors give (width, fingers); single-slot passives give (value, 0);
    fixed devices give (0, 0). Each slot is mapped linearly from its bounds
    onto [0, 1].
    """
    x = check_params(graph, params)
    feats = np.zeros((len(graph.nodes), FEATURE_DIM))
    pos = 0
    for r, d in enumerate(graph.nodes):
        feats[r, :3] = d.kind.bits()
        for c, s in enumerate(d.slots):
            feats[r, 3 + c] = (x[pos] - s.lower) / (s.upper - s.lower)
            pos += 1
    return feats


def feature_matrix(graph: CircuitGraph, params) -> np.ndarray:
    """Vectorised, unchecked form of :func:`encode_node_features` for (B, M) batches."""
    x = np.atleast_2d(np.asarray(params, dtype=float))
    lo, hi = graph.lower(), graph.upper()
    norm = (x - lo) / (hi - lo)
    out = np.zeros((x.shape[0], len(graph.nodes), FEATURE_DIM))
    pos = 0
    for r, d in enumerate(graph.nodes):
        out[:, r, :3] = d.kind.bits()
        for c in range(len(d.slots)):
            out[:, r, 3 + c] = norm[:, pos]
            pos += 1
    return out


# --------------------------------------------------------------------------
# custom circuit files

def load_circuit(path: str | Path) -> Benchmark:
    """Read a circuit-definition YAML document.

    Keys: name, model (optional, defaults to name), nodes[] (name, kind,
    slots[], nets[] / value), edges[] (optional; derived from nets when
    absent), corners (process/vdd/temperature lists), goals (per-spec
    min/max/direction).
    """
    import yaml

    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return circuit_from_dict(doc)


_NODE_KEYS = {"name", "kind", "slots", "nets", "value"}
_SLOT_KEYS = {"name", "unit", "lower", "upper", "step"}
_GOAL_KEYS = {"spec", "min", "max", "direction", "unit", "bound", "log"}


def _reject_unknown(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in {where}")


def circuit_from_dict(doc: dict) -> Benchmark:
    if not isinstance(doc, dict):
        raise ConfigError("circuit document must be a mapping")
    _reject_unknown(doc, {"name", "model", "nodes", "edges", "corners", "goals"}, "circuit")
    try:
        name = doc["name"]
        raw_nodes = doc["nodes"]
        raw_goals = doc["goals"]
    except KeyError as exc:
        raise ConfigError(f"circuit document missing key {exc.args[0]!r}") from None

    nodes = []
    for nd in raw_nodes:
        _reject_unknown(nd, _NODE_KEYS, f"node {nd.get('name')}")
        kind = KINDS.get(nd["kind"])
        if kind is None:
            raise ConfigError(f"unknown device kind {nd['kind']!r}")
        slots = []
        for s in nd.get("slots", []):
            _reject_unknown(s, _SLOT_KEYS, f"slot of {nd['name']}")
            slots.append(ParamSlot(s["name"], s.get("unit", ""), float(s["lower"]), float(s["upper"]), float(s["step"])))
        value = nd.get("value")
        nodes.append(DeviceNode(nd["name"], kind, tuple(slots), tuple(nd.get("nets", ())),
                                None if value is None else float(value)))

    if "edges" in doc:
        index = {d.name: i for i, d in enumerate(nodes)}
        edges = set()
        for a, b in doc["edges"]:
            i, j = index[a] if isinstance(a, str) else a, index[b] if isinstance(b, str) else b
            edges.add((min(i, j), max(i, j)))
        edges = frozenset(edges)
    else:
        edges = edges_from_nets(nodes)
    graph = CircuitGraph(name, tuple(nodes), edges)

    c = doc.get("corners", {})
    _reject_unknown(c, {"process", "vdd", "temperature"}, "corners")
    corners = make_corners(
        tuple(c.get("process", CORNER_PROCESSES)),
        tuple(float(v) for v in c.get("vdd", CORNER_VDDS)),
        tuple(float(t) for t in c.get("temperature", CORNER_TEMPS)),
    )

    goals = []
    for g in raw_goals:
        _reject_unknown(g, _GOAL_KEYS, f"goal {g.get('spec')}")
        if g.get("bound"):
            rng = pm_bound(float(g["min"]))
            goals.append(GoalRange(g["spec"], rng.low, rng.high, g.get("direction", AT_LEAST), g.get("unit", ""), True))
        else:
            goals.append(GoalRange(g["spec"], float(g["min"]), float(g["max"]), g["direction"],
                                   g.get("unit", ""), False, bool(g.get("log", False))))
    return Benchmark(graph, corners, tuple(goals), model=doc.get("model", name))
