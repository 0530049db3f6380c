"""Per-unit grid model, admittance assembly and scenario-file ingestion."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Any, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class CaseParseError(ValueError):
    """Scenario document does not follow the schema."""


class NetworkValidationError(ValueError):
    """Scenario parsed but describes an invalid network."""


class ContingencyRejected(ValueError):
    """An element removal would leave an unusable network."""


class BusKind(str, enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class BranchKind(str, enum.Enum):
    AC_LINE = "ac_line"
    TRANSFORMER = "transformer"


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    kind: BusKind
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    s_max: float = 99.0
    theta_min: float = -math.pi
    theta_max: float = math.pi
    kind: BranchKind = BranchKind.AC_LINE

    @property
    def g(self) -> float:
        return self.r / (self.r**2 + self.x**2)

    @property
    def b(self) -> float:
        return -self.x / (self.r**2 + self.x**2)


@dataclass(frozen=True)
class CostCurve:
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def __call__(self, p):
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: CostCurve = field(default_factory=CostCurve)


@dataclass(frozen=True)
class Load:
    bus: int
    p_d: float
    q_d: float = 0.0


@dataclass(frozen=True)
class Network:
    """Immutable per-unit network.

    Element order in each tuple defines the array index used everywhere else
    (bus ``k`` is row ``k`` of the admittance matrix, generator ``k`` is entry
    ``k`` of ``p_g``, and so on). Element ``id`` values are stable labels that
    survive reordering and contingency removal.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0

    def __post_init__(self):
        validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def shunts(self) -> list[tuple[int, float, float]]:
        return [(b.id, b.shunt_g, b.shunt_b) for b in self.buses if b.shunt_g or b.shunt_b]

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @cached_property
    def f_idx(self) -> np.ndarray:
        return np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=np.int64)

    @cached_property
    def t_idx(self) -> np.ndarray:
        return np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=np.int64)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=np.int64)

    @cached_property
    def load_bus(self) -> np.ndarray:
        return np.array([self.bus_index[ld.bus] for ld in self.loads], dtype=np.int64)

    @cached_property
    def p_d(self) -> np.ndarray:
        """Aggregated active demand per bus."""
        out = np.zeros(self.n_bus)
        np.add.at(out, self.load_bus, [ld.p_d for ld in self.loads])
        return out

    @cached_property
    def q_d(self) -> np.ndarray:
        out = np.zeros(self.n_bus)
        np.add.at(out, self.load_bus, [ld.q_d for ld in self.loads])
        return out

    def branch_array(self, name: str) -> np.ndarray:
        return np.array([getattr(br, name) for br in self.branches], dtype=float)

    def gen_array(self, name: str) -> np.ndarray:
        return np.array([getattr(g, name) for g in self.generators], dtype=float)

    def bus_array(self, name: str) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.buses], dtype=float)

    @cached_property
    def cost_coeffs(self) -> np.ndarray:
        """(n_gen, 3) array of [c2, c1, c0]."""
        return np.array([[g.cost.c2, g.cost.c1, g.cost.c0] for g in self.generators]).reshape(-1, 3)

    def generation_cost(self, p_g) -> float:
        c = self.cost_coeffs
        p_g = np.asarray(p_g, dtype=float)
        return float(np.sum(c[:, 0] * p_g**2 + c[:, 1] * p_g + c[:, 2]))

    def branch_position(self, branch_id: int) -> int:
        for k, br in enumerate(self.branches):
            if br.id == branch_id:
                return k
        raise KeyError(f"no branch with id {branch_id}")

    def generator_position(self, gen_id: int) -> int:
        for k, g in enumerate(self.generators):
            if g.id == gen_id:
                return k
        raise KeyError(f"no generator with id {gen_id}")


def _connected(n_bus: int, f: np.ndarray, t: np.ndarray) -> bool:
    if n_bus <= 1:
        return True
    adj = coo_matrix((np.ones(len(f)), (f, t)), shape=(n_bus, n_bus))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def validate(net: Network) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise NetworkValidationError("duplicate bus ids")
    if len({g.id for g in net.generators}) != net.n_gen:
        raise NetworkValidationError("duplicate generator ids")
    if len({br.id for br in net.branches}) != net.n_branch:
        raise NetworkValidationError("duplicate branch ids")
    known = set(ids)
    for b in net.buses:
        if not (0 < b.v_min <= b.v_max):
            raise NetworkValidationError(f"bus {b.id}: need 0 < v_min <= v_max")
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise NetworkValidationError(f"branch {br.id} references unknown bus {end}")
        if br.x == 0:
            raise NetworkValidationError(f"branch {br.id}: zero reactance")
        if br.s_max <= 0 or br.tap <= 0:
            raise NetworkValidationError(f"branch {br.id}: s_max and tap must be positive")
        if br.kind is BranchKind.AC_LINE and (br.tap != 1.0 or br.shift != 0.0):
            raise NetworkValidationError(f"branch {br.id}: ac_line must have tap=1, shift=0")
    for g in net.generators:
        if g.bus not in known:
            raise NetworkValidationError(f"generator {g.id} references unknown bus {g.bus}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise NetworkValidationError(f"generator {g.id}: inverted bounds")
        if g.cost.c2 < 0:
            raise NetworkValidationError(f"generator {g.id}: nonconvex cost (c2 < 0)")
    for ld in net.loads:
        if ld.bus not in known:
            raise NetworkValidationError(f"load references unknown bus {ld.bus}")
    if sum(b.kind is BusKind.SLACK for b in net.buses) != 1:
        raise NetworkValidationError("exactly one slack bus required")
    index = {bid: k for k, bid in enumerate(ids)}
    f = np.array([index[br.from_bus] for br in net.branches], dtype=np.int64)
    t = np.array([index[br.to_bus] for br in net.branches], dtype=np.int64)
    if not _connected(len(ids), f, t):
        raise NetworkValidationError("network graph is disconnected")


# ---------------------------------------------------------------------------
# JSON schema


def _field(obj: dict, key: str, where: str, kind=float, default: Any = ...):
    if key not in obj:
        if default is ...:
            raise CaseParseError(f"{where}: missing field '{key}'")
        return default
    value = obj[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CaseParseError(f"{where}: field '{key}' must be a number, got {type(value).__name__}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise CaseParseError(f"{where}: field '{key}' must be an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise CaseParseError(f"{where}: field '{key}' must be a string")
        return value
    return value


def _list(doc: dict, key: str, required=True) -> list:
    if key not in doc:
        if required:
            raise CaseParseError(f"missing field '{key}'")
        return []
    if not isinstance(doc[key], list):
        raise CaseParseError(f"field '{key}' must be a list")
    return doc[key]


def network_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise CaseParseError("scenario document must be a JSON object")
    base = _field(doc, "base_mva", "document", default=100.0)
    buses = []
    for k, b in enumerate(_list(doc, "buses")):
        where = f"buses[{k}]"
        kind = _field(b, "kind", where, str)
        try:
            kind = BusKind(kind)
        except ValueError:
            raise CaseParseError(f"{where}: unknown bus kind {kind!r}") from None
        buses.append(Bus(
            id=_field(b, "id", where, int),
            v_min=_field(b, "v_min", where),
            v_max=_field(b, "v_max", where),
            kind=kind,
            shunt_g=_field(b, "shunt_g", where, default=0.0),
            shunt_b=_field(b, "shunt_b", where, default=0.0),
        ))
    branches = []
    for k, br in enumerate(_list(doc, "branches", required=False)):
        where = f"branches[{k}]"
        kind = _field(br, "kind", where, str, default="ac_line")
        try:
            kind = BranchKind(kind)
        except ValueError:
            raise CaseParseError(f"{where}: unknown branch kind {kind!r}") from None
        branches.append(Branch(
            id=_field(br, "id", where, int, default=k),
            from_bus=_field(br, "from", where, int),
            to_bus=_field(br, "to", where, int),
            r=_field(br, "r", where),
            x=_field(br, "x", where),
            b_charge=_field(br, "b_charge", where, default=0.0),
            tap=_field(br, "tap", where, default=1.0),
            shift=_field(br, "shift", where, default=0.0),
            s_max=_field(br, "s_max", where),
            theta_min=_field(br, "theta_min", where, default=-math.pi),
            theta_max=_field(br, "theta_max", where, default=math.pi),
            kind=kind,
        ))
    gens = []
    for k, g in enumerate(_list(doc, "generators", required=False)):
        where = f"generators[{k}]"
        cost = _field(g, "cost", where, list, default=[0.0, 0.0, 0.0])
        if (not isinstance(cost, list) or len(cost) != 3
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in cost)):
            raise CaseParseError(f"{where}: field 'cost' must be [c2, c1, c0]")
        gens.append(Generator(
            id=_field(g, "id", where, int, default=k),
            bus=_field(g, "bus", where, int),
            p_min=_field(g, "p_min", where),
            p_max=_field(g, "p_max", where),
            q_min=_field(g, "q_min", where),
            q_max=_field(g, "q_max", where),
            cost=CostCurve(*(float(c) for c in cost)),
        ))
    loads = []
    for k, ld in enumerate(_list(doc, "loads", required=False)):
        where = f"loads[{k}]"
        loads.append(Load(bus=_field(ld, "bus", where, int), p_d=_field(ld, "p_d", where),
                          q_d=_field(ld, "q_d", where, default=0.0)))
    return Network(tuple(buses), tuple(branches), tuple(gens), tuple(loads), base)


def network_to_dict(net: Network) -> dict:
    return {
        "base_mva": net.base_mva,
        "buses": [{"id": b.id, "v_min": b.v_min, "v_max": b.v_max, "kind": b.kind.value,
                   "shunt_g": b.shunt_g, "shunt_b": b.shunt_b} for b in net.buses],
        "branches": [{"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
                      "b_charge": br.b_charge, "tap": br.tap, "shift": br.shift, "s_max": br.s_max,
                      "theta_min": br.theta_min, "theta_max": br.theta_max, "kind": br.kind.value}
                     for br in net.branches],
        "generators": [{"id": g.id, "bus": g.bus, "p_min": g.p_min, "p_max": g.p_max,
                        "q_min": g.q_min, "q_max": g.q_max,
                        "cost": [g.cost.c2, g.cost.c1, g.cost.c0]} for g in net.generators],
        "loads": [{"bus": ld.bus, "p_d": ld.p_d, "q_d": ld.q_d} for ld in net.loads],
    }


def parse_case(json_text: str):
    """Parse one scenario document.

    Returns
    -------
    (Network, OperatingPoint or None)
        The AC labels from ``labels_ac`` come back as an operating point when
        the document carries them.
    """
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"invalid JSON: {exc}") from exc
    net = network_from_dict(doc)
    labels = None
    if doc.get("labels_ac") is not None:
        from .acphysics import OperatingPoint

        labels = OperatingPoint.from_dict(doc["labels_ac"], net)
    return net, labels


def serialize_case(net: Network, labels=None, extra: Optional[dict] = None) -> str:
    doc = network_to_dict(net)
    if labels is not None:
        doc["labels_ac"] = labels.to_dict()
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1)


def load_case(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


def bundled_case(name: str) -> Network:
    """Load one of the fixtures shipped in ``dc2ac/cases`` (e.g. ``"case6ww"``)."""
    text = resources.files("dc2ac").joinpath("cases", f"{name}.json").read_text(encoding="utf-8")
    return parse_case(text)[0]


# ---------------------------------------------------------------------------
# Admittance


@dataclass(frozen=True)
class AdmittanceMatrix:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


def branch_admittances(net: Network):
    """Per-branch pi-model entries (y_ff, y_ft, y_tf, y_tt), complex arrays."""
    r, x = net.branch_array("r"), net.branch_array("x")
    bc = net.branch_array("b_charge")
    tap = net.branch_array("tap") * np.exp(1j * net.branch_array("shift"))
    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_admittance(net: Network) -> AdmittanceMatrix:
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    if net.n_branch:
        f, t = net.f_idx, net.t_idx
        yff, yft, ytf, ytt = branch_admittances(net)
        np.add.at(Y, (f, f), yff)
        np.add.at(Y, (f, t), yft)
        np.add.at(Y, (t, f), ytf)
        np.add.at(Y, (t, t), ytt)
    Y[np.diag_indices(n)] += net.bus_array("shunt_g") + 1j * net.bus_array("shunt_b")
    return AdmittanceMatrix(G=Y.real.copy(), B=Y.imag.copy())


# ---------------------------------------------------------------------------
# Contingencies


def remove_element(net: Network, kind: str, element_id: int) -> Network:
    """Return a copy of ``net`` without one branch or generator.

    ``kind`` is ``"branch"`` or ``"generator"``. Raises ContingencyRejected when
    the result would be disconnected or lack capacity for the demand.
    """
    if kind == "branch":
        pos = net.branch_position(element_id)
        branches = net.branches[:pos] + net.branches[pos + 1:]
        gens = net.generators
    elif kind == "generator":
        pos = net.generator_position(element_id)
        branches = net.branches
        gens = net.generators[:pos] + net.generators[pos + 1:]
    else:
        raise ValueError(f"kind must be 'branch' or 'generator', got {kind!r}")
    index = net.bus_index
    f = np.array([index[br.from_bus] for br in branches], dtype=np.int64)
    t = np.array([index[br.to_bus] for br in branches], dtype=np.int64)
    if not _connected(net.n_bus, f, t):
        raise ContingencyRejected(f"removing {kind} {element_id} disconnects the network")
    if sum(g.p_max for g in gens) < float(net.p_d.sum()):
        raise ContingencyRejected(f"removing {kind} {element_id} leaves insufficient capacity")
    return replace(net, branches=branches, generators=gens)


def scale_loads(net: Network, factors) -> Network:
    factors = np.broadcast_to(np.asarray(factors, dtype=float), (len(net.loads),))
    loads = tuple(Load(ld.bus, ld.p_d * s, ld.q_d * s) for ld, s in zip(net.loads, factors))
    return replace(net, loads=loads)


def permute_buses(net: Network, order) -> Network:
    """Reorder the bus tuple; ``order[k]`` is the old position of new bus ``k``."""
    return replace(net, buses=tuple(net.buses[k] for k in order))
