"""Convert native OPFData JSON records into the scenario schema.

Expected record layout (one grid per file)::

    grid.context                      [[[base_mva]]]
    grid.nodes.bus                    [base_kv, type, v_min, v_max]      type 1 PQ, 2 PV, 3 ref
    grid.nodes.generator              [mbase, pg, p_min, p_max, qg, q_min, q_max, vg, c2, c1, c0]
    grid.nodes.load                   [p_d, q_d]
    grid.nodes.shunt                  [b_s, g_s]
    grid.edges.ac_line.features       [ang_min, ang_max, b_fr, b_to, r, x, rate_a, rate_b, rate_c]
    grid.edges.transformer.features   [ang_min, ang_max, r, x, rate_a, rate_b, rate_c, tap, shift, b_fr, b_to]
    grid.edges.{generator,load,shunt}_link   senders = element, receivers = bus
    solution.nodes.bus                [va, vm]
    solution.nodes.generator          [pg, qg]
    solution.edges.{ac_line,transformer}.features   [p_to, q_to, p_fr, q_fr]

Shunts become fixed bus admittances. Unknown keys are ignored with a warning.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .acphysics import OperatingPoint
from .network import CaseParseError, network_from_dict

logger = logging.getLogger(__name__)

_KNOWN_NODES = {"bus", "generator", "load", "shunt"}
_KNOWN_EDGES = {"ac_line", "transformer", "generator_link", "load_link", "shunt_link"}
_BUS_KIND = {1: "pq", 2: "pv", 3: "slack"}


def _get(doc, *path, at=""):
    cur = doc
    for key in path:
        if not isinstance(cur, dict) or key not in cur:
            where = ".".join(((at,) if at else ()) + path)
            raise CaseParseError(f"OPFData record: missing {where}")
        cur = cur[key]
    return cur


def _links(edges: dict, name: str):
    if name not in edges:
        return [], []
    return list(_get(edges, name, "senders", at="grid.edges")), list(_get(edges, name, "receivers", at="grid.edges"))


def _rating(x: float) -> float:
    return x if x > 0 else 99.0


def convert_record(record: dict):
    """OPFData record -> (scenario dict, OperatingPoint or None)."""
    grid = _get(record, "grid")
    nodes, edges = _get(grid, "nodes", at="grid"), _get(grid, "edges", at="grid")
    for key in set(nodes) - _KNOWN_NODES:
        logger.warning("ignoring unknown node type %r", key)
    for key in set(edges) - _KNOWN_EDGES:
        logger.warning("ignoring unknown edge type %r", key)
    for key in set(record) - {"grid", "solution", "metadata"}:
        logger.warning("ignoring unknown field %r", key)
    base_mva = float(np.asarray(grid.get("context", [[[100.0]]])).reshape(-1)[0])

    shunt_g, shunt_b = {}, {}
    s_src, s_dst = _links(edges, "shunt_link")
    for sh, bus in zip(s_src, s_dst):
        b_s, g_s = nodes["shunt"][sh][:2]
        shunt_g[bus] = shunt_g.get(bus, 0.0) + float(g_s)
        shunt_b[bus] = shunt_b.get(bus, 0.0) + float(b_s)

    buses = []
    for k, row in enumerate(_get(nodes, "bus", at="grid.nodes")):
        kind = _BUS_KIND.get(int(row[1]))
        if kind is None:
            raise CaseParseError(f"OPFData bus {k}: unsupported type {row[1]}")
        buses.append({"id": k, "v_min": float(row[2]), "v_max": float(row[3]), "kind": kind,
                      "shunt_g": shunt_g.get(k, 0.0), "shunt_b": shunt_b.get(k, 0.0)})

    branches = []
    for kind in ("ac_line", "transformer"):
        if kind not in edges:
            continue
        src, dst = _links(edges, kind)
        for f, t, row in zip(src, dst, _get(edges, kind, "features", at="grid.edges")):
            if kind == "ac_line":
                amin, amax, b_fr, b_to, r, x, rate = row[:7]
                tap, shift = 1.0, 0.0
            else:
                amin, amax, r, x, rate, _, _, tap, shift, b_fr, b_to = row[:11]
            branches.append({"id": len(branches), "from": int(f), "to": int(t), "r": float(r), "x": float(x),
                             "b_charge": float(b_fr) + float(b_to), "tap": float(tap) or 1.0,
                             "shift": float(shift), "s_max": _rating(float(rate)),
                             "theta_min": max(float(amin), -math.pi), "theta_max": min(float(amax), math.pi),
                             "kind": kind})

    g_src, g_dst = _links(edges, "generator_link")
    gen_bus = dict(zip(g_src, g_dst))
    gens = []
    for k, row in enumerate(_get(nodes, "generator", at="grid.nodes")):
        gens.append({"id": k, "bus": int(gen_bus[k]), "p_min": float(row[2]), "p_max": float(row[3]),
                     "q_min": float(row[5]), "q_max": float(row[6]),
                     "cost": [float(row[8]), float(row[9]), float(row[10])]})

    l_src, l_dst = _links(edges, "load_link")
    load_rows = nodes.get("load", [])
    loads = [{"bus": int(bus), "p_d": float(load_rows[ld][0]), "q_d": float(load_rows[ld][1])}
             for ld, bus in zip(l_src, l_dst)]

    doc = {"base_mva": base_mva, "buses": buses, "branches": branches, "generators": gens, "loads": loads}
    labels = None
    sol = record.get("solution")
    if sol:
        bus_sol = np.asarray(_get(sol, "nodes", "bus", at="solution"), dtype=float)
        gen_sol = np.asarray(_get(sol, "nodes", "generator", at="solution"), dtype=float)
        flows = []
        for kind in ("ac_line", "transformer"):
            if kind in edges:
                rows = np.asarray(_get(sol, "edges", kind, "features", at="solution"), dtype=float).reshape(-1, 4)
                flows.append(np.hypot(rows[:, 2], rows[:, 3]))
        labels = OperatingPoint(p_g=gen_sol[:, 0], q_g=gen_sol[:, 1], v=bus_sol[:, 1], theta=bus_sol[:, 0],
                                s_branch=np.concatenate(flows) if flows else np.zeros(0))
    return doc, labels


def import_record(record: dict):
    """OPFData record -> validated ``(Network, labels)``."""
    doc, labels = convert_record(record)
    net = network_from_dict(doc)
    if labels is not None:
        labels.check(net)
    return net, labels
