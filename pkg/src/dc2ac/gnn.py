"""Topology-aware local-attention GNN that predicts AC corrections to a DC warm start.

Graph layout
------------
Every scenario becomes a heterogeneous graph with bus, generator and load
nodes. Bus-bus edges follow the branches (``ac_line`` / ``transformer``) and
generator/load nodes hang off their bus through ``generator_link`` /
``load_link`` edges. All edges are present in both directions; the DC flow
feature of a directed edge is the DC power moving from its source to its
destination.

A batch is the disjoint union of several graphs with nodes laid out as
``[all buses | all generators | all loads]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .acphysics import OperatingPoint
from .autodiff import Tensor
from .dcopf import DcFeatureSet, DcSolution, extract_dc_features, solve_network, warm_start
from .network import BranchKind, BusKind, Network, build_admittance

NODE_KINDS = ("bus", "generator", "load")
EDGE_TYPES = ("ac_line", "transformer", "generator_link", "load_link")
NODE_WIDTH = {"bus": 11, "generator": 7, "load": 2}
EDGE_WIDTH = {"ac_line": 6, "transformer": 6, "generator_link": 1, "load_link": 1}
QUANTITIES = ("v", "theta", "p_g", "q_g", "s")
HEAD_OUT = 5
CHECKPOINT_FORMAT = "dc2ac-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-scenario encoding


@dataclass
class GraphSample:
    """Everything the model and the loss need about one scenario."""

    net: Network
    dc: DcSolution
    features: DcFeatureSet
    x0: OperatingPoint
    label: Optional[OperatingPoint] = None
    node_x: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)   # type -> (src_kind, src, dst_kind, dst, x, d)
    branch_edge: np.ndarray = None              # per branch: (type index, edge position) of its forward edge
    y_pairs: tuple = ()                         # (I, J, G, B) over nonzero Ybus entries


def _bus_features(net: Network, dc: DcFeatureSet) -> np.ndarray:
    kinds = [b.kind for b in net.buses]
    return np.column_stack([
        net.bus_array("v_min"), net.bus_array("v_max"), net.bus_array("shunt_g"), net.bus_array("shunt_b"),
        net.p_d, net.q_d,
        [k is BusKind.SLACK for k in kinds], [k is BusKind.PV for k in kinds], [k is BusKind.PQ for k in kinds],
        dc.node,
    ]).astype(float)


def make_sample(net: Network, label: Optional[OperatingPoint] = None,
                dc: Optional[DcSolution] = None) -> GraphSample:
    """Solve the DC-OPF (unless given) and build the graph encoding of ``net``."""
    dc = solve_network(net) if dc is None else dc
    feats = extract_dc_features(dc, net)
    x0 = warm_start(dc, net)
    s = GraphSample(net=net, dc=dc, features=feats, x0=x0, label=label)
    s.node_x = {
        "bus": _bus_features(net, feats),
        "generator": np.column_stack([net.gen_array("p_min"), net.gen_array("p_max"), net.gen_array("q_min"),
                                      net.gen_array("q_max"), net.cost_coeffs[:, 0], net.cost_coeffs[:, 1],
                                      dc.p_g_dc]).reshape(-1, NODE_WIDTH["generator"]),
        "load": np.array([[ld.p_d, ld.q_d] for ld in net.loads], dtype=float).reshape(-1, 2),
    }
    geo = np.column_stack([net.branch_array(k) for k in ("r", "x", "b_charge", "tap", "shift", "s_max")])
    geo = geo.reshape(-1, 6)
    f, t, flow = net.f_idx, net.t_idx, dc.f_dc
    branch_edge = np.zeros((net.n_branch, 2), dtype=np.int64)
    for ti, kind in enumerate((BranchKind.AC_LINE, BranchKind.TRANSFORMER)):
        sel = np.array([br.kind is kind for br in net.branches], dtype=bool)
        k = np.flatnonzero(sel)
        m = len(k)
        s.edges[kind.value] = ("bus", np.concatenate([f[k], t[k]]), "bus", np.concatenate([t[k], f[k]]),
                               np.vstack([geo[k], geo[k]]), np.concatenate([flow[k], -flow[k]])[:, None])
        branch_edge[k, 0] = ti
        branch_edge[k, 1] = np.arange(m)
    gidx = np.arange(net.n_gen)
    ones = np.ones((2 * net.n_gen, 1))
    s.edges["generator_link"] = ("mixed", np.concatenate([gidx, net.gen_bus]), "mixed",
                                 np.concatenate([net.gen_bus, gidx]), ones,
                                 np.concatenate([dc.p_g_dc, -dc.p_g_dc])[:, None])
    lidx = np.arange(len(net.loads))
    pd = np.array([ld.p_d for ld in net.loads], dtype=float)
    s.edges["load_link"] = ("mixed", np.concatenate([net.load_bus, lidx]), "mixed",
                            np.concatenate([lidx, net.load_bus]), np.ones((2 * len(lidx), 1)),
                            np.concatenate([pd, -pd])[:, None])
    s.branch_edge = branch_edge
    Y = build_admittance(net)
    I, J = np.nonzero((Y.G != 0) | (Y.B != 0))
    s.y_pairs = (I, J, Y.G[I, J], Y.B[I, J])
    return s


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    n_graphs: int
    n_bus: int
    n_gen: int
    n_load: int
    node_x: dict
    edges: dict            # type -> dict(src, dst, x, d)
    bus_graph: np.ndarray
    gen_graph: np.ndarray
    branch_graph: np.ndarray
    gen_bus: np.ndarray    # global bus index per generator
    branch_from: np.ndarray
    branch_to: np.ndarray
    branch_edge: np.ndarray  # row into concat(ac_line, transformer) edge embeddings
    y_dc: np.ndarray       # (n_graphs, |y|)
    theta_mask: np.ndarray  # (n_bus, 1); 0 at slack buses
    x0: dict               # quantity -> (n, 1)
    label: Optional[dict]
    ypairs: tuple
    p_d: np.ndarray
    q_d: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    s_max: np.ndarray
    cost: np.ndarray       # (n_gen, 3)
    label_cost: Optional[np.ndarray]

    @property
    def n_nodes(self) -> int:
        return self.n_bus + self.n_gen + self.n_load


def y_layout(net: Network) -> dict:
    return {"bus": [b.id for b in net.buses], "generator": [g.id for g in net.generators],
            "branch": [br.id for br in net.branches]}


def y_vector(sample: GraphSample, layout: dict) -> np.ndarray:
    """DC solution ``theta || p_g || F`` placed by element id into the reference layout.

    Elements missing from the scenario (e.g. an outaged line) contribute 0.
    """
    net, dc = sample.net, sample.dc
    parts = []
    for key, ids, values in (("bus", [b.id for b in net.buses], dc.theta_dc),
                             ("generator", [g.id for g in net.generators], dc.p_g_dc),
                             ("branch", [br.id for br in net.branches], dc.f_dc)):
        slot = {eid: k for k, eid in enumerate(layout[key])}
        out = np.zeros(len(layout[key]))
        for eid, val in zip(ids, values):
            if eid in slot:
                out[slot[eid]] = val
        parts.append(out)
    return np.concatenate(parts)


def build_batch(samples: list, layout: dict) -> GraphBatch:
    nb = np.cumsum([0] + [s.net.n_bus for s in samples])
    ng = np.cumsum([0] + [s.net.n_gen for s in samples])
    nd = np.cumsum([0] + [len(s.net.loads) for s in samples])
    nl = np.cumsum([0] + [s.net.n_branch for s in samples])
    NB, NG, ND = int(nb[-1]), int(ng[-1]), int(nd[-1])
    off = {"bus": nb, "generator": ng + NB, "load": nd + NB + NG}

    node_x = {k: np.vstack([s.node_x[k] for s in samples]).reshape(-1, NODE_WIDTH[k]) for k in NODE_KINDS}
    edges = {}
    for t in EDGE_TYPES:
        src, dst, xs, ds = [], [], [], []
        for g, s in enumerate(samples):
            _, a, _, b, x, d = s.edges[t]
            if t == "generator_link":
                half = len(a) // 2
                src.append(np.concatenate([a[:half] + off["generator"][g], a[half:] + off["bus"][g]]))
                dst.append(np.concatenate([b[:half] + off["bus"][g], b[half:] + off["generator"][g]]))
            elif t == "load_link":
                half = len(a) // 2
                src.append(np.concatenate([a[:half] + off["bus"][g], a[half:] + off["load"][g]]))
                dst.append(np.concatenate([b[:half] + off["load"][g], b[half:] + off["bus"][g]]))
            else:
                src.append(a + off["bus"][g])
                dst.append(b + off["bus"][g])
            xs.append(x)
            ds.append(d)
        edges[t] = {"src": np.concatenate(src).astype(np.int64), "dst": np.concatenate(dst).astype(np.int64),
                    "x": np.vstack(xs).reshape(-1, EDGE_WIDTH[t]), "d": np.vstack(ds).reshape(-1, 1)}

    # forward branch edges: position in concat(ac_line edges, transformer edges)
    n_ac = len(edges["ac_line"]["src"])
    branch_edge = []
    ac_seen = tr_seen = 0
    for s in samples:
        m_ac = int(np.sum(s.branch_edge[:, 0] == 0))
        m_tr = int(np.sum(s.branch_edge[:, 0] == 1))
        pos = np.where(s.branch_edge[:, 0] == 0, 2 * ac_seen + s.branch_edge[:, 1],
                       n_ac + 2 * tr_seen + s.branch_edge[:, 1])
        branch_edge.append(pos)
        ac_seen += m_ac
        tr_seen += m_tr

    def cat(fn):
        return np.concatenate([np.asarray(fn(s), dtype=float) for s in samples])

    def col(fn):
        return cat(fn)[:, None]

    x0 = {"v": col(lambda s: s.x0.v), "theta": col(lambda s: s.x0.theta), "p_g": col(lambda s: s.x0.p_g),
          "q_g": col(lambda s: s.x0.q_g), "s": col(lambda s: s.x0.s_branch)}
    label = label_cost = None
    if all(s.label is not None for s in samples):
        label = {"v": col(lambda s: s.label.v), "theta": col(lambda s: s.label.theta),
                 "p_g": col(lambda s: s.label.p_g), "q_g": col(lambda s: s.label.q_g),
                 "s": col(lambda s: s.label.s_branch)}
        label_cost = np.array([s.net.generation_cost(s.label.p_g) for s in samples])
    I = np.concatenate([s.y_pairs[0] + nb[g] for g, s in enumerate(samples)])
    J = np.concatenate([s.y_pairs[1] + nb[g] for g, s in enumerate(samples)])
    theta_mask = np.ones((NB, 1))
    theta_mask[[s.net.slack + nb[g] for g, s in enumerate(samples)]] = 0.0
    # the bus-bus edges were stored as [forward..., reverse...] per sample; the
    # branch_edge arithmetic above relies on that per-sample block structure
    return GraphBatch(
        n_graphs=len(samples), n_bus=NB, n_gen=NG, n_load=ND, node_x=node_x, edges=edges,
        bus_graph=np.repeat(np.arange(len(samples)), np.diff(nb)),
        gen_graph=np.repeat(np.arange(len(samples)), np.diff(ng)),
        branch_graph=np.repeat(np.arange(len(samples)), np.diff(nl)),
        gen_bus=np.concatenate([s.net.gen_bus + nb[g] for g, s in enumerate(samples)]).astype(np.int64),
        branch_from=np.concatenate([s.net.f_idx + nb[g] for g, s in enumerate(samples)]).astype(np.int64),
        branch_to=np.concatenate([s.net.t_idx + nb[g] for g, s in enumerate(samples)]).astype(np.int64),
        branch_edge=np.concatenate(branch_edge).astype(np.int64),
        y_dc=np.vstack([y_vector(s, layout) for s in samples]),
        theta_mask=theta_mask, x0=x0, label=label,
        ypairs=(I, J, cat(lambda s: s.y_pairs[2])[:, None], cat(lambda s: s.y_pairs[3])[:, None]),
        p_d=col(lambda s: s.net.p_d), q_d=col(lambda s: s.net.q_d),
        v_min=col(lambda s: s.net.bus_array("v_min")), v_max=col(lambda s: s.net.bus_array("v_max")),
        q_min=col(lambda s: s.net.gen_array("q_min")), q_max=col(lambda s: s.net.gen_array("q_max")),
        s_max=col(lambda s: s.net.branch_array("s_max")),
        cost=np.vstack([s.net.cost_coeffs for s in samples]).reshape(-1, 3),
        label_cost=label_cost,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelConfig:
    d_h: int = 64
    d_k: int = 32
    layers: int = 4
    psi_hidden: int = 16
    head_hidden: int = 64
    mode: str = "residual"          # or "direct"
    layout: dict = field(default_factory=lambda: {"bus": [], "generator": [], "branch": []})
    # input standardization: name -> [mean list, std list]
    norm: dict = field(default_factory=dict)
    # output scaling: quantity -> [offset, scale]; offset used only in direct mode
    out_scale: dict = field(default_factory=dict)

    @property
    def y_width(self) -> int:
        return sum(len(v) for v in self.layout.values())

    @property
    def head_in(self) -> int:
        return 4 * self.d_h + self.y_width + 3


class ModelParams:
    """Ordered collection of named parameter tensors plus the model config."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def values(self) -> list:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        cfg = ModelConfig(**json.loads(json.dumps(asdict(self.config))))
        return ModelParams(cfg, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                 for k, v in self.tensors.items()})


def param_shapes(cfg: ModelConfig) -> dict:
    d, dk, ph, hh = cfg.d_h, cfg.d_k, cfg.psi_hidden, cfg.head_hidden
    shapes = {}

    def mlp(prefix, sizes):
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"{prefix}.W{i}"] = (a, b)
            shapes[f"{prefix}.b{i}"] = (1, b)

    for k in NODE_KINDS:
        mlp(f"enc_node.{k}", [NODE_WIDTH[k], d, d])
    for t in EDGE_TYPES:
        mlp(f"enc_edge.{t}", [EDGE_WIDTH[t] + 1, d, d])
    for layer in range(cfg.layers):
        for t in EDGE_TYPES:
            p = f"layer{layer}.{t}"
            shapes[f"{p}.Wq"] = (d, dk)
            shapes[f"{p}.Wk"] = (2 * d, dk)
            shapes[f"{p}.Wv"] = (2 * d, d)
            mlp(f"{p}.psi_geo", [EDGE_WIDTH[t], ph, 1])
            mlp(f"{p}.psi_dc", [1, ph, 1])
        for k in NODE_KINDS:
            p = f"layer{layer}.{k}"
            shapes[f"{p}.Wh"] = (2 * d, d)
            shapes[f"{p}.bh"] = (1, d)
            shapes[f"{p}.ln_gain"] = (1, d)
            shapes[f"{p}.ln_bias"] = (1, d)
    mlp("head", [cfg.head_in, hh, hh, HEAD_OUT])
    return shapes


def _fan_in(name: str, shapes: dict) -> int:
    if name.endswith(".bh"):
        return shapes[name[:-3] + ".Wh"][0]
    stem, last = name.rsplit(".", 1)
    if last.startswith("b"):
        return shapes[f"{stem}.W{last[1:]}"][0]
    return shapes[name][0]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; layer-norm gain 1, bias 0."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith("ln_gain"):
            data = np.ones(shape)
        elif name.endswith("ln_bias"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward pass


def _normalize(x: np.ndarray, cfg: ModelConfig, key: str) -> np.ndarray:
    if key not in cfg.norm:
        return x
    mean, std = (np.asarray(a, dtype=float) for a in cfg.norm[key])
    return (x - mean) / std


def _mlp(x: Tensor, params: ModelParams, prefix: str, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = ad.add(ad.matmul(x, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def encode(batch: GraphBatch, params: ModelParams):
    """Initial embeddings from raw features concatenated with DC features.

    Returns ``(h, e)`` where ``h`` is the (n_nodes, d_h) node matrix and ``e``
    maps each edge type to its (E_t, d_h) embedding (None for absent types).
    """
    cfg = params.config
    blocks = []
    for k in NODE_KINDS:
        x = batch.node_x[k]
        if x.shape[1] != NODE_WIDTH[k]:
            raise ad.ShapeError(f"{k} features have width {x.shape[1]}, expected {NODE_WIDTH[k]}")
        blocks.append(_mlp(Tensor(_normalize(x, cfg, f"node.{k}")), params, f"enc_node.{k}", 2))
    h = ad.concat(blocks, axis=0)
    e = {}
    for t in EDGE_TYPES:
        ed = batch.edges[t]
        if len(ed["src"]) == 0:
            e[t] = None
            continue
        if ed["x"].shape[1] != EDGE_WIDTH[t]:
            raise ad.ShapeError(f"{t} features have width {ed['x'].shape[1]}, expected {EDGE_WIDTH[t]}")
        inp = np.hstack([_normalize(ed["x"], cfg, f"edge.{t}"), _normalize(ed["d"], cfg, f"dc.{t}")])
        e[t] = _mlp(Tensor(inp), params, f"enc_edge.{t}", 2)
    return h, e


def attention_logits(h: Tensor, e: dict, batch: GraphBatch, params: ModelParams, layer: int):
    """Per-type logits, values and destinations, concatenated across types."""
    cfg = params.config
    logits, values, dsts = [], [], []
    for t in EDGE_TYPES:
        if e[t] is None:
            continue
        ed = batch.edges[t]
        p = f"layer{layer}.{t}"
        hd = ad.take_rows(h, ed["dst"])
        kv_in = ad.concat([ad.take_rows(h, ed["src"]), e[t]], axis=1)
        q = ad.matmul(hd, params[f"{p}.Wq"])
        k = ad.matmul(kv_in, params[f"{p}.Wk"])
        score = ad.scale(ad.sum_(ad.mul(q, k), axis=1), 1.0 / math.sqrt(cfg.d_k))
        geo = _mlp(Tensor(_normalize(ed["x"], cfg, f"edge.{t}")), params, f"{p}.psi_geo", 2)
        dcb = _mlp(Tensor(_normalize(ed["d"], cfg, f"dc.{t}")), params, f"{p}.psi_dc", 2)
        logits.append(ad.add(ad.add(score, geo), dcb))
        values.append(ad.matmul(kv_in, params[f"{p}.Wv"]))
        dsts.append(ed["dst"])
    return logits, values, dsts


def attention_layer(h: Tensor, e: dict, batch: GraphBatch, params: ModelParams, layer: int,
                    return_alpha: bool = False):
    """One round of typed attention message passing followed by the LN update.

    The softmax runs jointly over every incoming edge of a node regardless of
    type. Nodes without neighbors receive a zero message.
    """
    n = batch.n_nodes
    logits, values, dsts = attention_logits(h, e, batch, params, layer)
    if logits:
        dst = np.concatenate(dsts)
        alpha = ad.softmax_over_segments(ad.concat(logits, axis=0), dst, n)
        m = ad.segment_sum(ad.scale_rows(ad.concat(values, axis=0), alpha), dst, n)
    else:
        alpha, dst = None, np.zeros(0, dtype=np.int64)
        m = Tensor(np.zeros((n, params.config.d_h)))
    bounds = np.cumsum([0, batch.n_bus, batch.n_gen, batch.n_load])
    blocks = []
    for k, lo, hi in zip(NODE_KINDS, bounds[:-1], bounds[1:]):
        if hi == lo:
            continue
        rows = np.arange(lo, hi)
        hk, mk = ad.take_rows(h, rows), ad.take_rows(m, rows)
        p = f"layer{layer}.{k}"
        upd = ad.relu(ad.add(ad.matmul(ad.concat([hk, mk], axis=1), params[f"{p}.Wh"]), params[f"{p}.bh"]))
        blocks.append(ad.layer_norm(ad.add(hk, upd), params[f"{p}.ln_gain"], params[f"{p}.ln_bias"]))
    out = ad.concat(blocks, axis=0)
    if return_alpha:
        return out, alpha, dst
    return out


def message_passing(batch: GraphBatch, params: ModelParams):
    h, e = encode(batch, params)
    for layer in range(params.config.layers):
        h = attention_layer(h, e, batch, params, layer)
    return h, e


@dataclass
class ResidualVector:
    """Corrections to the warm start. Arrays (or tensors) of shape (n, 1)."""

    dv: object
    dtheta: object
    dp_g: object
    dq_g: object
    ds: object
    # low-order parts (same field order) when the residual must round-trip exactly
    tail: Optional[tuple] = None


def _head_inputs(h: Tensor, e: dict, batch: GraphBatch, params: ModelParams) -> Tensor:
    cfg = params.config
    d = cfg.d_h
    n_graph = batch.n_graphs
    bus_rows = np.arange(batch.n_bus)
    h_bus = ad.take_rows(h, bus_rows)
    z = ad.mean_over_segments(h_bus, batch.bus_graph, n_graph)
    y = Tensor(_normalize(batch.y_dc, cfg, "y_dc"))
    branch_e = [e[t] for t in ("ac_line", "transformer") if e[t] is not None]

    def rows(a, b, c, graph, kind):
        nr = len(graph)
        onehot = np.zeros((nr, 3))
        onehot[:, kind] = 1.0
        return ad.concat([a, b, c, ad.take_rows(z, graph), ad.take_rows(y, graph), Tensor(onehot)], axis=1)

    zeros = lambda nr: Tensor(np.zeros((nr, d)))  # noqa: E731
    parts = [rows(h_bus, zeros(batch.n_bus), zeros(batch.n_bus), batch.bus_graph, 0)]
    if batch.n_gen:
        gen_nodes = batch.n_bus + np.arange(batch.n_gen)
        parts.append(rows(ad.take_rows(h, batch.gen_bus), ad.take_rows(h, gen_nodes), zeros(batch.n_gen),
                          batch.gen_graph, 1))
    n_br = len(batch.branch_graph)
    if n_br:
        e_br = ad.take_rows(ad.concat(branch_e, axis=0), batch.branch_edge)
        parts.append(rows(ad.take_rows(h, batch.branch_from), ad.take_rows(h, batch.branch_to), e_br,
                          batch.branch_graph, 2))
    return ad.concat(parts, axis=0)


def predict_residuals(h: Tensor, e: dict, batch: GraphBatch, params: ModelParams) -> ResidualVector:
    """Shared MLP head over ``[h_a || h_b || e || pooled || y_dc || kind]`` rows.

    Bus rows yield (dv, dtheta), generator rows (dp_g, dq_g), branch rows d|S|.
    Head outputs are multiplied by per-quantity output scales.
    """
    cfg = params.config
    raw = _mlp(_head_inputs(h, e, batch, params), params, "head", 3)
    nb, ng = batch.n_bus, batch.n_gen
    bus = ad.take_rows(raw, np.arange(nb))
    gen = ad.take_rows(raw, nb + np.arange(ng))
    br = ad.take_rows(raw, nb + ng + np.arange(len(batch.branch_graph)))

    def scaled(x, q):
        return ad.scale(x, cfg.out_scale[q][1]) if q in cfg.out_scale else x

    return ResidualVector(
        dv=scaled(ad.slice_cols(bus, 0, 1), "v"),
        dtheta=ad.mul(scaled(ad.slice_cols(bus, 1, 2), "theta"), Tensor(batch.theta_mask)),
        dp_g=scaled(ad.slice_cols(gen, 2, 3), "p_g"),
        dq_g=scaled(ad.slice_cols(gen, 3, 4), "q_g"),
        ds=scaled(ad.slice_cols(br, 4, 5), "s"),
    )


@dataclass
class Prediction:
    """Reconstructed AC point (tensors of shape (n, 1)) and its offset from x0."""

    v: Tensor
    theta: Tensor
    p_g: Tensor
    q_g: Tensor
    s: Tensor
    delta: ResidualVector

    def quantity(self, q: str) -> Tensor:
        return getattr(self, q)


def forward(batch: GraphBatch, params: ModelParams) -> Prediction:
    h, e = message_passing(batch, params)
    out = predict_residuals(h, e, batch, params)
    x0 = batch.x0
    if params.config.mode == "residual":
        v = ad.add(Tensor(x0["v"]), out.dv)
        th = ad.add(Tensor(x0["theta"]), out.dtheta)
        p = ad.add(Tensor(x0["p_g"]), out.dp_g)
        q = ad.add(Tensor(x0["q_g"]), out.dq_g)
        s = ad.add(Tensor(x0["s"]), out.ds)
        return Prediction(v, th, p, q, s, out)
    # direct mode: head predicts the full solution around a fixed offset
    off = {k: params.config.out_scale.get(k, [0.0, 1.0])[0] for k in QUANTITIES}
    v = ad.add_scalar(out.dv, off["v"])
    th = ad.add(Tensor(off["theta"] * batch.theta_mask), out.dtheta)
    p = ad.add_scalar(out.dp_g, off["p_g"])
    q = ad.add_scalar(out.dq_g, off["q_g"])
    s = ad.add_scalar(out.ds, off["s"])
    delta = ResidualVector(ad.sub(v, Tensor(x0["v"])), ad.sub(th, Tensor(x0["theta"])),
                           ad.sub(p, Tensor(x0["p_g"])), ad.sub(q, Tensor(x0["q_g"])),
                           ad.sub(s, Tensor(x0["s"])))
    return Prediction(v, th, p, q, s, delta)


def _two_sum(a, b):
    """s, e with s = fl(a + b) and s + e == a + b exactly."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def reconstruct(x0: OperatingPoint, delta: ResidualVector) -> OperatingPoint:
    """x_hat = x0 + delta, elementwise, no clamping."""

    def arr(a):
        return np.asarray(a.data if isinstance(a, Tensor) else a, dtype=float).reshape(-1)

    def add(base, k):
        hi = arr(getattr(delta, _DELTA_FIELDS[k]))
        if delta.tail is None:
            return base + hi
        total, err = _two_sum(base, hi)
        # err + lo equals target - total, which is representable, so this rounds to the target
        return total + (err + arr(delta.tail[k]))

    s = None if x0.s_branch is None else add(x0.s_branch, 4)
    return OperatingPoint(p_g=add(x0.p_g, 2), q_g=add(x0.q_g, 3), v=add(x0.v, 0), theta=add(x0.theta, 1),
                          s_branch=s)


_DELTA_FIELDS = ("dv", "dtheta", "dp_g", "dq_g", "ds")
_POINT_FIELDS = ("v", "theta", "p_g", "q_g", "s_branch")


def residual_between(x0: OperatingPoint, target: OperatingPoint) -> ResidualVector:
    """target - x0, carried exactly so that ``reconstruct(x0, .)`` returns ``target`` bit for bit."""
    hi, lo = [], []
    for q in _POINT_FIELDS:
        a, b = getattr(target, q), getattr(x0, q)
        if a is None or b is None:
            hi.append(None)
            lo.append(None)
            continue
        h, e = _two_sum(np.asarray(a, dtype=float), -np.asarray(b, dtype=float))
        hi.append(h)
        lo.append(e)
    return ResidualVector(*hi, tail=tuple(lo))


def split_prediction(pred: Prediction, samples: list) -> list:
    """Per-sample OperatingPoints from a batched prediction."""
    out = []
    ib = ig = il = 0
    for s in samples:
        nb, ng, nl = s.net.n_bus, s.net.n_gen, s.net.n_branch
        out.append(OperatingPoint(p_g=pred.p_g.data[ig:ig + ng, 0].copy(), q_g=pred.q_g.data[ig:ig + ng, 0].copy(),
                                  v=pred.v.data[ib:ib + nb, 0].copy(), theta=pred.theta.data[ib:ib + nb, 0].copy(),
                                  s_branch=pred.s.data[il:il + nl, 0].copy()))
        ib, ig, il = ib + nb, ig + ng, il + nl
    return out


def predict(params: ModelParams, samples: list, batch_size: int = 256) -> list:
    points = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        points.extend(split_prediction(forward(build_batch(chunk, params.config.layout), params), chunk))
    return points


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(params.config),
           "params": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                      for k, t in params.tensors.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a dc2ac checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig(**doc["config"])
    expected = param_shapes(cfg)
    stored = doc["params"]
    if set(stored) != set(expected):
        raise CheckpointError("parameter names do not match the configuration")
    tensors = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != tuple(shape) or len(entry["data"]) != int(np.prod(shape)):
            raise CheckpointError(f"{name}: stored shape {entry['shape']} != expected {list(shape)}")
        tensors[name] = Tensor(np.array(entry["data"], dtype=float).reshape(shape), requires_grad=True, name=name)
    return ModelParams(cfg, tensors)
