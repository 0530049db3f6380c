from collections import deque

import numpy as np
import pytest

from dc2ac import autodiff as ad
from dc2ac import gnn
from dc2ac.acphysics import OperatingPoint, newton_pf
from dc2ac.autodiff import Tape, Tensor
from dc2ac.network import bundled_case, permute_buses, remove_element, scale_loads

SMALL = dict(d_h=8, d_k=4, psi_hidden=4, head_hidden=8)


def _sample(name="case6ww", factor=1.0, label=True):
    net = scale_loads(bundled_case(name), factor)
    s = gnn.make_sample(net)
    if label:
        s.label = newton_pf(net, s.dc.p_g_dc)
    return s


def _model(sample, seed=0, **kw):
    cfg = gnn.ModelConfig(layout=gnn.y_layout(sample.net), **{**SMALL, **kw})
    return gnn.init_params(cfg, seed)


def _zero_head(params):
    for name in params.names():
        if name.startswith("head."):
            params[name].data[...] = 0.0
    return params


def test_graph_mirrors_network():
    s = _sample()
    net = s.net
    b = gnn.build_batch([s], gnn.y_layout(net))
    bus_edges = len(b.edges["ac_line"]["src"]) + len(b.edges["transformer"]["src"])
    assert bus_edges == 2 * net.n_branch
    assert len(b.edges["generator_link"]["src"]) == 2 * net.n_gen
    assert len(b.edges["load_link"]["src"]) == 2 * len(net.loads)
    pairs = {(int(a), int(c)) for a, c in zip(b.edges["ac_line"]["src"], b.edges["ac_line"]["dst"])}
    for f, t in zip(net.f_idx, net.t_idx):
        assert (f, t) in pairs and (t, f) in pairs
    # DC feature on a directed bus edge is the DC flow from source to destination
    fwd = b.edges["ac_line"]["d"][: net.n_branch, 0]
    np.testing.assert_array_equal(fwd, s.dc.f_dc)
    np.testing.assert_array_equal(b.edges["ac_line"]["d"][net.n_branch:, 0], -s.dc.f_dc)
    np.testing.assert_array_equal(b.y_dc[0], s.features.y)


def test_encode_widths_and_zero_inputs():
    s = _sample()
    p = _model(s)
    b = gnn.build_batch([s], p.config.layout)
    h, e = gnn.encode(b, p)
    assert h.shape == (b.n_nodes, p.config.d_h)
    assert all(v.shape[1] == p.config.d_h for v in e.values() if v is not None)
    for k in gnn.NODE_KINDS:
        b.node_x[k] = np.zeros_like(b.node_x[k])
    for name in p.names():
        if name.startswith("enc_node.") and ".b" in name:
            p[name].data[...] = 0.0
    h0, _ = gnn.encode(b, p)
    np.testing.assert_array_equal(h0.data, 0.0)


def test_encode_rejects_wrong_width():
    s = _sample()
    p = _model(s)
    b = gnn.build_batch([s], p.config.layout)
    b.node_x["bus"] = b.node_x["bus"][:, :5]
    with pytest.raises(ad.ShapeError):
        gnn.encode(b, p)


def test_attention_weights_sum_to_one_per_node():
    s = _sample()
    p = _model(s)
    b = gnn.build_batch([s, _sample(factor=0.9)], p.config.layout)
    h, e = gnn.encode(b, p)
    _, alpha, dst = gnn.attention_layer(h, e, b, p, 0, return_alpha=True)
    sums = np.bincount(dst, weights=alpha.data[:, 0], minlength=b.n_nodes)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    # each generator and load node has exactly one neighbour: its bus
    single = np.bincount(dst, minlength=b.n_nodes) == 1
    assert single[b.n_bus:].all()
    np.testing.assert_array_equal(alpha.data[single[dst], 0], 1.0)


def test_identical_neighbours_give_uniform_attention():
    s = _sample()
    p = _model(s)
    b = gnn.build_batch([s], p.config.layout)
    h, e = gnn.encode(b, p)
    const = Tensor(np.tile(h.data[:1], (b.n_nodes, 1)))
    e_const = {t: None if v is None else Tensor(np.tile(v.data[:1], (v.shape[0], 1))) for t, v in e.items()}
    for t in gnn.EDGE_TYPES:
        b.edges[t]["x"] = np.zeros_like(b.edges[t]["x"])
        b.edges[t]["d"] = np.zeros_like(b.edges[t]["d"])
    # only ac_line edges keep the same logits across types when the per-type nets differ,
    # so restrict to a bus whose neighbours are all buses
    _, alpha, dst = gnn.attention_layer(const, e_const, b, p, 0, return_alpha=True)
    deg = np.bincount(dst, minlength=b.n_nodes)
    for i in np.flatnonzero(deg[: b.n_bus] > 0):
        rows = np.flatnonzero(dst == i)
        types = np.concatenate([[t] * len(b.edges[t]["dst"]) for t in gnn.EDGE_TYPES])[rows]
        if set(types) == {"ac_line"}:
            np.testing.assert_allclose(alpha.data[rows, 0], 1.0 / len(rows), atol=1e-15)


def test_isolated_node_gets_zero_message():
    s = _sample()
    p = _model(s)
    b = gnn.build_batch([s], p.config.layout)
    for t in gnn.EDGE_TYPES:
        for key in ("src", "dst"):
            b.edges[t][key] = b.edges[t][key][:0]
        b.edges[t]["x"] = b.edges[t]["x"][:0]
        b.edges[t]["d"] = b.edges[t]["d"][:0]
    h, e = gnn.encode(b, p)
    out = gnn.attention_layer(h, {t: None for t in e}, b, p, 0)
    # with m = 0 the update only sees [h || 0]
    lay = "layer0.bus"
    rows = h.data[: b.n_bus]
    u = np.maximum(np.hstack([rows, np.zeros_like(rows)]) @ p[f"{lay}.Wh"].data + p[f"{lay}.bh"].data, 0)
    z = rows + u
    ref = (z - z.mean(1, keepdims=True)) / np.sqrt(z.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out.data[: b.n_bus], ref, atol=1e-12)


def test_zero_layers_is_identity_pipeline():
    s = _sample()
    p = _model(s, layers=0)
    b = gnn.build_batch([s], p.config.layout)
    h0, _ = gnn.encode(b, p)
    hk, _ = gnn.message_passing(b, p)
    np.testing.assert_array_equal(h0.data, hk.data)


def test_residual_shapes_and_slack_mask():
    s = _sample()
    p = _model(s)
    b = gnn.build_batch([s], p.config.layout)
    h, e = gnn.message_passing(b, p)
    r = gnn.predict_residuals(h, e, b, p)
    net = s.net
    assert r.dv.shape == (net.n_bus, 1) and r.dtheta.shape == (net.n_bus, 1)
    assert r.dp_g.shape == (net.n_gen, 1) and r.dq_g.shape == (net.n_gen, 1)
    assert r.ds.shape == (net.n_branch, 1)
    assert r.dtheta.data[net.slack, 0] == 0.0


def test_wider_y_layout_changes_head_input_only():
    s = _sample()
    p = _model(s)
    wide = dict(p.config.layout)
    wide["branch"] = list(wide["branch"]) + [1000 + k for k in range(len(wide["branch"]))]
    p2 = gnn.init_params(gnn.ModelConfig(layout=wide, **SMALL), 0)
    assert p2["head.W0"].shape[0] == p["head.W0"].shape[0] + len(p.config.layout["branch"])
    pred = gnn.forward(gnn.build_batch([s], wide), p2)
    assert pred.s.shape == (s.net.n_branch, 1) and pred.v.shape == (s.net.n_bus, 1)


def test_zero_head_reproduces_warm_start():
    s = _sample()
    p = _zero_head(_model(s))
    pt = gnn.predict(p, [s])[0]
    for a, b in ((pt.v, s.x0.v), (pt.theta, s.x0.theta), (pt.p_g, s.x0.p_g), (pt.q_g, s.x0.q_g),
                 (pt.s_branch, s.x0.s_branch)):
        np.testing.assert_array_equal(a, b)


def test_reconstruct_identities():
    s = _sample()
    zero = gnn.ResidualVector(*(np.zeros(n) for n in (6, 6, 3, 3, s.net.n_branch)))
    x = gnn.reconstruct(s.x0, zero)
    np.testing.assert_array_equal(x.v, s.x0.v)
    np.testing.assert_array_equal(x.s_branch, s.x0.s_branch)
    back = gnn.reconstruct(s.x0, gnn.residual_between(s.x0, s.label))
    for q in ("v", "theta", "p_g", "q_g", "s_branch"):
        np.testing.assert_array_equal(getattr(back, q), getattr(s.label, q))
    dv = np.zeros(6)
    dv[2] = 0.02
    bumped = gnn.reconstruct(s.x0, gnn.ResidualVector(dv, np.zeros(6), np.zeros(3), np.zeros(3),
                                                      np.zeros(s.net.n_branch)))
    assert bumped.v[2] == pytest.approx(1.02, abs=0)


def test_residual_round_trip_is_exact_across_magnitudes():
    rng = np.random.default_rng(0)
    n = 20000

    def point():
        x = rng.normal(size=n) * 10.0 ** rng.integers(-8, 8, n)
        return OperatingPoint(p_g=x, q_g=-x, v=x * 3, theta=x / 7, s_branch=np.abs(x))

    a, b = point(), point()
    # plain float subtraction does not round-trip here
    assert np.any(a.v + (b.v - a.v) != b.v)
    back = gnn.reconstruct(a, gnn.residual_between(a, b))
    for q in ("v", "theta", "p_g", "q_g", "s_branch"):
        np.testing.assert_array_equal(getattr(back, q), getattr(b, q))


def test_bus_permutation_equivariance():
    s = _sample(label=False)
    p = _model(s, seed=4)
    order = np.array([4, 2, 0, 5, 1, 3])
    sp = gnn.make_sample(permute_buses(s.net, order))
    a = gnn.predict(p, [s])[0]
    b = gnn.predict(p, [sp])[0]
    np.testing.assert_allclose(b.v, a.v[order], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.theta, a.theta[order], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.p_g, a.p_g, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.q_g, a.q_g, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.s_branch, a.s_branch, rtol=0, atol=1e-12)


def hop_distances(batch, start):
    adj = [[] for _ in range(batch.n_nodes)]
    for t in gnn.EDGE_TYPES:
        for a, c in zip(batch.edges[t]["src"], batch.edges[t]["dst"]):
            adj[a].append(c)
    dist = np.full(batch.n_nodes, np.inf)
    dist[start] = 0
    q = deque([start])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if dist[w] == np.inf:
                dist[w] = dist[u] + 1
                q.append(w)
    return dist


def _zero_far_nodes(batch, dist, K):
    bounds = np.cumsum([0, batch.n_bus, batch.n_gen, batch.n_load])
    changed = 0
    for k, lo, hi in zip(gnn.NODE_KINDS, bounds[:-1], bounds[1:]):
        far = dist[lo:hi] > K
        batch.node_x[k] = batch.node_x[k].copy()
        batch.node_x[k][far] = 0.0
        changed += int(far.sum())
    return changed


def _layers(batch, p):
    h, e = gnn.encode(batch, p)
    out = [h]
    for layer in range(p.config.layers):
        h = gnn.attention_layer(h, e, batch, p, layer)
        out.append(h)
    return out


@pytest.mark.parametrize("K", [1, 2, 4])
def test_k_hop_locality(K):
    # h^(k) of a node may only depend on node features within k hops, for every k <= K
    s = _sample(label=False)
    p = _model(s, seed=K, layers=K)
    ref = _layers(gnn.build_batch([s], p.config.layout), p)
    probed = 0
    n_nodes = len(ref[0].data)
    for k in range(1, K + 1):
        for i in range(n_nodes):
            b = gnn.build_batch([s], p.config.layout)
            if _zero_far_nodes(b, hop_distances(b, i), k) == 0:
                continue
            probed += 1
            h = _layers(b, p)[k]
            np.testing.assert_array_equal(h.data[i], ref[k].data[i])
            assert not np.array_equal(h.data, ref[k].data)
    assert probed > 0


def test_full_model_gradient_on_three_bus_batch():
    from dc2ac import training

    samples = [_sample("case3", f) for f in (1.0, 0.8)]
    p = _model(samples[0], seed=1, layers=2)
    b = gnn.build_batch(samples, p.config.layout)
    scales = training.LossScales(sigma={q: 0.1 for q in gnn.QUANTITIES}, cost=10.0)
    w = training.LossWeights()

    def f(*_):
        return training.loss(b, gnn.forward(b, p), w, scales)[0]

    # loss is O(50) while some gradients are O(1e-5): eps 1e-5 keeps roundoff below the tolerance
    err = ad.grad_check(f, p.values(), eps=1e-5, max_coords=4)
    assert err < 1e-4, err


def test_checkpoint_roundtrip_and_shape_check(tmp_path):
    s = _sample()
    p = _model(s, seed=2)
    path = tmp_path / "m.json"
    gnn.save_checkpoint(p, path)
    q = gnn.load_checkpoint(path)
    assert q.names() == p.names()
    for n in p.names():
        np.testing.assert_array_equal(q[n].data, p[n].data)
    np.testing.assert_array_equal(gnn.predict(q, [s])[0].v, gnn.predict(p, [s])[0].v)

    import json

    doc = json.loads(path.read_text())
    doc["params"]["head.W0"]["shape"][0] += 1
    path.write_text(json.dumps(doc))
    with pytest.raises(gnn.CheckpointError, match="head.W0"):
        gnn.load_checkpoint(path)
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(gnn.CheckpointError, match="version"):
        gnn.load_checkpoint(path)


def test_init_is_seeded():
    s = _sample()
    a, b, c = _model(s, seed=5), _model(s, seed=5), _model(s, seed=6)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert not np.array_equal(a["head.W0"].data, c["head.W0"].data)
    bound = 1 / np.sqrt(a["head.W0"].shape[0])
    assert np.abs(a["head.W0"].data).max() <= bound


def test_missing_elements_fill_zero_in_y():
    s = _sample()
    layout = gnn.y_layout(s.net)
    var = remove_element(s.net, "branch", s.net.branches[2].id)
    y = gnn.y_vector(gnn.make_sample(var), layout)
    nb, ng = s.net.n_bus, s.net.n_gen
    assert y.shape == s.features.y.shape
    assert y[nb + ng + 2] == 0.0


def test_batch_predictions_independent_of_batch_mates():
    a, b = _sample(factor=1.0), _sample(factor=1.15)
    p = _model(a, seed=3)
    alone = gnn.predict(p, [a])[0]
    together = gnn.predict(p, [a, b])[0]
    np.testing.assert_allclose(together.v, alone.v, atol=1e-13)
    np.testing.assert_allclose(together.s_branch, alone.s_branch, atol=1e-13)


def test_parameter_count_positive_and_tape_records_only_in_training():
    s = _sample()
    p = _model(s)
    assert p.count() == sum(int(np.prod(v)) for v in gnn.param_shapes(p.config).values())
    b = gnn.build_batch([s], p.config.layout)
    with Tape() as tape:
        gnn.forward(b, p)
    assert tape.nodes
