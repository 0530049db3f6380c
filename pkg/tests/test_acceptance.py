"""End-to-end acceptance suite.

Every test prints one ``[criterion N] PASS|FAIL`` line. The training criteria
share one 500-scenario 6-bus dataset and the models trained on it.
"""

import time

import numpy as np
import pytest

from dc2ac import autodiff as ad
from dc2ac import datagen, gnn, training
from dc2ac.acphysics import OperatingPoint, branch_flow, newton_pf_trace
from dc2ac.dcopf import DcStatus, kkt_residuals, solve_network
from dc2ac.network import ContingencyRejected, bundled_case, permute_buses, remove_element

from oracles import lattice_dc_opf, literal_branch_flow
from test_acphysics import _two_bus
from test_autodiff import CASES as PRIMITIVES
from test_autodiff import KINKED, _rand, _weighted
from test_gnn import _layers, _zero_far_nodes, hop_distances

DC_FIXTURES = ["case2", "case3", "case6ww", "case3_congested", "case3_quad"]
AC_FIXTURES = DC_FIXTURES + ["case14", "case57"]
DESK_CONFIG = dict(max_epochs=40, patience=10)
FIELDS = ("v", "theta", "p_g", "q_g", "s_branch")


def _report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _labelled(net, count, seed):
    data = datagen.newton_dataset(net, datagen.PerturbSpec(count=count, seed=seed))
    return [gnn.make_sample(s.net, label=s.point, dc=s.dc) for s in data]


@pytest.fixture(scope="module")
def desk():
    """500 Newton-labelled 6-bus scenarios and a residual and a direct model trained on them."""
    t0 = time.perf_counter()
    samples = _labelled(bundled_case("case6ww"), 500, 0)
    out = {"samples": samples}
    for mode in ("residual", "direct"):
        params, rep = training.train(samples, training.TrainConfig(mode=mode, **DESK_CONFIG))
        out[mode] = (params, rep)
    out["seconds"] = time.perf_counter() - t0
    return out


def test_criterion_1_dc_opf_matches_oracle(capsys):
    worst_obj, worst_kkt, solve_time = 0.0, 0.0, 0.0
    for name in DC_FIXTURES:
        net = bundled_case(name)
        t = time.perf_counter()
        sol = solve_network(net)
        solve_time += time.perf_counter() - t
        obj, _ = lattice_dc_opf(net)
        assert sol.status is DcStatus.OPTIMAL
        worst_obj = max(worst_obj, abs(sol.objective - obj) / max(1.0, abs(obj)))
        worst_kkt = max(worst_kkt, max(kkt_residuals(net, sol).values()))
    ok = worst_obj <= 2e-3 and worst_kkt < 1e-6 and solve_time < 1.0
    _report(capsys, 1, ok, f"objective gap {worst_obj:.2e}, KKT {worst_kkt:.2e}, {solve_time:.3f} s")


def test_criterion_2_ac_physics(capsys):
    rng = np.random.default_rng(2024)
    worst_flow = 0.0
    for _ in range(100):
        r, x = rng.uniform(0.0, 0.1), rng.uniform(0.01, 0.5)
        v, th = rng.uniform(0.9, 1.1, 2), rng.uniform(-0.5, 0.5, 2)
        net = _two_bus(r, x)
        pt = OperatingPoint(p_g=[0.0], q_g=[0.0], v=v, theta=th)
        p_ij, q_ij, _, _ = branch_flow(net, pt, net.branches[0].id)
        p_ref, q_ref = literal_branch_flow(r, x, v[0], v[1], th[0], th[1])
        worst_flow = max(worst_flow, abs(p_ij - p_ref), abs(q_ij - q_ref))

    worst_mismatch, quadratic = 0.0, True
    for name in AC_FIXTURES:
        net = bundled_case(name)
        h = newton_pf_trace(net, solve_network(net).p_g_dc).history
        worst_mismatch = max(worst_mismatch, h[-1])
        # e_{k+1} <= C e_k^2 on the steps above the roundoff floor
        tail = [(a, b) for a, b in zip(h[:-1], h[1:]) if a < 1e-1 and b > 1e-13]
        quadratic &= bool(tail) and all(b <= 50.0 * a * a for a, b in tail[-2:])
    ok = worst_flow < 1e-12 and worst_mismatch < 1e-10 and quadratic
    _report(capsys, 2, ok, f"flow error {worst_flow:.1e}, final mismatch {worst_mismatch:.1e}, "
                           f"quadratic tail {quadratic}")


def test_criterion_3_gradients(capsys):
    t0 = time.perf_counter()
    prim = 0.0
    for fn, shapes in PRIMITIVES.values():
        xs = [_rand(*s) for s in shapes]
        prim = max(prim, ad.grad_check(lambda *a, fn=fn: _weighted(fn(*a)), xs))
    for fn in KINKED.values():
        x = _rand(4, 3, away_from_zero=True)
        prim = max(prim, ad.grad_check(lambda a, fn=fn: _weighted(fn(a)), x))

    net = bundled_case("case3")
    samples = [gnn.make_sample(n, label=pt, dc=dc) for n, dc, pt in
               datagen.perturb(net, datagen.PerturbSpec(count=2, seed=5), label=True)]
    cfg = gnn.ModelConfig(layout=gnn.y_layout(net), d_h=8, d_k=4, layers=2, psi_hidden=4, head_hidden=8)
    params = gnn.init_params(cfg, 1)
    batch = gnn.build_batch(samples, cfg.layout)
    scales = training.LossScales(sigma={q: 0.1 for q in gnn.QUANTITIES}, cost=10.0)
    _, terms = training.loss(batch, gnn.forward(batch, params), training.LossWeights(), scales)
    assert all(terms[k] > 0 for k in ("sup", "pf", "obj", "res"))

    def f(*_):
        return training.loss(batch, gnn.forward(batch, params), training.LossWeights(), scales)[0]

    # eps 1e-5: the loss is O(10) while some gradients are O(1e-5)
    full = ad.grad_check(f, params.values(), eps=1e-5, max_coords=4)
    elapsed = time.perf_counter() - t0
    ok = prim < 1e-6 and full < 1e-4 and elapsed < 30.0
    _report(capsys, 3, ok, f"primitives {prim:.1e}, full loss {full:.1e}, {elapsed:.1f} s")


def test_criterion_4_residual_identities(capsys, desk):
    samples = desk["samples"]
    zero_ok = back_ok = True
    for s in samples:
        zero = gnn.ResidualVector(*(np.zeros_like(getattr(s.x0, q)) for q in FIELDS))
        x = gnn.reconstruct(s.x0, zero)
        y = gnn.reconstruct(s.x0, gnn.residual_between(s.x0, s.label))
        for q in FIELDS:
            zero_ok &= np.array_equal(getattr(x, q), getattr(s.x0, q))
            back_ok &= np.array_equal(getattr(y, q), getattr(s.label, q))

    params = desk["residual"][0].copy()
    for name in params.names():
        if name.startswith("head."):
            params[name].data[...] = 0.0
    head_ok = True
    for s, pt in zip(samples[:50], gnn.predict(params, samples[:50])):
        for q in FIELDS:
            head_ok &= np.array_equal(getattr(pt, q), getattr(s.x0, q))
    ok = zero_ok and back_ok and head_ok
    _report(capsys, 4, ok, f"x0+0 exact {zero_ok}, x0+(label-x0) exact {back_ok} over {len(samples)} samples, "
                           f"zero head = warm start {head_ok}")


def test_criterion_5_equivariance_and_locality(capsys):
    s = gnn.make_sample(bundled_case("case6ww"))
    cfg = gnn.ModelConfig(layout=gnn.y_layout(s.net), d_h=16, d_k=8, layers=3)
    p = gnn.init_params(cfg, 4)
    order = np.array([4, 2, 0, 5, 1, 3])
    a = gnn.predict(p, [s])[0]
    b = gnn.predict(p, [gnn.make_sample(permute_buses(s.net, order))])[0]
    equiv = max(float(np.max(np.abs(b.v - a.v[order]))), float(np.max(np.abs(b.theta - a.theta[order]))),
                float(np.max(np.abs(b.p_g - a.p_g))), float(np.max(np.abs(b.q_g - a.q_g))),
                float(np.max(np.abs(b.s_branch - a.s_branch))))

    local, probes = True, 0
    for K in (1, 2, 4):
        pk = gnn.init_params(gnn.ModelConfig(layout=cfg.layout, d_h=8, d_k=4, layers=K), K)
        ref = _layers(gnn.build_batch([s], cfg.layout), pk)
        for k in range(1, K + 1):
            for i in range(len(ref[0].data)):
                batch = gnn.build_batch([s], cfg.layout)
                if _zero_far_nodes(batch, hop_distances(batch, i), k) == 0:
                    continue
                probes += 1
                local &= np.array_equal(_layers(batch, pk)[k].data[i], ref[k].data[i])
    ok = equiv <= 1e-12 and local and probes > 0
    _report(capsys, 5, ok, f"permutation error {equiv:.1e}, locality exact on {probes} probes: {local}")


def test_criterion_6_residual_beats_direct(capsys, desk):
    samples = desk["samples"]
    res_params, res_rep = desk["residual"]
    dir_params, dir_rep = desk["direct"]
    assert res_rep.splits == dir_rep.splits
    val = [samples[i] for i in res_rep.splits["val"]]
    mr, md = training.evaluate(res_params, val), training.evaluate(dir_params, val)
    ok = (mr.mse_mean <= 0.9 * md.mse_mean and mr.feasibility <= 0.5 * mr.warm_start_feasibility
          and desk["seconds"] < 1200)
    _report(capsys, 6, ok, f"val MSE residual {mr.mse_mean:.3e} vs direct {md.mse_mean:.3e} "
                           f"(ratio {mr.mse_mean / md.mse_mean:.2f}); feasibility {mr.feasibility:.4f} vs "
                           f"warm start {mr.warm_start_feasibility:.4f}; {desk['seconds']:.0f} s")


def test_criterion_7_generated_data_shifts_ecdf_left(capsys):
    base = bundled_case("case6ww")
    newton, test = _labelled(base, 150, 1), _labelled(base, 200, 2)
    cfg = training.TrainConfig(max_epochs=150, patience=20)
    params_a, rep_a = training.train(newton, cfg)
    rows = datagen.model_dataset(params_a, base, datagen.PerturbSpec(count=300, seed=3))
    assert {g.provenance for g in rows} == {datagen.MODEL_GENERATED}
    generated = [gnn.make_sample(g.net, label=g.point, dc=g.dc) for g in rows]
    # same validation set, so early stopping sees the same held-out signal
    splits = dict(rep_a.splits, train=rep_a.splits["train"] + list(range(150, 450)))
    params_b, _ = training.train(newton + generated, cfg, splits=splits)
    ma, mb = training.evaluate(params_a, test), training.evaluate(params_b, test)

    cuts = np.arange(1, 10) / 10
    ok, parts = True, []
    for name in ("power_errors", "angle_errors"):
        a, b = getattr(ma, name), getattr(mb, name)
        ratio = np.quantile(b, cuts) / np.quantile(a, cuts)
        ok &= ratio[4] <= 1.0 and ratio[7] <= 1.0 and ratio.max() <= 1.05
        parts.append(f"{name.split('_')[0]} p50 x{ratio[4]:.2f} p80 x{ratio[7]:.2f} worst decile x{ratio.max():.3f} "
                     f"(max error x{b.max() / a.max():.2f})")
    _report(capsys, 7, ok, "; ".join(parts))


def test_criterion_8_line_outages(capsys, desk):
    samples = desk["samples"]
    params, rep = desk["residual"]
    base_mse = training.evaluate(params, [samples[i] for i in rep.splits["test"]]).mse_mean

    base = bundled_case("case6ww")
    variants = []
    for br in base.branches:
        try:
            variants.append(remove_element(base, "branch", br.id))
        except ContingencyRejected:
            continue
    variants = variants[:10]
    assert len(variants) == 10

    finite, tune, held_out = True, [], []
    for k, net in enumerate(variants):
        test = _labelled(net, 20, 200 + k)
        m = training.evaluate(params, test)
        finite &= np.isfinite(m.feasibility) and all(np.all(np.isfinite(pt.v)) for pt in gnn.predict(params, test))
        tune += _labelled(net, 100, 100 + k)
        held_out += test
    before = training.evaluate(params, held_out).mse_mean

    tuned, _ = training.train(tune, training.TrainConfig(lr=3e-4, max_epochs=120, patience=20), init=params)
    after = training.evaluate(tuned, held_out).mse_mean
    ok = finite and after <= 1.25 * base_mse
    _report(capsys, 8, ok, f"finite on all 10 outages {finite}; variant MSE {before:.2e} before and {after:.2e} "
                           f"after fine-tuning vs base {base_mse:.2e} (ratio {after / base_mse:.2f})")


def test_criterion_9_determinism(capsys, tmp_path):
    dc_same = True
    for name in AC_FIXTURES:
        a, b = solve_network(bundled_case(name)), solve_network(bundled_case(name))
        dc_same &= all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("p_g_dc", "theta_dc", "f_dc"))
        dc_same &= a.objective == b.objective

    samples = _labelled(bundled_case("case6ww"), 30, 8)
    cfg = training.TrainConfig(max_epochs=3, d_h=8, d_k=4, layers=2, batch_size=8)
    (p1, r1), (p2, r2) = training.train(samples, cfg), training.train(samples, cfg)
    train_same = r1.to_dict(timing=False) == r2.to_dict(timing=False)
    train_same &= all(np.array_equal(p1[n].data, p2[n].data) for n in p1.names())

    spec = datagen.PerturbSpec(count=5, seed=21)
    base = bundled_case("case14")
    hashes = [[f["sha256"] for f in datagen.write_dataset(datagen.newton_dataset(base, spec),
                                                           str(tmp_path / d), spec, base="case14")["files"]]
              for d in ("a", "b")]
    data_same = hashes[0] == hashes[1]
    ok = dc_same and train_same and data_same
    _report(capsys, 9, ok, f"DC solutions {dc_same}, training reports {train_same}, dataset hashes {data_same}")
