import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dc2ac.dcopf import (
    DcStatus,
    FeatureExtractionError,
    build_dc,
    extract_dc_features,
    kkt_residuals,
    solve_dc,
    solve_network,
    warm_start,
)
from dc2ac.network import bundled_case, network_to_dict, parse_case, scale_loads

from oracles import lattice_dc_opf

# objectives frozen from the lattice oracle (tests/oracles.py)
FROZEN = {
    "case2": (1.0, [1.0]),
    "case3": (15.0, [1.5, 0.0]),
    "case3_congested": (27.0, [0.3, 1.2]),
    "case3_quad": (18.933333333333, [0.733333333333, 0.466666666667]),
    "case6ww": (3046.412511656, [0.5, 0.8807362, 0.7192638]),
}


@pytest.mark.parametrize("name", sorted(FROZEN))
def test_matches_frozen_oracle_values(name):
    sol = solve_network(bundled_case(name))
    obj, p = FROZEN[name]
    assert sol.status is DcStatus.OPTIMAL
    assert sol.objective == pytest.approx(obj, rel=1e-9)
    np.testing.assert_allclose(sol.p_g_dc, p, atol=1e-5)


@pytest.mark.parametrize("name", ["case3", "case3_congested", "case3_quad"])
def test_matches_lattice_oracle(name):
    net = bundled_case(name)
    obj, p = lattice_dc_opf(net)
    sol = solve_network(net)
    assert abs(sol.objective - obj) <= 2e-3 * max(1.0, abs(obj))
    np.testing.assert_allclose(sol.p_g_dc, p, atol=1e-3)


@pytest.mark.parametrize("name", ["case2", "case3", "case3_congested", "case3_quad", "case6ww", "case14", "case57"])
def test_kkt_and_power_balance(name):
    net = bundled_case(name)
    sol = solve_network(net)
    kkt = kkt_residuals(net, sol)
    assert max(kkt.values()) < 1e-6, kkt
    assert sol.theta_dc[net.slack] == 0.0
    assert sol.p_g_dc.sum() == pytest.approx(net.p_d.sum(), abs=1e-9)
    assert np.all(np.abs(sol.f_dc) <= net.branch_array("s_max") + 1e-8)
    assert np.all(sol.p_g_dc >= net.gen_array("p_min") - 1e-9)
    assert np.all(sol.p_g_dc <= net.gen_array("p_max") + 1e-9)


def test_larger_case_objectives_frozen():
    assert solve_network(bundled_case("case14")).objective == pytest.approx(7642.59, rel=1e-6)
    assert solve_network(bundled_case("case57")).objective == pytest.approx(41006.74, rel=1e-6)


def test_flow_limit_binds_on_congested_case():
    net = bundled_case("case3_congested")
    sol = solve_network(net)
    assert abs(sol.f_dc[1]) == pytest.approx(net.branches[1].s_max, abs=1e-9)


def test_infeasible_load_reports_certificate():
    net = scale_loads(bundled_case("case3"), 100.0)
    sol = solve_network(net)
    assert sol.status is DcStatus.INFEASIBLE
    assert sol.certificate
    with pytest.raises(FeatureExtractionError):
        extract_dc_features(sol, net)
    with pytest.raises(FeatureExtractionError):
        warm_start(sol, net)


def test_equal_costs_prefer_lower_id():
    doc = network_to_dict(bundled_case("case3"))
    for g in doc["generators"]:
        g["cost"] = [0.0, 10.0, 0.0]
    net, _ = parse_case(json.dumps(doc))
    sol = solve_network(net)
    np.testing.assert_allclose(sol.p_g_dc, [1.5, 0.0], atol=1e-9)


def test_zero_load_dispatch_at_minimum():
    net = scale_loads(bundled_case("case6ww"), 0.0)
    doc = network_to_dict(net)
    for g in doc["generators"]:
        g["p_min"] = 0.0
    net, _ = parse_case(json.dumps(doc))
    sol = solve_network(net)
    np.testing.assert_allclose(sol.p_g_dc, 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.theta_dc, 0.0, atol=1e-12)


def test_features_and_warm_start():
    net = bundled_case("case6ww")
    sol = solve_network(net)
    feats = extract_dc_features(sol, net)
    assert feats.node.shape == (net.n_bus, 2) and feats.edge.shape == (net.n_branch, 1)
    np.testing.assert_array_equal(feats.y, np.concatenate([sol.theta_dc, sol.p_g_dc, sol.f_dc]))
    np.testing.assert_allclose(feats.node[:, 1].sum(), 0.0, atol=1e-12)
    x0 = warm_start(sol, net)
    np.testing.assert_array_equal(x0.v, 1.0)
    np.testing.assert_array_equal(x0.q_g, 0.0)
    np.testing.assert_array_equal(x0.s_branch, np.abs(sol.f_dc))


def test_deterministic():
    net = bundled_case("case57")
    a, b = solve_dc(build_dc(net), net), solve_dc(build_dc(net), net)
    assert a.to_dict() == b.to_dict()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 1.9), st.floats(0.0, 0.5))
def test_random_loads_match_oracle(p_load, q_load):
    doc = network_to_dict(bundled_case("case3_quad"))
    doc["loads"] = [{"bus": 3, "p_d": p_load, "q_d": q_load}]
    net, _ = parse_case(json.dumps(doc))
    sol = solve_network(net)
    ref = lattice_dc_opf(net)
    if ref is None:
        assert sol.status is DcStatus.INFEASIBLE
        return
    assert sol.status is DcStatus.OPTIMAL
    assert abs(sol.objective - ref[0]) <= 2e-3 * max(1.0, abs(ref[0]))
    assert max(kkt_residuals(net, sol).values()) < 1e-6
