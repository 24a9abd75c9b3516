"""Grid model: assembly, schema errors, constraints, admittance estimation,
and the pivot-omission certificate."""

import json

import numpy as np
import pytest

from ppfa import grid as gr
from ppfa import pfcore as pf
from ppfa.errors import (
    CertificateFail,
    DimensionMismatch,
    DisconnectedGraph,
    RankDeficient,
    SchemaError,
    SlackMissing,
)


def simple_two_bus_doc():
    return {
        "id": "t", "v_nominal": 230.0,
        "buses": [{"id": 0, "slack": True}, {"id": 1, "p": -1000.0, "q": -200.0}],
        "branches": [{"from": 0, "to": 1, "g": 10.0, "b": -20.0}],
    }


# --- loading / assembly -------------------------------------------------------


def test_two_bus_assembly():
    g = gr.grid_from_dict(simple_two_bus_doc())
    expected = np.array([[10 - 20j, -10 + 20j], [-10 + 20j, 10 - 20j]])
    np.testing.assert_allclose(g.Y, expected)


def test_row_sums_equal_shunts():
    doc = simple_two_bus_doc()
    doc["branches"][0]["shunt_g"] = 0.5
    doc["branches"][0]["shunt_b"] = 0.25
    g = gr.grid_from_dict(doc)
    np.testing.assert_allclose(g.Y.sum(axis=1), [0.5 + 0.25j, 0.5 + 0.25j])
    # symmetric for passive branches
    np.testing.assert_allclose(g.Y, g.Y.T)


def test_branch_removal_zeroes_offdiagonals():
    doc = {
        "id": "t3", "v_nominal": 230.0,
        "buses": [{"id": 0, "slack": True}, {"id": 1}, {"id": 2}],
        "branches": [
            {"from": 0, "to": 1, "g": 10.0, "b": -20.0},
            {"from": 1, "to": 2, "g": 5.0, "b": -9.0},
            {"from": 0, "to": 2, "g": 3.0, "b": -6.0},
        ],
    }
    full = gr.grid_from_dict(doc)
    doc2 = json.loads(json.dumps(doc))
    doc2["branches"] = doc["branches"][:2]  # drop branch 0-2
    cut = gr.grid_from_dict(doc2)
    assert full.Y[0, 2] == -(3 - 6j) and cut.Y[0, 2] == 0
    assert cut.Y[0, 1] == full.Y[0, 1]
    np.testing.assert_allclose(full.Y[0, 0] - cut.Y[0, 0], 3 - 6j)


def test_missing_slack():
    doc = simple_two_bus_doc()
    doc["buses"][0].pop("slack")
    with pytest.raises(SlackMissing):
        gr.grid_from_dict(doc)


def test_disconnected_graph():
    doc = {
        "id": "t", "v_nominal": 230.0,
        "buses": [{"id": 0, "slack": True}, {"id": 1}, {"id": 2}],
        "branches": [{"from": 0, "to": 1, "g": 10.0, "b": -20.0}],
    }
    with pytest.raises(DisconnectedGraph):
        gr.grid_from_dict(doc)


def test_schema_errors(tmp_path):
    with pytest.raises(SchemaError):
        gr.grid_from_dict({"buses": [], "branches": []})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        gr.load_grid(bad)


@pytest.mark.parametrize("mutation", [
    lambda d: d.pop("v_nominal"),
    lambda d: d["buses"].append({"id": 5}),                # ids not 0..n-1
    lambda d: d["branches"].append({"from": 0, "to": 9, "g": 1, "b": 0}),
    lambda d: d["branches"].append({"from": 1, "to": 1, "g": 1, "b": 0}),
    lambda d: d["branches"].__setitem__(0, {"from": 0, "to": 1, "g": "x", "b": 0}),
    lambda d: d["buses"].__setitem__(0, {"id": 0}),        # no slack anywhere
])
def test_loader_rejects_malformed(mutation):
    doc = simple_two_bus_doc()
    mutation(doc)
    with pytest.raises(SchemaError):
        gr.grid_from_dict(doc)


def test_bundled_grids_load():
    names = {"two_bus": 2, "three_bus": 3, "ten_bus": 10, "rural18": 18}
    for name, n in names.items():
        g = gr.bundled_grid(name)
        assert g.n == n
    assert len(gr.bundled_grid("rural18").prosumers) == 13


# --- constraints ---------------------------------------------------------------


def test_constraints_all_inside():
    g = gr.bundled_grid("two_bus")
    report = gr.check_constraints([230.0, 229.5], [4.0], g)
    assert not report["any"]


def test_constraints_inclusive_bounds():
    g = gr.bundled_grid("two_bus")
    report = gr.check_constraints([g.v_max[0], g.v_min[1]], [g.branches[0].i_max], g)
    assert not report["any"]  # equality is not a violation


def test_constraints_stressed_overload():
    g = gr.bundled_grid("two_bus_stressed")
    cfg = pf.SolverConfig(solver="lu", max_newton=20)
    st = pf.newton_solve(g, cfg)
    vm, ib = pf.magnitudes(st.x, g)
    report = gr.check_constraints(vm, ib, g)
    # hand check: |i| ~ |s| / |v2| exceeds the 900 A branch rating
    v2 = st.x[1] + 1j * st.x[3]
    s_mag = abs(g.p0[1] + 1j * g.q0[1])
    assert s_mag / abs(v2) > g.branches[0].i_max
    assert report["branch_overload"] == [0]
    assert 1 in report["bus_undervoltage"]


# --- admittance estimation ---------------------------------------------------------


def synth_measurements(g, t_samples, seed=0, mode="currents"):
    rng = np.random.default_rng(seed)
    w_true = gr.stacked_w_matrix(g.G, g.B)
    xs, ws = [], []
    for _ in range(t_samples + 1):
        x = np.concatenate(
            [g.v_nominal * (1 + 0.05 * rng.normal(size=g.n)),
             math_safe := 5.0 * rng.normal(size=g.n)]
        )
        xs.append(x)
        if mode == "currents":
            ws.append(w_true @ x)
        else:
            ws.append(gr.voltage_selector(x) @ (w_true @ x))
    return np.array(xs), np.array(ws)


def test_estimator_recovers_currents_mode():
    g = gr.bundled_grid("two_bus")
    xs, ws = synth_measurements(g, 10)
    w_est = gr.estimate_admittance(xs, ws, mode="currents")
    w_true = gr.stacked_w_matrix(g.G, g.B)
    rel = np.abs(w_est - w_true).max() / np.abs(w_true).max()
    assert rel <= 1e-8
    g_est, b_est = gr.split_w_matrix(w_est)
    np.testing.assert_allclose(g_est, g.G, atol=1e-7)
    np.testing.assert_allclose(b_est, g.B, atol=1e-7)


def test_estimator_recovers_powers_mode():
    g = gr.bundled_grid("three_bus")
    xs, ws = synth_measurements(g, 4 * g.n, seed=1, mode="powers")
    w_est = gr.estimate_admittance(xs, ws, mode="powers")
    w_true = gr.stacked_w_matrix(g.G, g.B)
    rel = np.abs(w_est - w_true).max() / np.abs(w_true).max()
    assert rel <= 1e-8


def test_estimator_degenerate_b_zero():
    g = gr.bundled_grid("two_bus_dc")
    xs, ws = synth_measurements(g, 12, seed=2)
    w_est = gr.estimate_admittance(xs, ws, mode="currents")
    _, b_est = gr.split_w_matrix(w_est)
    np.testing.assert_allclose(b_est, np.zeros((2, 2)), atol=1e-8)


def test_estimator_rank_deficient():
    g = gr.bundled_grid("two_bus")
    xs, ws = synth_measurements(g, 1)
    with pytest.raises(RankDeficient):
        gr.estimate_admittance(xs, ws)


# --- pivot certificate ---------------------------------------------------------------


def test_build_k_example():
    G = np.array([[1.0, -1.0], [-1.0, 1.0]])
    B = np.zeros((2, 2))
    K = gr.build_K(G, B)
    expected = np.array(
        [[2, -1, 0, 0], [-1, 2, 0, 0], [0, -1, 0, 0], [-1, 0, 0, 0]], dtype=float
    )
    np.testing.assert_allclose(K, expected)
    assert abs(np.linalg.det(K)) < 1e-12


def test_build_k_linear():
    g = gr.bundled_grid("three_bus")
    K1 = gr.build_K(g.G, g.B)
    K2 = gr.build_K(2 * g.G, 2 * g.B)
    np.testing.assert_allclose(K2, 2 * K1)
    with pytest.raises(DimensionMismatch):
        gr.build_K(g.G, np.zeros((2, 2)))


def test_k_diag_identity():
    # K x equals the Jacobian diagonal stacked (dp-rows then dq-rows)
    g = gr.bundled_grid("ten_bus")
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = np.concatenate(
            [g.v_nominal * (1 + 0.05 * rng.normal(size=g.n)),
             8.0 * rng.normal(size=g.n)]
        )
        jac = pf.compute_J(x, g)
        full = np.block(
            [[jac.H1 + jac.H3, jac.H2 + jac.H4], [jac.H2 - jac.H4, -jac.H1 + jac.H3]]
        )
        np.testing.assert_allclose(gr.build_K(g.G, g.B) @ x, np.diag(full), atol=1e-8)


def brute_force_min(row, box, samples=200_000, seed=0):
    # boundary sampling plus all vertices of the active coordinates
    rng = np.random.default_rng(seed)
    dims = row.size
    best = np.inf
    active = [i for i in range(dims) if row[i] != 0 and box.hi[i] > box.lo[i]]
    if len(active) <= 16:
        for mask in range(1 << len(active)):
            x = np.where(rng.random(dims) < 2, box.lo, box.hi).astype(float)
            x = box.lo.copy()
            for b, i in enumerate(active):
                x[i] = box.hi[i] if (mask >> b) & 1 else box.lo[i]
            best = min(best, abs(row @ x))
    pts = box.lo + (box.hi - box.lo) * rng.random((samples // 100, dims))
    best_interior = np.abs(pts @ row).min() if len(pts) else np.inf
    return min(best, best_interior)


@pytest.mark.parametrize("name", ["two_bus", "three_bus"])
def test_certificate_matches_brute_force(name):
    g = gr.bundled_grid(name)
    K = gr.build_K(g.G, g.B)
    box = gr.OperatingBox.from_limits(g, vi_frac=0.1)
    keep = g.reduced_indices()
    cert = gr.pivot_certificate(K, box, rows=keep)
    for i in keep:
        brute = brute_force_min(K[i], box, seed=i)
        assert cert["per_row"][int(i)] <= brute * 1.01 + 1e-9
        assert cert["per_row"][int(i)] >= brute * 0.99 - 1e-9
    assert cert["bound"] > 0


def test_certificate_soundness_random_points():
    g = gr.bundled_grid("three_bus")
    K = gr.build_K(g.G, g.B)
    box = gr.OperatingBox.from_limits(g, vi_frac=0.1)
    keep = g.reduced_indices()
    cert = gr.pivot_certificate(K, box, rows=keep)
    rng = np.random.default_rng(4)
    pts = box.lo + (box.hi - box.lo) * rng.random((1000, box.lo.size))
    for i in keep:
        vals = np.abs(pts @ K[i])
        assert vals.min() >= cert["per_row"][int(i)] * (1 - 1e-9)


def test_certificate_fails_on_degenerate_b():
    g = gr.bundled_grid("two_bus_dc")
    K = gr.build_K(g.G, g.B)
    box = gr.OperatingBox.from_limits(g, vi_frac=0.1)
    with pytest.raises(CertificateFail):
        gr.pivot_certificate(K, box, rows=g.reduced_indices())


def test_certificate_fails_when_box_contains_zero():
    g = gr.bundled_grid("three_bus")
    K = gr.build_K(g.G, g.B)
    n = g.n
    box = gr.OperatingBox(lo=-np.ones(2 * n), hi=np.ones(2 * n))
    with pytest.raises(CertificateFail):
        gr.pivot_certificate(K, box, rows=g.reduced_indices())


def test_certificate_scales_with_box():
    g = gr.bundled_grid("three_bus")
    K = gr.build_K(g.G, g.B)
    box = gr.OperatingBox.from_limits(g, vi_frac=0.1)
    keep = g.reduced_indices()
    c1 = gr.pivot_certificate(K, box, rows=keep)
    c2 = gr.pivot_certificate(K, box.scaled(2.0), rows=keep)
    assert c2["bound"] == pytest.approx(2.0 * c1["bound"], rel=1e-6)


# --- regularization ---------------------------------------------------------------


def test_regularize_identity():
    out, delta = gr.regularize(np.eye(4), 0.1)
    assert delta == pytest.approx(0.1, rel=1e-5)
    np.testing.assert_allclose(out, 1.1 * np.eye(4), rtol=1e-5)


def test_regularize_inverse_proportional():
    rng = np.random.default_rng(5)
    J = rng.normal(size=(6, 6))
    _, d1 = gr.regularize(J, 0.2)
    _, d2 = gr.regularize(3.0 * J, 0.2)
    assert d2 == pytest.approx(d1 / 3.0, rel=1e-4)


def test_regularized_solve_error_bound():
    rng = np.random.default_rng(6)
    J = np.eye(8) + 0.1 * rng.normal(size=(8, 8))
    b = rng.normal(size=8)
    x_exact = np.linalg.solve(J, b)
    e = 1e-3
    J_reg, _ = gr.regularize(J, e)
    x_reg = np.linalg.solve(J_reg, b)
    rel = np.linalg.norm(x_reg - x_exact) / np.linalg.norm(x_exact)
    assert rel <= e * np.linalg.cond(J)  # cited first-order bound, conservatively


def test_measurement_csv_round_trip(tmp_path):
    g = gr.bundled_grid("two_bus")
    xs, ws = synth_measurements(g, 6)
    data = np.hstack([xs, ws])
    path = tmp_path / "meas.csv"
    np.savetxt(path, data, delimiter=",")
    x2, w2 = gr.load_measurements(path, g.n)
    np.testing.assert_allclose(x2, xs)
    np.testing.assert_allclose(w2, ws)
    with pytest.raises(SchemaError):
        gr.load_measurements(path, g.n + 1)
