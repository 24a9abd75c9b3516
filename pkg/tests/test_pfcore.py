"""Plaintext solver: residual/Jacobian oracles, pivot-free LU, GMRES, the
secant line search, and the Newton driver against independent oracles."""

import numpy as np
import pytest

from ppfa import grid as gr
from ppfa import pfcore as pf
from ppfa.errors import MaxIterExceeded, NearZeroPivot, NotConverged


def random_state(g, rng, v_spread=0.05, vi_spread=5.0):
    x = pf.flat_start(g)
    x[: g.n] *= 1 + v_spread * rng.normal(size=g.n)
    x[g.n :] = vi_spread * rng.normal(size=g.n)
    x[g.slack] = g.v_nominal
    x[g.n + g.slack] = 0.0
    return x


# --- currents ------------------------------------------------------------------


def test_currents_zero_state():
    g = gr.bundled_grid("three_bus")
    ir, ii = pf.compute_currents(np.zeros(2 * g.n), g.G, g.B)
    assert not ir.any() and not ii.any()


def test_currents_decoupled_real_case():
    g = gr.bundled_grid("two_bus_dc")  # B = 0
    x = np.array([230.0, 210.0, 0.0, 0.0])
    ir, ii = pf.compute_currents(x, g.G, g.B)
    np.testing.assert_allclose(ir, g.G @ x[:2])
    np.testing.assert_allclose(ii, 0.0)


def test_currents_vs_complex_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(2, 6)
        G = rng.normal(size=(n, n))
        B = rng.normal(size=(n, n))
        x = rng.normal(size=2 * n)
        ir, ii = pf.compute_currents(x, G, B)
        i_complex = (G + 1j * B) @ (x[:n] + 1j * x[n:])
        np.testing.assert_allclose(ir + 1j * ii, i_complex, rtol=1e-12, atol=1e-12)


# --- residual -------------------------------------------------------------------


def test_f_zero_at_flat_no_load():
    doc = {
        "id": "z", "v_nominal": 230.0,
        "buses": [{"id": 0, "slack": True}, {"id": 1}],
        "branches": [{"from": 0, "to": 1, "g": 10.0, "b": -20.0}],
    }
    g = gr.grid_from_dict(doc)
    f = pf.compute_F(pf.flat_start(g), g)
    np.testing.assert_allclose(f, 0.0, atol=1e-9)


def test_f_vs_complex_oracle():
    rng = np.random.default_rng(1)
    g = gr.bundled_grid("ten_bus")
    ns = g.non_slack
    for _ in range(1000):
        x = random_state(g, rng)
        v = x[: g.n] + 1j * x[g.n :]
        s = v * np.conj(g.Y @ v) - (g.p0 + 1j * g.q0)
        expected = np.concatenate([s.real[ns], s.imag[ns]])
        np.testing.assert_allclose(pf.compute_F(x, g), expected, rtol=1e-11, atol=1e-7)


def test_f_small_at_oracle_solution():
    # independent 2-bus oracle: damped fixed-point iteration on the closed form
    g = gr.bundled_grid("two_bus")
    y = -g.Y[0, 1]
    s = g.p0[1] + 1j * g.q0[1] - (np.conj(g.Y[1, 1] + g.Y[1, 0]) * 0)  # no shunt at bus 1? includes shunt below
    y_sh = g.Y[1, 1] + g.Y[1, 0]  # residual shunt admittance at bus 2
    v1 = g.v_nominal
    v2 = v1 + 0j
    for _ in range(50_000):
        # s = v2 * conj(y (v2 - v1) + y_sh v2)
        rhs = np.conj((g.p0[1] + 1j * g.q0[1]) / v2) - y_sh * v2
        v2 = 0.5 * v2 + 0.5 * (v1 + rhs / y)
    x = np.array([v1, v2.real, 0.0, v2.imag])
    f = pf.compute_F(x, g)
    assert np.linalg.norm(f) <= 1e-6  # W-scale residual at the oracle solution


# --- Jacobian -----------------------------------------------------------------------


@pytest.mark.parametrize("name", ["two_bus", "three_bus", "ten_bus", "rural18"])
def test_jacobian_vs_finite_differences(name):
    g = gr.bundled_grid(name)
    keep = g.reduced_indices()
    rng = np.random.default_rng(2)
    step = 2.0**-4  # F is quadratic: central differences are exact up to roundoff
    for _ in range(20):
        x = random_state(g, rng)
        jac = pf.compute_J(x, g).assembled
        fd = np.zeros_like(jac)
        for c, idx in enumerate(keep):
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            fd[:, c] = (pf.compute_F(xp, g) - pf.compute_F(xm, g)) / (2 * step)
        assert np.abs(jac - fd).max() <= 1e-5


def test_jacobian_decoupled_blocks():
    g = gr.bundled_grid("two_bus_dc")  # B = 0
    x = np.array([230.0, 220.0, 0.0, 0.0])  # v_I = 0
    blocks = pf.compute_J(x, g)
    np.testing.assert_allclose(blocks.H2, 0.0)
    np.testing.assert_allclose(blocks.H4, 0.0)


def test_jacobian_sparsity_pattern():
    g = gr.bundled_grid("rural18")
    rng = np.random.default_rng(3)
    x = random_state(g, rng)
    jac = pf.compute_J(x, g).assembled
    # adjacency (plus diagonal) pattern, doubled for the two blocks
    adj = (np.abs(g.G) + np.abs(g.B)) > 0
    np.fill_diagonal(adj, True)
    keep_bus = g.non_slack
    a = adj[np.ix_(keep_bus, keep_bus)]
    allowed = np.block([[a, a], [a, a]])
    assert not np.abs(jac[~allowed]).any()


# --- LU ------------------------------------------------------------------------------


def test_lu_identity():
    x = pf.lu_solve(np.eye(4), np.eye(4)[:, 0])
    np.testing.assert_allclose(x, np.eye(4)[:, 0])


def test_lu_random_well_conditioned():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a = np.eye(8) + 0.3 * rng.normal(size=(8, 8))
        b = rng.normal(size=8)
        x = pf.lu_solve(a, b)
        ref = np.linalg.solve(a, b)
        assert np.linalg.norm(a @ x - b) <= 1e-8 * max(1.0, np.linalg.norm(b))
        np.testing.assert_allclose(x, ref, rtol=1e-7, atol=1e-9)


def test_lu_reconstruction():
    rng = np.random.default_rng(5)
    a = np.eye(10) + 0.2 * rng.normal(size=(10, 10))
    lower, upper = pf.lu_factor_nopivot(a)
    assert np.abs(np.diag(lower) - 1.0).max() == 0.0  # unit diagonal by construction
    err = np.linalg.norm(lower @ upper - a) / np.linalg.norm(a)
    assert err <= 1e-10


def test_lu_near_zero_pivot():
    a = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-13]])
    with pytest.raises(NearZeroPivot):
        pf.lu_solve(a, np.ones(2), pivot_floor=1e-9)


# --- GMRES ---------------------------------------------------------------------------


def test_gmres_identity_preconditioner_one_step():
    g = gr.bundled_grid("three_bus")
    j0 = pf.compute_J(pf.flat_start(g), g).assembled
    p = pf.make_preconditioner(g)
    b = np.arange(1.0, j0.shape[0] + 1)
    x, iters = pf.gmres_solve(j0, b, p, tol=1e-10)
    assert iters == 1  # P J(x0) = I
    np.testing.assert_allclose(j0 @ x, b, rtol=1e-9)


def test_gmres_desk_grid_worst_case_iterations():
    g = gr.bundled_grid("ten_bus")
    cfg = pf.SolverConfig(solver="gmres", max_newton=25, convergence_tol=1e-16)
    st = pf.newton_solve(g, cfg)
    worst = max(r["solver_iters"] for r in st.trace)
    assert worst <= 20


def test_gmres_preconditioner_helps():
    g = gr.bundled_grid("rural18")
    cfg = pf.SolverConfig(solver="lu", max_newton=25, convergence_tol=1e-16)
    st = pf.newton_solve(g, cfg)
    jac = pf.compute_J(st.x, g).assembled
    b = -pf.compute_F(st.x * 1.0005, g)
    p = pf.make_preconditioner(g)
    _, with_p = pf.gmres_solve(jac, b, p, tol=1e-8, max_iter=60)
    _, without_p = pf.gmres_solve(jac, b, None, tol=1e-8, max_iter=60)
    assert with_p < without_p


def test_gmres_max_iter_exceeded():
    rng = np.random.default_rng(6)
    a = np.eye(30) + rng.normal(size=(30, 30))
    with pytest.raises(MaxIterExceeded):
        pf.gmres_solve(a, rng.normal(size=30), None, tol=1e-14, max_iter=3)


# --- line search -----------------------------------------------------------------------


def test_secant_exact_for_affine_residual():
    # F affine in eta makes g quadratic; with eta0 = 1 one update is exact
    d = np.array([2.0, -1.0])
    f0 = np.array([3.0, 1.0])
    eval_f = lambda eta: f0 + eta * d
    minimizer = -(f0 @ d) / (d @ d)
    cfg = pf.SolverConfig(max_linesearch=1)
    eta, _ = pf.secant_line_search(eval_f, f0, cfg)
    assert eta == pytest.approx(minimizer, abs=1e-12)


def test_secant_stationary_point_freezes():
    assert pf.line_search_step(0.0, 0.0, 1.0, 0.99, -0.01) == 0.0


def test_line_search_reduces_newton_iterations():
    g = gr.bundled_grid("two_bus_stressed")

    def iters_to(tol, line_search):
        cfg = pf.SolverConfig(solver="lu", max_newton=40, line_search=line_search,
                              convergence_tol=1e-16)
        st = pf.newton_solve(g, cfg, raise_on_fail=False)
        for rec in st.trace:
            if rec["residual_sq"] <= tol:
                return rec["k"]
        return None

    with_ls = iters_to(1e-8, True)
    without = iters_to(1e-8, False)
    assert with_ls is not None and without is not None
    assert with_ls <= without * 0.9  # at least 10% fewer


def test_eta_sequence_decays_on_stressed_case():
    g = gr.bundled_grid("two_bus_stressed")
    cfg = pf.SolverConfig(solver="lu", max_newton=12, convergence_tol=1e-16)
    st = pf.newton_solve(g, cfg, raise_on_fail=False)
    etas = [r["eta"] for r in st.trace]
    assert abs(etas[-1] - etas[-2]) <= abs(etas[1] - etas[0]) + 1e-9


# --- Newton driver ------------------------------------------------------------------------


def test_zero_load_converges_immediately():
    doc = {
        "id": "z", "v_nominal": 230.0,
        "buses": [{"id": 0, "slack": True}, {"id": 1}],
        "branches": [{"from": 0, "to": 1, "g": 10.0, "b": -20.0}],
    }
    g = gr.grid_from_dict(doc)
    st = pf.newton_solve(g, pf.SolverConfig(max_newton=3))
    assert st.k <= 1 and st.converged
    np.testing.assert_allclose(st.x, pf.flat_start(g), atol=1e-9)


def test_two_bus_matches_fixed_point_oracle():
    g = gr.bundled_grid("two_bus")
    st = pf.newton_solve(g, pf.SolverConfig(max_newton=20, convergence_tol=1e-18))
    # independent oracle: damped fixed-point on the 2-bus closed form
    y = -g.Y[0, 1]
    y_sh = g.Y[1, 1] + g.Y[1, 0]
    v2 = g.v_nominal + 0j
    for _ in range(100_000):
        rhs = np.conj((g.p0[1] + 1j * g.q0[1]) / v2) - y_sh * v2
        v2 = 0.5 * v2 + 0.5 * (g.v_nominal + rhs / y)
    got = st.x[1] + 1j * st.x[3]
    assert abs(abs(got) - abs(v2)) / abs(v2) <= 1e-8


@pytest.mark.parametrize("name", ["two_bus", "three_bus", "ten_bus", "rural18"])
def test_lu_and_gmres_paths_agree(name):
    g = gr.bundled_grid(name)
    st_lu = pf.newton_solve(g, pf.SolverConfig(solver="lu", max_newton=25,
                                               convergence_tol=1e-16))
    st_gm = pf.newton_solve(g, pf.SolverConfig(solver="gmres", max_newton=25,
                                               convergence_tol=1e-16))
    rel = np.linalg.norm(st_lu.x - st_gm.x) / np.linalg.norm(st_lu.x)
    assert rel <= 1e-6


def test_descent_on_accepted_steps():
    for name in ("two_bus", "three_bus", "ten_bus", "rural18", "two_bus_stressed"):
        g = gr.bundled_grid(name)
        st = pf.newton_solve(g, pf.SolverConfig(max_newton=25, convergence_tol=1e-16),
                             raise_on_fail=False)
        seq = [r["residual_sq"] for r in st.trace]
        f0 = pf.compute_F(pf.flat_start(g), g)
        first = float(f0 @ f0) / g.v_nominal**4
        seq = [first] + seq
        for a, b in zip(seq, seq[1:]):
            if a > 1e-24:  # ignore floating-point floor churn
                assert b < a


def test_not_converged_diagnostics():
    g = gr.bundled_grid("two_bus_stressed")
    with pytest.raises(NotConverged) as exc:
        pf.newton_solve(g, pf.SolverConfig(max_newton=1, convergence_tol=1e-20))
    assert exc.value.state is not None
    assert exc.value.state.k == 1


# --- magnitudes -------------------------------------------------------------------------


def test_magnitudes_flat_start():
    g = gr.bundled_grid("three_bus")
    vm, ib = pf.magnitudes(pf.flat_start(g), g)
    np.testing.assert_allclose(vm, g.v_nominal)
    np.testing.assert_allclose(ib, 0.0)


def test_magnitudes_vs_complex_oracle():
    g = gr.bundled_grid("ten_bus")
    rng = np.random.default_rng(7)
    for _ in range(1000):
        x = random_state(g, rng)
        vm, ib = pf.magnitudes(x, g)
        v = x[: g.n] + 1j * x[g.n :]
        np.testing.assert_allclose(vm, np.abs(v), rtol=1e-12)
        for k, br in enumerate(g.branches):
            expected = abs((br.g + 1j * br.b) * (v[br.f] - v[br.t]))
            assert ib[k] == pytest.approx(expected, rel=1e-12)


def test_slack_magnitude_pinned():
    g = gr.bundled_grid("rural18")
    st = pf.newton_solve(g, pf.SolverConfig(max_newton=25))
    vm, _ = pf.magnitudes(st.x, g)
    assert vm[g.slack] == g.v_nominal
