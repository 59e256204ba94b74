"""Nonlinear least-squares solver: layout, linear algebra, and LM behavior."""

import numpy as np
import pytest

from spintrack import physics
from spintrack.core import NoiseSpec, SpinPrior
from spintrack.graph import FactorGraph, VariableKey, VarKind
from spintrack.solver import (
    IncrementalSolver,
    Layout,
    SolverConfig,
    UnderconstrainedError,
    Values,
    build_normal_equations,
    evaluate_blocks,
    linearize,
    marginal_sigmas,
    retract,
    solve_batch,
    solve_normal_equations,
    unconstrained_keys,
)
from spintrack.solver import _JacSource


def _sim_graph(cameras, params, n=25, rate=100.0, n_cams=4, pixel_noise=0.0, seed=0):
    """Chain graph over a simulated flight with exact or noisy projections."""
    rng = np.random.default_rng(seed)
    state = physics.FlightState(L=[-10.0, 0.5, 1.5], V=[22.0, 1.0, 2.5], W=[30.0, 180.0, -20.0])
    traj = physics.integrate(state, (n + 1) / rate, 1e-4, params)
    g = FactorGraph(cameras, params, NoiseSpec())
    truth = Values.for_graph(g)
    ts = np.arange(n) / rate
    tids = []
    for i, t in enumerate(ts):
        tid = g.add_timestamp(float(t))
        tids.append(tid)
        st = traj.state_at(float(t))
        truth.resize(g.n_times, g.n_spins)
        truth.loc[tid] = st.L
        truth.vel[tid] = st.V
        truth.spin[0] = st.W
        for cam in cameras[:n_cams]:
            if cam.in_view(st.L):
                pixel, _ = cam.project(st.L)
                g.add_projection(cam.camera_id, tid, pixel + rng.normal(0, pixel_noise, 2), sigma=1.0)
    for a, b in zip(tids, tids[1:]):
        g.add_location(a, b)
        g.add_aero(a, b, 0)
    g.set_spin_prior(SpinPrior(spin=truth.spin[0].copy(), sigma=np.full(3, 5.0)))
    return g, truth


def _dense_reference_delta(g, values, lam, frozen_cols=0):
    """Damped normal-equation step from the scipy-sparse linearization."""
    ls = linearize(g, values)
    J = ls.J.toarray()
    H = J.T @ J
    grad = J.T @ ls.b  # b = -r, so this is the descent gradient
    Hd = H + lam * (np.diag(np.diag(H)) + np.eye(H.shape[0]))
    m = frozen_cols
    delta = np.zeros(H.shape[0])
    delta[m:] = np.linalg.solve(Hd[m:, m:], grad[m:])
    return delta


def test_solve_normal_equations_matches_dense(cameras, params, rng):
    g, truth = _sim_graph(cameras, params)
    values = truth.copy()
    values.loc += rng.normal(0, 0.01, values.loc.shape)
    values.vel += rng.normal(0, 0.1, values.vel.shape)
    layout = Layout(g)
    ev = evaluate_blocks(g, values, with_jac=True)
    ne = build_normal_equations(g, layout, values, _JacSource.from_eval(g, ev), ev=ev)
    for lam in (1e-6, 1e-2, 1.0):
        delta = solve_normal_equations(ne, lam)
        ref = _dense_reference_delta(g, values, lam)
        np.testing.assert_allclose(delta, ref, rtol=1e-8, atol=1e-12)


def test_solve_normal_equations_frozen_prefix(cameras, params, rng):
    g, truth = _sim_graph(cameras, params)
    values = truth.copy()
    values.loc += rng.normal(0, 0.01, values.loc.shape)
    layout = Layout(g)
    ev = evaluate_blocks(g, values, with_jac=True)
    ne = build_normal_equations(g, layout, values, _JacSource.from_eval(g, ev), ev=ev)
    m = 6 * 10  # freeze the first 10 timestamps
    delta = solve_normal_equations(ne, 1e-4, frozen_cols=m)
    np.testing.assert_allclose(delta[:m], 0.0)
    ref = _dense_reference_delta(g, values, 1e-4, frozen_cols=m)
    np.testing.assert_allclose(delta, ref, rtol=1e-8, atol=1e-12)


def test_retract_applies_interleaved_step(cameras, params):
    g, truth = _sim_graph(cameras, params, n=4)
    layout = Layout(g)
    delta = np.arange(layout.n_total, dtype=float) * 1e-3
    out = retract(truth, layout, delta)
    tid0 = layout.order[0]
    np.testing.assert_allclose(out.loc[tid0] - truth.loc[tid0], delta[0:3])
    np.testing.assert_allclose(out.vel[tid0] - truth.vel[tid0], delta[3:6])
    np.testing.assert_allclose(out.spin[0] - truth.spin[0], delta[layout.spin_base :])


def test_solve_batch_recovers_truth_noiseless(cameras, params, rng):
    g, truth = _sim_graph(cameras, params, pixel_noise=0.0)
    init = truth.copy()
    init.loc += rng.normal(0, 0.05, init.loc.shape)
    init.vel += rng.normal(0, 0.5, init.vel.shape)
    init.spin += rng.normal(0, 10.0, init.spin.shape)
    values, report = solve_batch(g, init, SolverConfig(cost_tol=1e-14, max_iter=100))
    assert report.converged
    # the dynamics factors take single forward-Euler steps between detections,
    # so the RK4-integrated truth leaves a small discretization residual
    assert report.final_cost < 1e-2
    assert report.final_cost < 1e-3 * report.initial_cost
    np.testing.assert_allclose(values.loc, truth.loc, atol=1e-3)
    np.testing.assert_allclose(values.vel, truth.vel, atol=1e-1)


def test_solve_batch_reduces_cost_with_noise(cameras, params, rng):
    g, truth = _sim_graph(cameras, params, pixel_noise=1.0)
    init = truth.copy()
    init.loc += rng.normal(0, 0.05, init.loc.shape)
    values, report = solve_batch(g, init, SolverConfig())
    assert report.converged
    assert report.final_cost < report.initial_cost
    # 1 px noise, strong geometry: recovery to centimeters
    assert np.abs(values.loc - truth.loc).max() < 0.05


def test_unconstrained_detection(cameras, params):
    g = FactorGraph(cameras, params, NoiseSpec())
    tid = g.add_timestamp(0.0)
    pixel, _ = cameras[0].project(np.array([0.0, 0.0, 1.0]))
    g.add_projection(cameras[0].camera_id, tid, pixel, 1.0)
    free = unconstrained_keys(g)
    assert VariableKey(VarKind.VELOCITY, tid) in free  # no kinematic factor yet
    v = Values.for_graph(g)
    v.loc[tid] = [0.1, 0.1, 1.1]
    with pytest.raises(UnderconstrainedError):
        solve_batch(g, v, SolverConfig(allow_free=False))
    values, report = solve_batch(g, v, SolverConfig(allow_free=True))
    assert report.converged
    np.testing.assert_allclose(values.vel[tid], v.vel[tid])  # free var untouched


def test_marginals_match_dense_inverse(cameras, params, rng):
    g, truth = _sim_graph(cameras, params, n=12)
    values, _ = solve_batch(g, truth, SolverConfig())
    keys = [
        VariableKey(VarKind.LOCATION, g.order[-1]),
        VariableKey(VarKind.VELOCITY, g.order[-1]),
        VariableKey(VarKind.SPIN, 0),
    ]
    sig = marginal_sigmas(g, values, keys)
    ls = linearize(g, values)
    H = (ls.J.T @ ls.J).toarray()
    cov = np.linalg.inv(H)
    for k in keys:
        c0, d = ls.column_map[k]
        np.testing.assert_allclose(sig[k], np.sqrt(np.diag(cov)[c0 : c0 + d]), rtol=1e-6)


def test_incremental_matches_batch_as_graph_grows(cameras, params, rng):
    g = FactorGraph(cameras, params, NoiseSpec())
    solver = IncrementalSolver(g, SolverConfig(allow_free=True, cost_tol=1e-12, relin_threshold=0.0))
    state = physics.FlightState(L=[-10.0, 0.5, 1.5], V=[22.0, 1.0, 2.5], W=[30.0, 180.0, -20.0])
    traj = physics.integrate(state, 0.3, 1e-4, params)
    cfg_batch = SolverConfig(allow_free=True, cost_tol=1e-12)
    prev_tid = None
    for i, t in enumerate(np.arange(20) / 100.0):
        st = traj.state_at(float(t))
        tid = g.add_timestamp(float(t))
        solver.values.resize(g.n_times, g.n_spins)
        solver.values.loc[tid] = st.L + rng.normal(0, 0.02, 3)
        solver.values.vel[tid] = st.V
        if i == 0:
            solver.values.spin[0] = st.W
            g.set_spin_prior(SpinPrior(spin=st.W.copy(), sigma=np.full(3, 5.0)))
        for cam in cameras[:3]:
            if cam.in_view(st.L):
                pixel, _ = cam.project(st.L)
                g.add_projection(cam.camera_id, tid, pixel + rng.normal(0, 0.5, 2), 1.0)
        if prev_tid is not None:
            g.add_location(prev_tid, tid)
            g.add_aero(prev_tid, tid, 0)
        prev_tid = tid
        v_inc, _ = solver.update()
        v_batch, _ = solve_batch(g, v_inc, cfg_batch)
        np.testing.assert_allclose(v_inc.loc[: g.n_times], v_batch.loc[: g.n_times], atol=2e-6)
        np.testing.assert_allclose(v_inc.vel[: g.n_times], v_batch.vel[: g.n_times], atol=2e-6)


def test_values_get_set_roundtrip():
    v = Values(n_times=2, n_spins=1)
    k = VariableKey(VarKind.VELOCITY, 1)
    v.set(k, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(v.get(k), [1.0, 2.0, 3.0])
    c = v.copy()
    c.vel[1] = 0.0
    np.testing.assert_allclose(v.vel[1], [1.0, 2.0, 3.0])  # deep copy


def test_lag_window_freezes_old_states(cameras, params, rng):
    g, truth = _sim_graph(cameras, params, n=30, pixel_noise=0.5, seed=3)
    init = truth.copy()
    init.loc += rng.normal(0, 0.02, init.loc.shape)
    frozen = init.copy()
    values, report = solve_batch(g, init, SolverConfig(lag_window=0.1))
    assert report.converged
    times = g.timestamps.data[np.asarray(g.order)]
    old = np.asarray(g.order)[times < times[-1] - 0.1]
    recent = np.asarray(g.order)[times >= times[-1] - 0.1]
    np.testing.assert_allclose(values.loc[old], frozen.loc[old])  # untouched
    assert np.abs(values.loc[recent] - frozen.loc[recent]).max() > 0  # optimized
