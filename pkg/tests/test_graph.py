"""Factor residuals, whitening, and graph bookkeeping."""

import numpy as np
import pytest

from spintrack import so3
from spintrack.core import NoiseSpec, SpinPrior
from spintrack.graph import (
    CheiralityError,
    FactorGraph,
    VariableKey,
    VarKind,
    aero_residual,
    bounce_residual,
    evaluate_blocks,
    location_residual,
    pose_prior_residual,
    potential,
    prior_residual,
    projection_residual,
    whiten,
)
from spintrack.solver import Values


def test_whiten_scales_rows():
    r = prior_residual(np.array([1.0, 2.0, 3.0]), np.zeros(3))
    w = whiten(r, np.array([1.0, 2.0, 4.0]))
    np.testing.assert_allclose(w.value, [1.0, 1.0, 0.75])
    J = w.jacobians[VariableKey(VarKind.SPIN, 0)]
    np.testing.assert_allclose(J, np.diag([1.0, 0.5, 0.25]))
    with pytest.raises(ValueError):
        whiten(r, np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        whiten(r, np.ones(2))


def test_potential_is_gaussian():
    r = prior_residual(np.zeros(3), np.zeros(3))
    assert potential(r) == pytest.approx(1.0)
    r = prior_residual(np.array([2.0, 0.0, 0.0]), np.zeros(3))
    assert potential(r) == pytest.approx(np.exp(-2.0))


def test_projection_residual_zero_at_truth(cameras):
    cam = cameras[0]
    point = np.array([0.0, 1.0, 1.0])
    pixel, _ = cam.project(point)
    r = projection_residual(cam, point, pixel)
    np.testing.assert_allclose(r.value, 0.0, atol=1e-9)


def test_projection_residual_cheirality(cameras):
    cam = cameras[0]
    behind = -cam.rotation.T @ cam.translation + cam.rotation.T @ np.array([0.0, 0.0, -1.0])
    with pytest.raises(CheiralityError):
        projection_residual(cam, behind, np.array([720.0, 540.0]))


def test_location_residual_exact_on_linear_motion():
    L = np.array([1.0, 2.0, 3.0])
    V = np.array([10.0, 0.0, -1.0])
    dt = 0.01
    r = location_residual(L, V, L + V * dt, dt)
    np.testing.assert_allclose(r.value, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        location_residual(L, V, L, 0.0)


def test_aero_residual_zero_on_euler_step(params):
    from spintrack.physics import acceleration

    V = np.array([20.0, 1.0, -2.0])
    W = np.array([50.0, 200.0, 0.0])
    dt = 0.007
    V_next = V + acceleration(V, W, params) * dt
    r = aero_residual(V, V_next, W, dt, params)
    np.testing.assert_allclose(r.value, 0.0, atol=1e-12)


def test_bounce_residual_zero_on_bounce_map(params):
    from spintrack.physics import bounce_map

    V_in = np.array([15.0, 2.0, -4.0])
    W_in = np.array([0.0, 250.0, 30.0])
    V_out, W_out = bounce_map(V_in, W_in, params)
    r = bounce_residual(V_in, W_in, V_out, W_out, params)
    np.testing.assert_allclose(r.value, 0.0, atol=1e-12)


def test_pose_prior_residual_zero_at_prior(cameras):
    cam = cameras[0]
    r = pose_prior_residual(cam.rotation, cam.translation, cam.rotation, cam.translation)
    np.testing.assert_allclose(r.value, 0.0, atol=1e-12)
    # a small right-perturbation shows up as its rotation vector
    dw = np.array([1e-3, -2e-3, 5e-4])
    r = pose_prior_residual(cam.rotation @ so3.exp(dw), cam.translation, cam.rotation, cam.translation)
    np.testing.assert_allclose(r.value[:3], dw, atol=1e-9)


def _chain_graph(cameras, params, n=5, dt=0.01):
    g = FactorGraph(cameras, params, NoiseSpec())
    tids = [g.add_timestamp(i * dt) for i in range(n)]
    for a, b in zip(tids, tids[1:]):
        g.add_location(a, b)
        g.add_aero(a, b, 0)
    return g, tids


def test_graph_chain_bookkeeping(cameras, params):
    g, tids = _chain_graph(cameras, params)
    assert g.n_times == 5
    assert g.n_spins == 1
    counts = g.factor_counts()
    assert counts["location"] == 4 and counts["aero"] == 4
    assert g.order == tids  # appended in time order
    keys = g.variable_keys()
    assert VariableKey(VarKind.LOCATION, tids[0]) in keys
    assert VariableKey(VarKind.SPIN, 0) in keys


def test_graph_splice_timestamp(cameras, params):
    g, tids = _chain_graph(cameras, params)
    epoch = g.layout_epoch
    tid = g.splice_timestamp(0.015)  # between tids[1] and tids[2]
    assert g.layout_epoch > epoch  # non-tail insert must invalidate layouts
    assert g.l_a.n == 5 and g.a_a.n == 5  # one interval replaced by two
    pos = g.order.index(tid)
    assert g.order[pos - 1] == tids[1] and g.order[pos + 1] == tids[2]
    # the old spanning factors are gone
    assert not np.any((g.l_a.data == tids[1]) & (g.l_b.data == tids[2]))


def test_graph_insert_and_remove_bounce(cameras, params):
    g, tids = _chain_graph(cameras, params)
    t_b = 0.025
    seg = g.insert_bounce(tids[2], tids[3], t_b)
    assert seg == 1
    assert g.n_spins == 2
    assert g.bounce_times == [t_b]
    assert g.b_a.n == 1 and g.a_a.n == 3
    # aero factors after the bounce moved to the new segment
    after = g.timestamps.data[g.a_a.data] >= t_b
    assert np.all(g.a_seg.data[after] == 1)
    assert np.all(g.a_seg.data[~after] == 0)
    # spanning location factor noise is inflated
    il = np.nonzero((g.l_a.data == tids[2]) & (g.l_b.data == tids[3]))[0][0]
    np.testing.assert_allclose(
        g.l_sigma.data[il], g.noise.location_sigma * g.noise.bounce_location_inflation
    )
    g.remove_bounce(0)
    assert g.n_spins == 1
    assert g.bounce_times == []
    assert g.a_a.n == 4 and g.b_a.n == 0
    assert np.all(g.a_seg.data == 0)
    np.testing.assert_allclose(g.l_sigma.data[:, 0].max(), g.noise.location_sigma)


def test_spin_prior_epoch_semantics(cameras, params):
    g, _ = _chain_graph(cameras, params)
    g.set_spin_prior(SpinPrior(spin=np.zeros(3), sigma=np.full(3, 10.0)))
    epoch = g.layout_epoch
    # mean-only move: no epoch bump (incremental caches stay valid)
    g.set_spin_prior(SpinPrior(spin=np.array([1.0, 2.0, 3.0]), sigma=np.full(3, 10.0)))
    assert g.layout_epoch == epoch
    # sigma change rewhitens the factor: must bump
    g.set_spin_prior(SpinPrior(spin=np.array([1.0, 2.0, 3.0]), sigma=np.full(3, 20.0)))
    assert g.layout_epoch > epoch


def test_evaluate_blocks_matches_single_factors(cameras, params, rng):
    g, tids = _chain_graph(cameras, params)
    g.set_spin_prior(SpinPrior(spin=np.zeros(3), sigma=np.full(3, 10.0)))
    cam = cameras[0]
    v = Values.for_graph(g)
    for tid in tids:
        v.loc[tid] = rng.normal(size=3) + np.array([0.0, 0.0, 2.0])
        v.vel[tid] = rng.normal(size=3) * 5
    v.spin[0] = rng.normal(size=3) * 100
    pixel, _ = cam.project(v.loc[tids[0]] + rng.normal(size=3) * 0.01)
    g.add_projection(cam.camera_id, tids[0], pixel, sigma=2.0)

    ev = evaluate_blocks(g, v, with_jac=True, whitened=True)
    # projection block vs single-factor surface
    r_single = projection_residual(cam, v.loc[tids[0]], pixel)
    np.testing.assert_allclose(ev.proj_r[0], r_single.value / 2.0, rtol=1e-12)
    np.testing.assert_allclose(
        ev.proj_JL[0], r_single.jacobians[VariableKey(VarKind.LOCATION, tids[0])] / 2.0, rtol=1e-12
    )
    # location block
    i = 0
    a, b = int(g.l_a.data[i]), int(g.l_b.data[i])
    r_loc = location_residual(v.loc[a], v.vel[a], v.loc[b], float(g.l_dt.data[i]))
    np.testing.assert_allclose(ev.loc_r[i], r_loc.value / g.l_sigma.data[i], rtol=1e-12)
    # aero block
    r_aero = aero_residual(v.vel[a], v.vel[b], v.spin[0], float(g.a_dt.data[i]), params)
    np.testing.assert_allclose(ev.aero_r[i], r_aero.value / g.a_sigma.data[i], rtol=1e-10)
    # spin prior
    np.testing.assert_allclose(ev.spin_prior_r, v.spin[0] / 10.0, rtol=1e-12)
    # cost equals half the squared whitened residual norm
    total = (
        np.sum(ev.proj_r**2) + np.sum(ev.loc_r**2) + np.sum(ev.aero_r**2) + np.sum(ev.spin_prior_r**2)
    )
    assert ev.cost() == pytest.approx(0.5 * total)


def test_graph_dump(tmp_path, cameras, params):
    import json

    g, tids = _chain_graph(cameras, params)
    v = Values.for_graph(g)
    for tid in tids:
        v.loc[tid] = [0.0, 0.0, 1.0]
        v.vel[tid] = [10.0, 0.0, 0.0]
    path = tmp_path / "dump.jsonl"
    g.dump(v, path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == g.n_factors()
    assert {r["kind"] for r in recs} == {"location", "aero"}
