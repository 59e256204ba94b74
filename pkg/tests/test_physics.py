"""Forces, bounce map, and integrator behavior (unit-level checks)."""

import numpy as np
import pytest

from spintrack import physics
from spintrack.core import PhysicsParams
from spintrack.physics import (
    FlightState,
    IntegrationError,
    acceleration,
    acceleration_fast,
    acceleration_jacobians,
    bounce_map,
    bounce_matrix,
    drag_force,
    integrate,
    lift_force,
    predict_landings,
)


def test_drag_antiparallel_and_quadratic(params, rng):
    for _ in range(10):
        V = rng.normal(size=3) * 10
        F = drag_force(V, params)
        # antiparallel to V
        assert np.dot(F, V) < 0
        np.testing.assert_allclose(np.cross(F, V), 0.0, atol=1e-9)
        # quadratic in speed
        np.testing.assert_allclose(drag_force(2 * V, params), 4 * F, rtol=1e-12)


def test_drag_known_value(params):
    F = drag_force(np.array([10.0, 0.0, 0.0]), params)
    c = 0.5 * params.rho_air * params.area * params.drag_coeff
    np.testing.assert_allclose(F, [-c * 100.0, 0.0, 0.0], rtol=1e-12)


def test_lift_perpendicular_to_velocity(params, rng):
    for _ in range(10):
        V = rng.normal(size=3) * 10
        W = rng.normal(size=3) * 100
        F = lift_force(V, W, params)
        assert abs(np.dot(F, V)) < 1e-9 * np.linalg.norm(F) * np.linalg.norm(V) + 1e-12


def test_lift_normalized_magnitude_independent_of_spin_magnitude(params):
    V = np.array([20.0, 0.0, -1.0])
    W = np.array([0.0, 150.0, 10.0])
    F1 = lift_force(V, W, params)
    F2 = lift_force(V, 10.0 * W, params)
    np.testing.assert_allclose(F1, F2, rtol=1e-12)
    expected = 0.5 * params.rho_air * params.area * params.lift_coeff * np.dot(V, V)
    np.testing.assert_allclose(np.linalg.norm(F1), expected, rtol=1e-12)


def test_lift_zero_when_spin_parallel_or_zero(params):
    V = np.array([10.0, 0.0, 0.0])
    np.testing.assert_allclose(lift_force(V, np.zeros(3), params), 0.0)
    np.testing.assert_allclose(lift_force(V, 5.0 * V, params), 0.0)


def test_lift_paper_form_scales_with_cross_product():
    params = PhysicsParams(lift_form="paper")
    V = np.array([10.0, 0.0, 0.0])
    W = np.array([0.0, 100.0, 0.0])
    F1 = lift_force(V, W, params)
    F2 = lift_force(V, 2.0 * W, params)
    np.testing.assert_allclose(F2, 2.0 * F1, rtol=1e-12)


def test_acceleration_fast_matches_reference(params, rng):
    V = rng.normal(size=(50, 3)) * 15
    W = rng.normal(size=(50, 3)) * 200
    W[7] = 0.0  # exercise the cutoff branch
    W[11] = 3.0 * V[11]  # parallel: cross product vanishes
    np.testing.assert_allclose(acceleration_fast(V, W, params), acceleration(V, W, params), rtol=1e-12, atol=1e-12)


def test_acceleration_gravity_only_at_rest(params):
    np.testing.assert_allclose(acceleration(np.zeros(3), np.zeros(3), params), params.gravity)


@pytest.mark.parametrize("lift_form", ["normalized", "paper"])
def test_acceleration_jacobians_match_fd(lift_form, rng):
    params = PhysicsParams(lift_form=lift_form)
    eps = 1e-6
    for _ in range(20):
        V = rng.normal(size=3) * 12 + np.array([8.0, 0.0, 0.0])
        W = rng.normal(size=3) * 150
        dAdV, dAdW = acceleration_jacobians(V, W, params)
        for k in range(3):
            dv = np.zeros(3)
            dv[k] = eps
            fd = (acceleration(V + dv, W, params) - acceleration(V - dv, W, params)) / (2 * eps)
            np.testing.assert_allclose(dAdV[:, k], fd, rtol=1e-5, atol=1e-6)
            fd = (acceleration(V, W + dv, params) - acceleration(V, W - dv, params)) / (2 * eps)
            np.testing.assert_allclose(dAdW[:, k], fd, rtol=1e-5, atol=1e-6)


def test_acceleration_jacobians_zero_in_cutoff_cone(params):
    V = np.array([10.0, 0.0, 0.0])
    dAdV, dAdW = acceleration_jacobians(V, np.zeros(3), params)
    np.testing.assert_allclose(dAdW, 0.0)


def test_bounce_matrix_known_values(params):
    k = 1.5 * params.ball_radius**2 / params.shell_radius**2
    np.testing.assert_allclose(k, 1.59521484375, rtol=1e-10)
    M = bounce_matrix(params)
    # vertical velocity reflects with restitution, decoupled
    np.testing.assert_allclose(M[2], [0, 0, -params.restitution, 0, 0, 0], atol=1e-15)
    # vertical spin passes through
    np.testing.assert_allclose(M[5], [0, 0, 0, 0, 0, 1], atol=1e-15)


def test_bounce_map_oracle(params):
    V_in = np.array([10.0, 0.0, -5.0])
    W_in = np.array([0.0, 2 * np.pi * 30.0, 0.0])
    V_out, W_out = bounce_map(V_in, W_in, params)
    np.testing.assert_allclose(V_out, [8.543609383633632, 0.0, 3.75], rtol=1e-12)
    np.testing.assert_allclose(W_out[1], 258.897254049504, rtol=1e-12)
    np.testing.assert_allclose(W_out[[0, 2]], 0.0, atol=1e-15)


def test_bounce_map_requires_descending(params):
    with pytest.raises(ValueError):
        bounce_map(np.array([1.0, 0.0, 0.5]), np.zeros(3), params)


def test_bounce_rolling_identities(params, rng):
    R = params.ball_radius
    for _ in range(200):
        V_in = rng.normal(size=3) * 10
        V_in[2] = -abs(V_in[2]) - 0.1
        W_in = rng.normal(size=3) * 300
        V_out, W_out = bounce_map(V_in, W_in, params)
        # restitution on the normal component
        assert V_out[2] == pytest.approx(-params.restitution * V_in[2], rel=1e-14)
        # rolling without slip couples outbound spin and tangential velocity
        assert W_out[0] == pytest.approx(-V_out[1] / R, rel=1e-12, abs=1e-12)
        assert W_out[1] == pytest.approx(V_out[0] / R, rel=1e-12, abs=1e-12)
        assert W_out[2] == pytest.approx(W_in[2], rel=1e-14)


def test_integrate_basic_flight(params):
    state = FlightState(L=[0.0, 0.0, 1.5], V=[20.0, 0.0, 2.0], W=[0.0, 200.0, 0.0])
    traj = integrate(state, 2.0, 1e-3, params)
    assert len(traj) > 100
    assert np.all(np.diff(traj.t) > 0)
    assert len(traj.bounces) >= 1
    b = traj.bounces[0]
    assert b.position[2] == pytest.approx(params.contact_z, abs=1e-4)
    assert b.v_out[2] > 0  # rebounds upward
    # segment index increments at each bounce
    assert traj.segment.max() == len(traj.bounces)


def test_integrate_validates_args(params):
    state = FlightState(L=[0, 0, 1], V=[1, 0, 0], W=[0, 0, 0])
    with pytest.raises(ValueError):
        integrate(state, -1.0, 1e-3, params)
    with pytest.raises(ValueError):
        integrate(state, 1.0, 0.0, params)


def test_integrate_max_bounces_stops(params):
    state = FlightState(L=[0.0, 0.0, 1.5], V=[20.0, 0.0, 2.0], W=[0.0, 200.0, 0.0])
    traj = integrate(state, 10.0, 1e-3, params, max_bounces=1)
    assert len(traj.bounces) == 1
    assert traj.t[-1] == pytest.approx(traj.bounces[0].time)


def test_trajectory_state_at_interpolates(params):
    state = FlightState(L=[0.0, 0.0, 2.0], V=[15.0, 1.0, 1.0], W=[0.0, 150.0, 0.0])
    traj = integrate(state, 0.5, 1e-3, params, max_bounces=0 + 16)
    t_mid = 0.5 * (traj.t[10] + traj.t[11])
    st = traj.state_at(t_mid)
    np.testing.assert_allclose(st.L, 0.5 * (traj.L[10] + traj.L[11]), atol=1e-12)
    # exact sample times return the samples
    st = traj.state_at(float(traj.t[10]))
    np.testing.assert_allclose(st.L, traj.L[10], atol=1e-12)


def test_trajectory_sample_matches_state_at(params):
    state = FlightState(L=[0.0, 0.0, 2.0], V=[15.0, 1.0, 1.0], W=[0.0, 150.0, 0.0])
    traj = integrate(state, 0.5, 1e-3, params)
    ts = np.array([0.05, 0.123, 0.31])
    L, V, W = traj.sample(ts)
    for i, t in enumerate(ts):
        st = traj.state_at(float(t))
        np.testing.assert_allclose(L[i], st.L, atol=1e-12)
        np.testing.assert_allclose(V[i], st.V, atol=1e-12)
        np.testing.assert_allclose(W[i], st.W, atol=1e-12)


def test_predict_landings_orders_contacts(params):
    state = FlightState(L=[0.0, 0.0, 1.5], V=[22.0, 0.0, 1.0], W=[0.0, 250.0, 0.0])
    pl = predict_landings(state, params)
    assert pl.first is not None and pl.second is not None
    assert pl.second[1] > pl.first[1]
    assert not pl.truncated
    # short horizon truncates
    pl2 = predict_landings(state, params, horizon=0.01)
    assert pl2.first is None and pl2.truncated


def test_flight_state_validation():
    with pytest.raises(ValueError):
        FlightState(L=[0, 0], V=[0, 0, 0], W=[0, 0, 0])
    with pytest.raises(ValueError):
        FlightState(L=[0, 0, np.inf], V=[0, 0, 0], W=[0, 0, 0])


def test_integration_error_on_nonfinite(params):
    state = FlightState(L=[0, 0, 1e300], V=[1e300, 0, 0], W=[0, 0, 0])
    with pytest.raises(IntegrationError):
        integrate(state, 1.0, 1e-3, params)


def test_save_trajectory(tmp_path, params):
    import json

    state = FlightState(L=[0.0, 0.0, 1.5], V=[20.0, 0.0, 2.0], W=[0.0, 200.0, 0.0])
    traj = integrate(state, 0.2, 1e-2, params)
    path = tmp_path / "traj.jsonl"
    physics.save_trajectory(traj, path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == len(traj)
    np.testing.assert_allclose(recs[0]["L"], traj.L[0])
    assert recs[-1]["segment_index"] == int(traj.segment[-1])
