"""EKF and adaptive-EKF (AEKF) comparison trackers.

Both filters share the physics module with the factor-graph estimator.
The EKF tracks (L, V) and treats spin as zero; the AEKF appends the spin
W to the state, inflating its process noise before the first bounce
(while the lift curvature makes it observable) and pinning it afterwards.
Transition Jacobians come from finite differences of the RK4 flight map;
when a ground contact falls inside a prediction step, the bounce map is
applied to the mean and its constant Jacobian pushes the covariance
through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import physics
from .core import CameraModel, Detection, PhysicsParams
from .estimator import EstimateSnapshot
from .graph import MIN_DEPTH, projection_kernel
from .physics import FlightState, LandingPrediction
from .solver import SolveReport

_FD_EPS = 1e-6
_MAX_SUBSTEP = 2.5e-3  # RK4 substep cap inside one prediction


@dataclass
class KalmanState:
    """Filter state: mean is (L, V) for the EKF or (L, V, W) for the AEKF."""

    mean: np.ndarray  # (6,) or (9,)
    covariance: np.ndarray  # matching square matrix
    t: float
    n_bounces: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        d = self.mean.size
        if d not in (6, 9) or self.covariance.shape != (d, d):
            raise ValueError(f"state must be 6 or 9 dimensional with matching covariance, got {d}")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def spin(self) -> np.ndarray:
        return self.mean[6:9] if self.dim == 9 else np.zeros(3)

    def copy(self) -> "KalmanState":
        return KalmanState(self.mean.copy(), self.covariance.copy(), self.t, self.n_bounces)


def _symmetrize_psd(P: np.ndarray) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues to zero."""
    P = 0.5 * (P + P.T)
    w, U = np.linalg.eigh(P)
    if w[0] < 0.0:
        P = (U * np.maximum(w, 0.0)) @ U.T
        P = 0.5 * (P + P.T)
    return P


def _flight_map(X: np.ndarray, h: float, params: PhysicsParams, spin_in_state: bool) -> np.ndarray:
    """Batched RK4 propagation of stacked states over h (no ground contact)."""
    L = X[:, :3].copy()
    V = X[:, 3:6].copy()
    W = np.ascontiguousarray(X[:, 6:9]) if spin_in_state else np.zeros_like(V)
    n_sub = max(1, int(np.ceil(h / _MAX_SUBSTEP)))
    hs = h / n_sub
    for _ in range(n_sub):
        k1v = physics.acceleration_fast(V, W, params)
        v2 = V + 0.5 * hs * k1v
        k2v = physics.acceleration_fast(v2, W, params)
        v3 = V + 0.5 * hs * k2v
        k3v = physics.acceleration_fast(v3, W, params)
        v4 = V + hs * k3v
        k4v = physics.acceleration_fast(v4, W, params)
        L += (hs / 6.0) * (V + 2.0 * v2 + 2.0 * v3 + v4)
        V += (hs / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    out = X.copy()
    out[:, :3] = L
    out[:, 3:6] = V
    return out


def _flight_state(mean: np.ndarray, t: float) -> FlightState:
    W = mean[6:9] if mean.size == 9 else np.zeros(3)
    return FlightState(t=t, L=mean[:3].copy(), V=mean[3:6].copy(), W=W.copy())


def _as_matrix(process_noise, dim: int) -> np.ndarray:
    Q = np.asarray(process_noise, dtype=float)
    if Q.ndim == 1:
        if Q.size != dim:
            raise ValueError(f"process noise diagonal must have {dim} entries")
        return np.diag(Q)
    if Q.shape != (dim, dim):
        raise ValueError(f"process noise must be ({dim},{dim}) or ({dim},)")
    return Q


def ekf_predict(state: KalmanState, dt: float, params: PhysicsParams, process_noise) -> KalmanState:
    """Propagate mean (RK4) and covariance (FD transition Jacobian) over dt.

    Spin is held at zero (6-state) or constant (9-state). Process noise is
    a per-second diagonal or matrix, scaled by the elapsed time. A ground
    contact inside the step applies the bounce map to the mean and its
    constant 6x6 matrix to the covariance.
    """
    if dt < 0:
        raise ValueError(f"prediction needs dt >= 0, got {dt}")
    out = state.copy()
    if dt == 0.0:
        return out
    dim = out.dim
    spin_in_state = dim == 9
    Q = _as_matrix(process_noise, dim)
    t = out.t
    t_end = out.t + dt
    M = physics.bounce_matrix(params)
    for _ in range(8):  # at most a few contacts fit inside one step
        rem = t_end - t
        if rem <= 1e-12:
            break
        # locate the next contact of the mean trajectory inside the window
        traj = physics.integrate(
            _flight_state(out.mean, t), rem, min(1e-3, rem), params, max_bounces=1
        )
        t_c = None
        if traj.bounces and traj.bounces[0].time < t_end - 1e-12:
            t_c = traj.bounces[0].time
        h = (t_c if t_c is not None else t_end) - t
        if h > 1e-12:
            X = np.tile(out.mean, (dim + 1, 1))
            eps = _FD_EPS * np.maximum(1.0, np.abs(out.mean))
            X[1:] += np.diag(eps)
            Y = _flight_map(X, h, params, spin_in_state)
            out.mean = Y[0]
            F = (Y[1:] - Y[0]).T / eps[None, :]
            out.covariance = F @ out.covariance @ F.T + Q * h
        t = t_c if t_c is not None else t_end
        if t_c is not None and out.mean[5] < 0.0:
            V_out, W_out = physics.bounce_map(out.mean[3:6], out.spin, params)
            out.mean[2] = params.contact_z
            out.mean[3:6] = V_out
            B = np.eye(dim)
            if spin_in_state:
                out.mean[6:9] = W_out
                B[3:9, 3:9] = M
            else:
                B[3:6, 3:6] = M[:3, :3]
            out.covariance = B @ out.covariance @ B.T
            out.n_bounces += 1
    out.covariance = _symmetrize_psd(out.covariance)
    out.t = t_end
    return out


def ekf_update(
    state: KalmanState,
    detection: Detection,
    camera: CameraModel,
    gate_sigma: float = 5.0,
) -> KalmanState:
    """Joseph-form pixel measurement update with innovation gating.

    Points behind the camera and innovations beyond gate_sigma (Mahalanobis
    per measurement dimension) leave the state untouched.
    """
    L = state.mean[:3]
    depth = (camera.rotation @ L + camera.translation)[2]
    if depth < MIN_DEPTH:
        return state.copy()
    r, J_L, _, _ = projection_kernel(
        camera.rotation[None],
        camera.translation[None],
        np.array([camera.fx]),
        np.array([camera.fy]),
        L[None],
        (detection.pixel - np.array([camera.cx, camera.cy]))[None],
    )
    y = r[0]
    dim = state.dim
    H = np.zeros((2, dim))
    H[:, :3] = -J_L[0]  # measurement Jacobian; the kernel returns d(residual)/dL
    Rm = detection.pixel_sigma**2 * np.eye(2)
    P = state.covariance
    S = H @ P @ H.T + Rm
    d2 = float(y @ np.linalg.solve(S, y))
    if d2 > gate_sigma**2 * y.size:
        return state.copy()
    K = P @ H.T @ np.linalg.inv(S)
    out = state.copy()
    out.mean = state.mean + K @ y
    IKH = np.eye(dim) - K @ H
    out.covariance = _symmetrize_psd(IKH @ P @ IKH.T + K @ Rm @ K.T)
    return out


def baseline_landing(state: KalmanState, params: PhysicsParams) -> LandingPrediction:
    """Landing prediction by integrating the filter mean (EKF spin is zero)."""
    return physics.predict_landings(_flight_state(state.mean, state.t), params)


# ---------------------------------------------------------------------------
# streaming wrapper


@dataclass(frozen=True)
class BaselineConfig:
    # per-second process noise densities
    q_loc: float = 1e-6  # m^2/s
    q_vel: float = 9.0  # (m/s)^2/s; absorbs the unmodeled lift in the EKF
    q_vel_aekf: float = 1.0  # smaller: the AEKF models the lift
    q_spin_preflight: float = (2 * np.pi * 20.0) ** 2  # rad^2/s^3 before bounce 1
    q_spin_settled: float = 1e-8  # spin pinned after the first bounce
    gate_sigma: float = 5.0
    init_window: float = 0.05  # s of detections buffered for triangulation
    init_min_detections: int = 6
    init_pos_sigma: float = 0.2  # m
    init_vel_sigma: float = 5.0  # m/s
    init_spin_sigma: float = 2 * np.pi * 30.0  # rad/s
    # seed magnitude for the AEKF spin state; the lift model observes only
    # the spin direction in flight, so the magnitude stays near this value
    # until the first bounce pins it (same nominal rate the graph uses)
    init_spin: float = 2 * np.pi * 30.0  # rad/s
    late_tolerance: float = 0.05  # s


class BaselineTracker:
    """Streams detections through an EKF or AEKF; mirrors Estimator.ingest.

    The filter is initialized by a linear ray fit L(t) = L0 + V0 (t - t0)
    over a short startup buffer, then every detection is one
    predict-to-timestamp plus one gated measurement update.
    """

    def __init__(
        self,
        cameras: list[CameraModel],
        params: PhysicsParams | None = None,
        method: str = "ekf",
        config: BaselineConfig | None = None,
    ):
        if method not in ("ekf", "aekf"):
            raise ValueError(f"method must be 'ekf' or 'aekf', got {method!r}")
        self.cameras = {c.camera_id: c for c in cameras}
        self.params = params or PhysicsParams()
        self.method = method
        self.config = config or BaselineConfig()
        self.state: KalmanState | None = None
        self._buffer: list[Detection] = []
        self.n_ingested = 0
        self.n_dropped_late = 0
        self.n_gated = 0

    @property
    def dim(self) -> int:
        return 9 if self.method == "aekf" else 6

    def _process_noise(self, state: KalmanState) -> np.ndarray:
        c = self.config
        if self.dim == 6:
            return np.array([c.q_loc] * 3 + [c.q_vel] * 3)
        q_w = c.q_spin_preflight if state.n_bounces == 0 else c.q_spin_settled
        return np.array([c.q_loc] * 3 + [c.q_vel_aekf] * 3 + [q_w] * 3)

    def _try_initialize(self) -> bool:
        c = self.config
        buf = self._buffer
        if len(buf) < c.init_min_detections:
            return False
        ts = [d.timestamp for d in buf]
        if max(ts) - min(ts) < c.init_window or len({d.camera_id for d in buf}) < 2:
            return False
        t0 = min(ts)
        rows, rhs = [], []
        for d in buf:
            cam = self.cameras[d.camera_id]
            o, ray = cam.back_project(d.pixel)
            Pm = np.eye(3) - np.outer(ray, ray)
            tau = d.timestamp - t0
            rows.append(np.hstack([Pm, tau * Pm]))
            rhs.append(Pm @ o)
        A = np.vstack(rows)
        b = np.concatenate(rhs)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        mean = np.zeros(self.dim)
        mean[:6] = sol
        P = np.zeros((self.dim, self.dim))
        P[:3, :3] = c.init_pos_sigma**2 * np.eye(3)
        P[3:6, 3:6] = c.init_vel_sigma**2 * np.eye(3)
        if self.dim == 9:
            # exact zero spin is a stationary point of the normalized lift
            # model; seed at the nominal magnitude like the graph estimator
            mean[6:9] = np.full(3, c.init_spin / np.sqrt(3.0))
            P[6:9, 6:9] = c.init_spin_sigma**2 * np.eye(3)
        self.state = KalmanState(mean, P, t0)
        for d in sorted(buf, key=lambda x: x.timestamp):
            self._step(d)
        self._buffer = []
        return True

    def _step(self, det: Detection) -> None:
        st = self.state
        dt = det.timestamp - st.t
        if dt < -self.config.late_tolerance:
            self.n_dropped_late += 1
            return
        if dt > 0:
            st = ekf_predict(st, dt, self.params, self._process_noise(st))
        updated = ekf_update(st, det, self.cameras[det.camera_id], self.config.gate_sigma)
        if updated.mean is not st.mean and np.array_equal(updated.mean, st.mean):
            self.n_gated += 1
        self.state = updated

    def ingest(self, det: Detection, snapshot: bool = True) -> EstimateSnapshot | None:
        if det.camera_id not in self.cameras:
            raise KeyError(f"detection references unknown camera {det.camera_id}")
        self.n_ingested += 1
        if self.state is None:
            self._buffer.append(det)
            self._try_initialize()
        else:
            self._step(det)
        return self.snapshot() if snapshot else None

    def snapshot(self) -> EstimateSnapshot | None:
        st = self.state
        if st is None:
            return None
        try:
            landing = baseline_landing(st, self.params)
        except physics.IntegrationError:
            landing = None
        return EstimateSnapshot(
            t=st.t,
            location=st.mean[:3].copy(),
            velocity=st.mean[3:6].copy(),
            spin=st.spin.copy(),
            segment=st.n_bounces,
            n_bounces=st.n_bounces,
            n_detections=self.n_ingested,
            landing=landing,
            report=SolveReport(),
        )
