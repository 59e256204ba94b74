"""Flight forces, bounce map, and an RK4 integrator with ground-contact events.

This module is the single source of the ball dynamics: the simulator, the
factor residuals and the landing predictor all call into it. The integrator
hot loop is numba-compiled; the array-level force functions are plain numpy
and accept either a single 3-vector or an (n, 3) batch.

During flight the spin is constant (dW/dt = 0); it only changes through the
bounce map at ground contact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import PhysicsParams

_CROSS_EPS = 1e-9


class IntegrationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# forces (numpy, batched)


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def drag_force(V, params: PhysicsParams) -> np.ndarray:
    """Quadratic air drag, -1/2 rho A C_D |V| V. Antiparallel to V."""
    Vb, single = _batched(V)
    c = 0.5 * params.rho_air * params.area * params.drag_coeff
    F = -c * np.linalg.norm(Vb, axis=1, keepdims=True) * Vb
    return F[0] if single else F


def lift_force(V, W, params: PhysicsParams) -> np.ndarray:
    """Magnus lift.

    normalized form: 1/2 rho A C_L |V|^2 * unit(W x V), zero when W x V
    vanishes. paper form: 1/2 rho A C_L |V|^2 * (W x V).
    """
    Vb, single = _batched(V)
    Wb, _ = _batched(W)
    c = 0.5 * params.rho_air * params.area * params.lift_coeff
    u = np.cross(Wb, Vb)
    v2 = np.sum(Vb * Vb, axis=1, keepdims=True)
    if params.lift_form == "normalized":
        un = np.linalg.norm(u, axis=1, keepdims=True)
        scale = np.where(un < _CROSS_EPS, 0.0, 1.0 / np.maximum(un, _CROSS_EPS))
        F = c * v2 * u * scale
    else:
        F = c * v2 * u
    return F[0] if single else F


def acceleration(V, W, params: PhysicsParams) -> np.ndarray:
    """(F_D + F_L)/m + g."""
    Vb, single = _batched(V)
    Wb, _ = _batched(W)
    a = (drag_force(Vb, params) + lift_force(Vb, Wb, params)) / params.mass + params.gravity
    return a[0] if single else a


@njit(cache=True)
def _accel_batch(V, W, cD, cL, mass, gx, gy, gz, normalized):
    """Row-looped acceleration for hot residual evaluation; matches
    acceleration() including the lift cutoff at small |W x V|."""
    n = V.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        vx, vy, vz = V[i, 0], V[i, 1], V[i, 2]
        wx, wy, wz = W[i, 0], W[i, 1], W[i, 2]
        speed = np.sqrt(vx * vx + vy * vy + vz * vz)
        fx = -cD * speed * vx
        fy = -cD * speed * vy
        fz = -cD * speed * vz
        ux = wy * vz - wz * vy
        uy = wz * vx - wx * vz
        uz = wx * vy - wy * vx
        v2 = vx * vx + vy * vy + vz * vz
        if normalized:
            un = np.sqrt(ux * ux + uy * uy + uz * uz)
            s = 0.0 if un < _CROSS_EPS else cL * v2 / un
        else:
            s = cL * v2
        out[i, 0] = (fx + s * ux) / mass + gx
        out[i, 1] = (fy + s * uy) / mass + gy
        out[i, 2] = (fz + s * uz) / mass + gz
    return out


def acceleration_fast(V, W, params: PhysicsParams) -> np.ndarray:
    """Batched acceleration via the compiled kernel (2-D inputs only)."""
    c = 0.5 * params.rho_air * params.area
    gx, gy, gz = params.gravity
    return _accel_batch(
        np.ascontiguousarray(V), np.ascontiguousarray(W),
        c * params.drag_coeff, c * params.lift_coeff, params.mass,
        gx, gy, gz, params.lift_form == "normalized",
    )


def _skew_batch(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def acceleration_jacobians(V, W, params: PhysicsParams) -> tuple[np.ndarray, np.ndarray]:
    """d acc / dV and d acc / dW, batched as (n, 3, 3).

    In the normalized lift form the W-derivative has a removable
    singularity where W x V = 0; both lift Jacobian blocks are zeroed
    inside a small cone around it, matching the force's defined value.
    """
    Vb, single = _batched(V)
    Wb, _ = _batched(W)
    n = Vb.shape[0]
    m = params.mass
    cD = 0.5 * params.rho_air * params.area * params.drag_coeff
    cL = 0.5 * params.rho_air * params.area * params.lift_coeff

    speed = np.linalg.norm(Vb, axis=1)
    dFD_dV = np.zeros((n, 3, 3))
    nz = speed > 0.0
    I3 = np.eye(3)
    dFD_dV[nz] = -cD * (
        speed[nz, None, None] * I3[None]
        + Vb[nz, :, None] * Vb[nz, None, :] / speed[nz, None, None]
    )

    u = np.cross(Wb, Vb)
    v2 = np.sum(Vb * Vb, axis=1)
    # d(WxV)/dV = [W]_x ; d(WxV)/dW = -[V]_x
    SW = _skew_batch(Wb)
    SV = _skew_batch(Vb)
    if params.lift_form == "normalized":
        un = np.linalg.norm(u, axis=1)
        ok = un >= _CROSS_EPS
        dFL_dV = np.zeros((n, 3, 3))
        dFL_dW = np.zeros((n, 3, 3))
        if np.any(ok):
            uh = u[ok] / un[ok, None]
            P = (I3[None] - uh[:, :, None] * uh[:, None, :]) / un[ok, None, None]
            dFL_dV[ok] = cL * (
                2.0 * uh[:, :, None] * Vb[ok, None, :]
                + v2[ok, None, None] * np.einsum("nij,njk->nik", P, SW[ok])
            )
            dFL_dW[ok] = cL * v2[ok, None, None] * np.einsum("nij,njk->nik", P, -SV[ok])
    else:
        dFL_dV = cL * (2.0 * u[:, :, None] * Vb[:, None, :] + v2[:, None, None] * SW)
        dFL_dW = cL * v2[:, None, None] * (-SV)

    dA_dV = (dFD_dV + dFL_dV) / m
    dA_dW = dFL_dW / m
    if single:
        return dA_dV[0], dA_dW[0]
    return dA_dV, dA_dW


# ---------------------------------------------------------------------------
# bounce map


def bounce_matrix(params: PhysicsParams) -> np.ndarray:
    """6x6 linear map [V_out; W_out] = M @ [V_in; W_in] at ground contact.

    Tangential velocity mixes with spin through the shell-inertia ratio
    k = 1.5 R^2 / R1^2; the vertical component reflects with restitution;
    outbound spin rolls without slip (W_out_x = -V_out_y/R etc.).
    """
    R = params.ball_radius
    k = 1.5 * R**2 / params.shell_radius**2
    a = 1.0 / (1.0 + k)
    Av = np.diag([k * a, k * a, -params.restitution])
    Bv = a * R * np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    C = (1.0 / R) * np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    D = np.diag([0.0, 0.0, 1.0])
    M = np.zeros((6, 6))
    M[:3, :3] = Av
    M[:3, 3:] = Bv
    M[3:, :3] = C @ Av
    M[3:, 3:] = C @ Bv + D
    return M


def bounce_map(V_in, W_in, params: PhysicsParams) -> tuple[np.ndarray, np.ndarray]:
    """Outbound (V, W) for an inbound state at ground contact.

    Requires a descending inbound velocity (V_in_z < 0).
    """
    V_in = np.asarray(V_in, dtype=float)
    W_in = np.asarray(W_in, dtype=float)
    if V_in[2] >= 0.0:
        raise ValueError(f"bounce_map requires inbound V_z < 0, got {V_in[2]}")
    out = bounce_matrix(params) @ np.concatenate([V_in, W_in])
    return out[:3], out[3:]


# ---------------------------------------------------------------------------
# integration (numba kernels)


@njit(cache=True, fastmath=False)
def _accel_s(vx, vy, vz, wx, wy, wz, cD, cL, m, gx, gy, gz, lift_normalized):
    s2 = vx * vx + vy * vy + vz * vz
    s = np.sqrt(s2)
    fx = -cD * s * vx
    fy = -cD * s * vy
    fz = -cD * s * vz
    ux = wy * vz - wz * vy
    uy = wz * vx - wx * vz
    uz = wx * vy - wy * vx
    if lift_normalized:
        un = np.sqrt(ux * ux + uy * uy + uz * uz)
        if un >= 1e-9:
            c = cL * s2 / un
            fx += c * ux
            fy += c * uy
            fz += c * uz
    else:
        fx += cL * s2 * ux
        fy += cL * s2 * uy
        fz += cL * s2 * uz
    return fx / m + gx, fy / m + gy, fz / m + gz


@njit(cache=True)
def _rk4_step(lx, ly, lz, vx, vy, vz, wx, wy, wz, h, cD, cL, m, gx, gy, gz, ln):
    a1x, a1y, a1z = _accel_s(vx, vy, vz, wx, wy, wz, cD, cL, m, gx, gy, gz, ln)
    k1lx, k1ly, k1lz = vx, vy, vz

    v2x, v2y, v2z = vx + 0.5 * h * a1x, vy + 0.5 * h * a1y, vz + 0.5 * h * a1z
    a2x, a2y, a2z = _accel_s(v2x, v2y, v2z, wx, wy, wz, cD, cL, m, gx, gy, gz, ln)
    k2lx, k2ly, k2lz = v2x, v2y, v2z

    v3x, v3y, v3z = vx + 0.5 * h * a2x, vy + 0.5 * h * a2y, vz + 0.5 * h * a2z
    a3x, a3y, a3z = _accel_s(v3x, v3y, v3z, wx, wy, wz, cD, cL, m, gx, gy, gz, ln)
    k3lx, k3ly, k3lz = v3x, v3y, v3z

    v4x, v4y, v4z = vx + h * a3x, vy + h * a3y, vz + h * a3z
    a4x, a4y, a4z = _accel_s(v4x, v4y, v4z, wx, wy, wz, cD, cL, m, gx, gy, gz, ln)
    k4lx, k4ly, k4lz = v4x, v4y, v4z

    nlx = lx + (h / 6.0) * (k1lx + 2.0 * k2lx + 2.0 * k3lx + k4lx)
    nly = ly + (h / 6.0) * (k1ly + 2.0 * k2ly + 2.0 * k3ly + k4ly)
    nlz = lz + (h / 6.0) * (k1lz + 2.0 * k2lz + 2.0 * k3lz + k4lz)
    nvx = vx + (h / 6.0) * (a1x + 2.0 * a2x + 2.0 * a3x + a4x)
    nvy = vy + (h / 6.0) * (a1y + 2.0 * a2y + 2.0 * a3y + a4y)
    nvz = vz + (h / 6.0) * (a1z + 2.0 * a2z + 2.0 * a3z + a4z)
    return nlx, nly, nlz, nvx, nvy, nvz


@njit(cache=True)
def _bounce_s(vx, vy, vz, wx, wy, wz, R, k, ez):
    a = 1.0 / (1.0 + k)
    ovx = (R * wy + k * vx) * a
    ovy = (-R * wx + k * vy) * a
    ovz = -ez * vz
    owx = -ovy / R
    owy = ovx / R
    owz = wz
    return ovx, ovy, ovz, owx, owy, owz


@njit(cache=True)
def _integrate_kernel(
    state0,
    t0,
    horizon,
    dt_max,
    cD,
    cL,
    m,
    gx,
    gy,
    gz,
    lift_normalized,
    R,
    kb,
    ez,
    contact_z,
    max_bounces,
    min_bounce_speed,
    out_t,
    out_state,
    out_seg,
    out_bounce_t,
    out_bounce_state,
):
    """Fills sample and bounce buffers; returns (n_samples, n_bounces, status).

    status: 0 ok, 1 non-finite state, 2 stopped at max_bounces,
    3 stopped because the ball came to rest on the ground.
    """
    lx, ly, lz = state0[0], state0[1], state0[2]
    vx, vy, vz = state0[3], state0[4], state0[5]
    wx, wy, wz = state0[6], state0[7], state0[8]
    t = t0
    t_end = t0 + horizon
    seg = 0
    n = 0
    nb = 0
    out_t[n] = t
    out_state[n, 0], out_state[n, 1], out_state[n, 2] = lx, ly, lz
    out_state[n, 3], out_state[n, 4], out_state[n, 5] = vx, vy, vz
    out_state[n, 6], out_state[n, 7], out_state[n, 8] = wx, wy, wz
    out_seg[n] = seg
    n += 1
    while t < t_end - 1e-12 and n < out_t.shape[0]:
        h = min(dt_max, t_end - t)
        nlx, nly, nlz, nvx, nvy, nvz = _rk4_step(
            lx, ly, lz, vx, vy, vz, wx, wy, wz, h, cD, cL, m, gx, gy, gz, lift_normalized
        )
        if not (
            np.isfinite(nlx) and np.isfinite(nly) and np.isfinite(nlz)
            and np.isfinite(nvx) and np.isfinite(nvy) and np.isfinite(nvz)
        ):
            return n, nb, 1
        if nvz < 0.0 and nlz < contact_z:
            # ground contact inside this step: bisect on center height
            lo = 0.0
            hi = h
            # guard: already at/below contact and descending at step start
            if lz <= contact_z and vz < 0.0:
                hi = 0.0
            while hi - lo > 1e-6:
                mid = 0.5 * (lo + hi)
                blx, bly, blz, bvx, bvy, bvz = _rk4_step(
                    lx, ly, lz, vx, vy, vz, wx, wy, wz, mid, cD, cL, m, gx, gy, gz, lift_normalized
                )
                if blz > contact_z:
                    lo = mid
                else:
                    hi = mid
            tau = 0.5 * (lo + hi)
            blx, bly, blz, bvx, bvy, bvz = _rk4_step(
                lx, ly, lz, vx, vy, vz, wx, wy, wz, tau, cD, cL, m, gx, gy, gz, lift_normalized
            )
            t_b = t + tau
            if -bvz < min_bounce_speed:
                # effectively rolling; no further airborne phase to track
                out_t[n] = t_b
                out_state[n, 0], out_state[n, 1], out_state[n, 2] = blx, bly, blz
                out_state[n, 3], out_state[n, 4], out_state[n, 5] = bvx, bvy, bvz
                out_state[n, 6], out_state[n, 7], out_state[n, 8] = wx, wy, wz
                out_seg[n] = seg
                n += 1
                return n, nb, 3
            ovx, ovy, ovz, owx, owy, owz = _bounce_s(bvx, bvy, bvz, wx, wy, wz, R, kb, ez)
            out_bounce_t[nb] = t_b
            out_bounce_state[nb, 0], out_bounce_state[nb, 1], out_bounce_state[nb, 2] = blx, bly, blz
            out_bounce_state[nb, 3], out_bounce_state[nb, 4], out_bounce_state[nb, 5] = ovx, ovy, ovz
            out_bounce_state[nb, 6], out_bounce_state[nb, 7], out_bounce_state[nb, 8] = owx, owy, owz
            nb += 1
            lx, ly, lz = blx, bly, blz
            vx, vy, vz = ovx, ovy, ovz
            wx, wy, wz = owx, owy, owz
            t = t_b
            seg += 1
            out_t[n] = t
            out_state[n, 0], out_state[n, 1], out_state[n, 2] = lx, ly, lz
            out_state[n, 3], out_state[n, 4], out_state[n, 5] = vx, vy, vz
            out_state[n, 6], out_state[n, 7], out_state[n, 8] = wx, wy, wz
            out_seg[n] = seg
            n += 1
            if nb >= max_bounces:
                return n, nb, 2
            continue
        lx, ly, lz = nlx, nly, nlz
        vx, vy, vz = nvx, nvy, nvz
        t = t + h
        out_t[n] = t
        out_state[n, 0], out_state[n, 1], out_state[n, 2] = lx, ly, lz
        out_state[n, 3], out_state[n, 4], out_state[n, 5] = vx, vy, vz
        out_state[n, 6], out_state[n, 7], out_state[n, 8] = wx, wy, wz
        out_seg[n] = seg
        n += 1
    return n, nb, 0


# ---------------------------------------------------------------------------
# public integrator API


@dataclass(frozen=True)
class FlightState:
    L: np.ndarray
    V: np.ndarray
    W: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "L", np.asarray(self.L, dtype=float))
        object.__setattr__(self, "V", np.asarray(self.V, dtype=float))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        for v in (self.L, self.V, self.W):
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError("flight state components must be finite 3-vectors")


@dataclass(frozen=True)
class BounceEvent:
    time: float
    position: np.ndarray
    v_out: np.ndarray
    w_out: np.ndarray


@dataclass
class Trajectory:
    """Dense integrator output: arrays over sample index plus bounce events."""

    t: np.ndarray  # (n,)
    L: np.ndarray  # (n, 3)
    V: np.ndarray  # (n, 3)
    W: np.ndarray  # (n, 3)
    segment: np.ndarray  # (n,) bounce-segment index
    bounces: list[BounceEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.t)

    def state_at(self, t: float) -> FlightState:
        """Linear interpolation between samples (spin from the segment)."""
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        i = min(max(i, 0), len(self.t) - 2) if len(self.t) > 1 else 0
        if len(self.t) == 1:
            return FlightState(self.L[0], self.V[0], self.W[0], t=float(self.t[0]))
        t0, t1 = self.t[i], self.t[i + 1]
        a = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        return FlightState(
            (1 - a) * self.L[i] + a * self.L[i + 1],
            (1 - a) * self.V[i] + a * self.V[i + 1],
            self.W[i],
            t=float(t),
        )

    def sample(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolated (L, V, W) at an array of times."""
        ts = np.asarray(ts, dtype=float)
        L = np.stack([np.interp(ts, self.t, self.L[:, k]) for k in range(3)], axis=1)
        V = np.stack([np.interp(ts, self.t, self.V[:, k]) for k in range(3)], axis=1)
        idx = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, len(self.t) - 1)
        W = self.W[idx]
        return L, V, W


@dataclass(frozen=True)
class LandingPrediction:
    """First and (optionally) second ground-contact points."""

    first: tuple[np.ndarray, float] | None
    second: tuple[np.ndarray, float] | None
    truncated: bool

    def __post_init__(self):
        if self.first is not None and self.second is not None:
            if self.second[1] <= self.first[1]:
                raise ValueError("second landing must be after the first")


def _params_tuple(params: PhysicsParams):
    cD = 0.5 * params.rho_air * params.area * params.drag_coeff
    cL = 0.5 * params.rho_air * params.area * params.lift_coeff
    g = params.gravity
    R = params.ball_radius
    kb = 1.5 * R**2 / params.shell_radius**2
    return (
        cD,
        cL,
        params.mass,
        g[0],
        g[1],
        g[2],
        params.lift_form == "normalized",
        R,
        kb,
        params.restitution,
        params.contact_z,
    )


def integrate(
    state: FlightState,
    horizon: float,
    dt_max: float,
    params: PhysicsParams,
    max_bounces: int = 16,
    min_bounce_speed: float = 0.05,
) -> Trajectory:
    """RK4 integration with bounce events.

    Steps are at most dt_max. When a step ends below the contact height
    while descending, the contact time is refined by bisection to 1e-6 s,
    the bounce map is applied, and integration restarts from the contact
    state. Integration stops at the horizon, after max_bounces, or when
    the rebound speed falls below min_bounce_speed (ball at rest).
    """
    if dt_max <= 0 or horizon <= 0:
        raise ValueError("horizon and dt_max must be positive")
    n_max = int(np.ceil(horizon / dt_max)) + 2 * max_bounces + 4
    out_t = np.empty(n_max)
    out_state = np.empty((n_max, 9))
    out_seg = np.empty(n_max, dtype=np.int64)
    out_bt = np.empty(max_bounces)
    out_bs = np.empty((max_bounces, 9))
    s0 = np.concatenate([state.L, state.V, state.W])
    pt = _params_tuple(params)
    n, nb, status = _integrate_kernel(
        s0,
        state.t,
        horizon,
        dt_max,
        pt[0], pt[1], pt[2], pt[3], pt[4], pt[5], pt[6], pt[7], pt[8], pt[9], pt[10],
        max_bounces,
        min_bounce_speed,
        out_t,
        out_state,
        out_seg,
        out_bt,
        out_bs,
    )
    if status == 1:
        raise IntegrationError(f"non-finite state at sample {n} (t ~ {out_t[max(n - 1, 0)]:.6f} s)")
    bounces = [
        BounceEvent(float(out_bt[i]), out_bs[i, :3].copy(), out_bs[i, 3:6].copy(), out_bs[i, 6:9].copy())
        for i in range(nb)
    ]
    return Trajectory(
        t=out_t[:n].copy(),
        L=out_state[:n, :3].copy(),
        V=out_state[:n, 3:6].copy(),
        W=out_state[:n, 6:9].copy(),
        segment=out_seg[:n].copy(),
        bounces=bounces,
    )


def predict_landings(
    state: FlightState,
    params: PhysicsParams,
    horizon: float = 10.0,
    dt_max: float = 1e-3,
) -> LandingPrediction:
    """Integrate forward until two ground contacts or the horizon."""
    traj = integrate(state, horizon, dt_max, params, max_bounces=2)
    b = traj.bounces
    first = (b[0].position, b[0].time) if len(b) >= 1 else None
    second = (b[1].position, b[1].time) if len(b) >= 2 else None
    return LandingPrediction(first=first, second=second, truncated=len(b) < 2)


def save_trajectory(traj: Trajectory, path) -> None:
    """Newline-delimited {t, L, V, W, segment_index} records."""
    import json
    from pathlib import Path

    with Path(path).open("w") as f:
        for i in range(len(traj)):
            f.write(
                json.dumps(
                    {
                        "t": float(traj.t[i]),
                        "L": [float(x) for x in traj.L[i]],
                        "V": [float(x) for x in traj.V[i]],
                        "W": [float(x) for x in traj.W[i]],
                        "segment_index": int(traj.segment[i]),
                    }
                )
                + "\n"
            )
