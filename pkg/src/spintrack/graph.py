"""Factor graph over ball states: variables, residuals and analytic Jacobians.

The graph couples per-timestamp location/velocity variables, per-bounce
spin variables and (optionally) camera pose variables through five factor
kinds: camera pose priors, pixel projections, Euler location steps,
aerodynamic velocity steps, and bounce transitions, plus the spin prior.

Residuals are whitened by their per-dimension std-devs so the solver's
least-squares objective is the Mahalanobis norm of the factor potentials.

Storage is columnar: each factor kind keeps flat arrays over its factors
so residuals and Jacobians for the whole graph evaluate in a handful of
numpy calls. Single-factor functions (projection_residual etc.) wrap the
same kernels for direct use and for finite-difference checking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import physics, so3
from .core import CameraModel, NoiseSpec, PhysicsParams, SpinPrior


class VarKind(IntEnum):
    CAMERA_POSE = 0
    LOCATION = 1
    VELOCITY = 2
    SPIN = 3


@dataclass(frozen=True)
class VariableKey:
    kind: VarKind
    index: int

    def __repr__(self):
        return f"{self.kind.name}({self.index})"


class CheiralityError(ValueError):
    """Observed point does not lie in front of the camera."""


MIN_DEPTH = 1e-3


@dataclass
class Residual:
    """Residual value plus one Jacobian block per connected variable."""

    value: np.ndarray
    jacobians: dict[VariableKey, np.ndarray]


def whiten(residual: Residual, sigma: np.ndarray) -> Residual:
    """Scale value and Jacobian rows by 1/sigma (per residual dimension)."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if sigma.size == 1:
        sigma = np.full(residual.value.shape[0], sigma[0])
    if sigma.shape[0] != residual.value.shape[0]:
        raise ValueError("sigma length must match residual dimension")
    if np.any(sigma <= 0):
        raise ValueError("sigma entries must be strictly positive")
    inv = 1.0 / sigma
    return Residual(
        value=residual.value * inv,
        jacobians={k: J * inv[:, None] for k, J in residual.jacobians.items()},
    )


def potential(residual: Residual) -> float:
    """Gaussian factor potential exp(-1/2 ||r||^2) of a whitened residual."""
    return float(np.exp(-0.5 * float(residual.value @ residual.value)))


# ---------------------------------------------------------------------------
# batched kernels


def projection_kernel(rot, trans, fx, fy, L, pixel, with_pose_jac=False, with_jac=True):
    """Batched pinhole residual r = pixel - project(L) and Jacobians.

    rot: (n,3,3) world->camera, trans: (n,3), fx/fy: (n,), L: (n,3),
    pixel: (n,2). Returns (r, J_L, J_pose, depth); J_pose is None unless
    requested, and both Jacobians are None with with_jac=False.
    Depths are clamped to MIN_DEPTH for evaluation; callers gate
    cheirality at construction time.
    """
    p = np.einsum("nij,nj->ni", rot, L) + trans
    depth = p[:, 2].copy()
    z = np.maximum(p[:, 2], MIN_DEPTH)
    u = np.empty((len(z), 2))
    u[:, 0] = fx * p[:, 0] / z
    u[:, 1] = fy * p[:, 1] / z
    # pixel already has cx,cy subtracted by the caller, or we add here:
    r = pixel - u
    if not with_jac:
        return r, None, None, depth
    n = len(z)
    A = np.zeros((n, 2, 3))
    A[:, 0, 0] = fx / z
    A[:, 0, 2] = -fx * p[:, 0] / z**2
    A[:, 1, 1] = fy / z
    A[:, 1, 2] = -fy * p[:, 1] / z**2
    J_L = -np.einsum("nij,njk->nik", A, rot)
    J_pose = None
    if with_pose_jac:
        # right perturbation: R <- R exp(hat(dr)), T <- T + dt
        SL = physics._skew_batch(L)
        J_pose = np.empty((n, 2, 6))
        J_pose[:, :, :3] = np.einsum("nij,njk,nkl->nil", A, rot, SL)
        J_pose[:, :, 3:] = -A
    return r, J_L, J_pose, depth


def location_kernel(La, Va, Lb, dt):
    """r = L_next - (L_s + V_s dt); constant Jacobians (I, -I, -dt I)."""
    return Lb - La - Va * dt[:, None]


def aero_kernel(Va, Vb, W, dt, params: PhysicsParams, with_jac=True):
    """r = V_next - (V_s + acc(V_s, W) dt) and Jacobians wrt V_s and W."""
    acc = physics.acceleration_fast(Va, W, params)
    r = Vb - Va - acc * dt[:, None]
    if not with_jac:
        return r, None, None
    dAdV, dAdW = physics.acceleration_jacobians(Va, W, params)
    I = np.eye(3)
    J_Va = -I[None] - dt[:, None, None] * dAdV
    J_W = -dt[:, None, None] * dAdW
    return r, J_Va, J_W


def bounce_kernel(Va, Wa, Vb, Wb, M):
    """r = [V_next; W_next] - M [V_s; W_s]; M is the 6x6 bounce matrix."""
    x_in = np.concatenate([Va, Wa], axis=1)
    x_out = np.concatenate([Vb, Wb], axis=1)
    return x_out - x_in @ M.T


# ---------------------------------------------------------------------------
# single-factor surface


def projection_residual(camera: CameraModel, L, pixel, rotation=None, translation=None) -> Residual:
    """Unwhitened pixel-projection residual with pose and location Jacobians.

    rotation/translation override the camera's calibrated pose (used when
    the pose is an optimized variable).
    """
    R = camera.rotation if rotation is None else np.asarray(rotation, dtype=float)
    T = camera.translation if translation is None else np.asarray(translation, dtype=float)
    L = np.asarray(L, dtype=float)
    pixel = np.asarray(pixel, dtype=float)
    depth = (R @ L + T)[2]
    if depth < MIN_DEPTH:
        raise CheiralityError(f"point depth {depth:.4g} m behind camera {camera.camera_id}")
    r, J_L, J_pose, _ = projection_kernel(
        R[None], T[None], np.array([camera.fx]), np.array([camera.fy]),
        L[None], (pixel - np.array([camera.cx, camera.cy]))[None], with_pose_jac=True,
    )
    return Residual(
        value=r[0],
        jacobians={
            VariableKey(VarKind.CAMERA_POSE, camera.camera_id): J_pose[0],
            VariableKey(VarKind.LOCATION, 0): J_L[0],
        },
    )


def location_residual(L_s, V_s, L_next, dt: float, indices=(0, 0, 1)) -> Residual:
    if dt <= 0:
        raise ValueError(f"location factor needs dt > 0, got {dt}")
    L_s, V_s, L_next = (np.asarray(x, dtype=float) for x in (L_s, V_s, L_next))
    r = location_kernel(L_s[None], V_s[None], L_next[None], np.array([dt]))[0]
    I = np.eye(3)
    return Residual(
        value=r,
        jacobians={
            VariableKey(VarKind.LOCATION, indices[0]): -I,
            VariableKey(VarKind.VELOCITY, indices[1]): -dt * I,
            VariableKey(VarKind.LOCATION, indices[2]): I.copy(),
        },
    )


def aero_residual(V_s, V_next, W_j, dt: float, params: PhysicsParams, indices=(0, 1, 0)) -> Residual:
    if dt <= 0:
        raise ValueError(f"aero factor needs dt > 0, got {dt}")
    V_s, V_next, W_j = (np.asarray(x, dtype=float) for x in (V_s, V_next, W_j))
    r, J_Va, J_W = aero_kernel(V_s[None], V_next[None], W_j[None], np.array([dt]), params)
    return Residual(
        value=r[0],
        jacobians={
            VariableKey(VarKind.VELOCITY, indices[0]): J_Va[0],
            VariableKey(VarKind.VELOCITY, indices[1]): np.eye(3),
            VariableKey(VarKind.SPIN, indices[2]): J_W[0],
        },
    )


def bounce_residual(V_s, W_j, V_next, W_jnext, params: PhysicsParams, indices=(0, 0, 1, 1)) -> Residual:
    V_s, W_j, V_next, W_jnext = (np.asarray(x, dtype=float) for x in (V_s, W_j, V_next, W_jnext))
    M = physics.bounce_matrix(params)
    r = bounce_kernel(V_s[None], W_j[None], V_next[None], W_jnext[None], M)[0]
    Z = np.zeros((3, 3))
    I = np.eye(3)
    top = np.vstack([np.eye(3), Z])  # d r / d V_next columns
    bot = np.vstack([Z, I])
    return Residual(
        value=r,
        jacobians={
            VariableKey(VarKind.VELOCITY, indices[0]): -M[:, :3],
            VariableKey(VarKind.SPIN, indices[1]): -M[:, 3:],
            VariableKey(VarKind.VELOCITY, indices[2]): top,
            VariableKey(VarKind.SPIN, indices[3]): bot,
        },
    )


def prior_residual(x, prior_mean, key: VariableKey | None = None) -> Residual:
    """Plain vector prior r = x - mean."""
    x = np.asarray(x, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    if x.shape != prior_mean.shape:
        raise ValueError("prior dimension mismatch")
    key = key if key is not None else VariableKey(VarKind.SPIN, 0)
    return Residual(value=x - prior_mean, jacobians={key: np.eye(x.shape[0])})


def pose_prior_residual(rotation, translation, prior_rotation, prior_translation, camera_id=0) -> Residual:
    """6-dim local pose difference [log(R0^T R); T - T0] with exact Jacobian."""
    dR = np.asarray(prior_rotation).T @ np.asarray(rotation)
    phi = so3.log(dR)
    r = np.concatenate([phi, np.asarray(translation, dtype=float) - np.asarray(prior_translation, dtype=float)])
    J = np.zeros((6, 6))
    J[:3, :3] = so3.right_jacobian_inv(phi)
    J[3:, 3:] = np.eye(3)
    return Residual(value=r, jacobians={VariableKey(VarKind.CAMERA_POSE, camera_id): J})


# ---------------------------------------------------------------------------
# growable columnar storage


class GrowArray:
    """Append-mostly 1D/ND float array with capacity doubling and swap-remove."""

    def __init__(self, tail=(), dtype=float, cap=64):
        self._arr = np.zeros((cap, *tail), dtype=dtype)
        self.n = 0

    @property
    def data(self):
        return self._arr[: self.n]

    def append(self, row):
        if self.n == self._arr.shape[0]:
            new = np.zeros((2 * self._arr.shape[0], *self._arr.shape[1:]), dtype=self._arr.dtype)
            new[: self.n] = self._arr[: self.n]
            self._arr = new
        self._arr[self.n] = row
        self.n += 1

    def swap_remove(self, i):
        self._arr[i] = self._arr[self.n - 1]
        self.n -= 1


class FactorGraph:
    """Columnar factor graph for one ball trajectory.

    Variables are addressed by stable ids: timestamp id (creation order)
    for location/velocity pairs, bounce-segment index for spins, and
    camera_id for poses. Time order is tracked separately so late
    detections can be spliced in.
    """

    def __init__(
        self,
        cameras: list[CameraModel],
        params: PhysicsParams,
        noise: NoiseSpec | None = None,
        freeze_cameras: bool = True,
    ):
        self.cameras = list(cameras)
        self.cam_index = {c.camera_id: i for i, c in enumerate(self.cameras)}
        self.params = params
        self.noise = noise or NoiseSpec()
        self.freeze_cameras = freeze_cameras
        self.bounce_M = physics.bounce_matrix(params)

        self.timestamps = GrowArray()
        self.order: list[int] = []  # tids sorted by timestamp
        self.n_spins = 0
        self.bounce_times: list[float] = []

        # projection factors
        self.p_cam = GrowArray(dtype=np.int64)
        self.p_tid = GrowArray(dtype=np.int64)
        self.p_pix = GrowArray(tail=(2,))  # pixel minus principal point
        self.p_sigma = GrowArray()
        # location factors (tid_a -> tid_b)
        self.l_a = GrowArray(dtype=np.int64)
        self.l_b = GrowArray(dtype=np.int64)
        self.l_dt = GrowArray()
        self.l_sigma = GrowArray(tail=(3,))
        # aero factors
        self.a_a = GrowArray(dtype=np.int64)
        self.a_b = GrowArray(dtype=np.int64)
        self.a_seg = GrowArray(dtype=np.int64)
        self.a_dt = GrowArray()
        self.a_sigma = GrowArray(tail=(3,))
        # bounce factors (tid_a pre, tid_b post; spins seg, seg+1)
        self.b_a = GrowArray(dtype=np.int64)
        self.b_b = GrowArray(dtype=np.int64)
        self.b_seg = GrowArray(dtype=np.int64)
        self.b_sigma = GrowArray(tail=(6,))
        # spin prior on W_0
        self.spin_prior: SpinPrior | None = None
        self.revision = 0  # bumped on any structural edit
        # bumped when existing column ranks, factor rows, or whitening can
        # change under an edit (anything except appends at the tail);
        # incremental consumers must then rebuild cached linear algebra
        self.layout_epoch = 0

    # -- variables ----------------------------------------------------------

    @property
    def n_times(self) -> int:
        return self.timestamps.n

    def time_of(self, tid: int) -> float:
        return float(self.timestamps.data[tid])

    def add_timestamp(self, t: float) -> int:
        """Create the L/V pair for a new timestamp; returns its tid."""
        tid = self.timestamps.n
        self.timestamps.append(t)
        # insertion keeping order sorted by time
        times = self.timestamps.data
        pos = len(self.order)
        while pos > 0 and times[self.order[pos - 1]] > t:
            pos -= 1
        self.order.insert(pos, tid)
        if pos != len(self.order) - 1:
            self.layout_epoch += 1
        if self.n_spins == 0:
            self.n_spins = 1
            self.layout_epoch += 1
        self.revision += 1
        return tid

    def segment_of_time(self, t: float) -> int:
        return int(np.searchsorted(np.asarray(self.bounce_times), t, side="left"))

    # -- factor construction ------------------------------------------------

    def add_projection(self, camera_id: int, tid: int, pixel, sigma: float) -> None:
        ci = self.cam_index[camera_id]
        cam = self.cameras[ci]
        self.p_cam.append(ci)
        self.p_tid.append(tid)
        self.p_pix.append(np.asarray(pixel, dtype=float) - np.array([cam.cx, cam.cy]))
        self.p_sigma.append(sigma)
        self.revision += 1

    def add_location(self, tid_a: int, tid_b: int, sigma_scale: float = 1.0) -> None:
        dt = self.time_of(tid_b) - self.time_of(tid_a)
        if dt <= 0:
            raise ValueError("location factor needs increasing timestamps")
        self.l_a.append(tid_a)
        self.l_b.append(tid_b)
        self.l_dt.append(dt)
        self.l_sigma.append(np.full(3, self.noise.location_sigma * sigma_scale))
        self.revision += 1

    def add_aero(self, tid_a: int, tid_b: int, seg: int) -> None:
        dt = self.time_of(tid_b) - self.time_of(tid_a)
        if dt <= 0:
            raise ValueError("aero factor needs increasing timestamps")
        self.a_a.append(tid_a)
        self.a_b.append(tid_b)
        self.a_seg.append(seg)
        self.a_dt.append(dt)
        self.a_sigma.append(np.full(3, self.noise.aero_sigma))
        self.revision += 1

    def set_spin_prior(self, prior: SpinPrior) -> None:
        """Attach or replace the Gaussian prior on W_0 (never stacks)."""
        old = self.spin_prior
        self.spin_prior = prior
        self.revision += 1
        # moving only the mean shifts the gradient, not the information
        # matrix, so incremental consumers need no rebuild for it
        if (
            old is None
            or prior is None
            or not np.array_equal(np.asarray(old.sigma, dtype=float), np.asarray(prior.sigma, dtype=float))
        ):
            self.layout_epoch += 1

    def _find_interval(self, arr_a: GrowArray, arr_b: GrowArray, tid_a: int, tid_b: int) -> int:
        hits = np.nonzero((arr_a.data == tid_a) & (arr_b.data == tid_b))[0]
        if len(hits) == 0:
            raise KeyError(f"no interval factor between tids {tid_a} and {tid_b}")
        return int(hits[0])

    def splice_timestamp(self, t: float) -> int:
        """Insert a timestamp between existing neighbors, re-linking the chain."""
        tid = self.add_timestamp(t)
        pos = self.order.index(tid)
        if pos == 0 or pos == len(self.order) - 1:
            return tid  # became an endpoint; caller links as usual
        prev_tid = self.order[pos - 1]
        next_tid = self.order[pos + 1]
        i = self._find_interval(self.l_a, self.l_b, prev_tid, next_tid)
        self.l_a.swap_remove(i)
        self.l_b.swap_remove(i)
        self.l_dt.swap_remove(i)
        self.l_sigma.swap_remove(i)
        i = self._find_interval(self.a_a, self.a_b, prev_tid, next_tid)
        seg = int(self.a_seg.data[i])
        self.a_a.swap_remove(i)
        self.a_b.swap_remove(i)
        self.a_seg.swap_remove(i)
        self.a_dt.swap_remove(i)
        self.a_sigma.swap_remove(i)
        self.add_location(prev_tid, tid)
        self.add_location(tid, next_tid)
        self.add_aero(prev_tid, tid, seg)
        self.add_aero(tid, next_tid, seg)
        self.revision += 1
        return tid

    def insert_bounce(self, tid_a: int, tid_b: int, t_bounce: float) -> int:
        """Replace the aero link of interval (tid_a, tid_b) with a bounce factor.

        Allocates the post-bounce spin variable, re-labels aero factors
        after the bounce to the new segment, and inflates the spanning
        location factor's noise (the Euler position step does not model
        the velocity jump). Returns the new segment index.
        """
        i = self._find_interval(self.a_a, self.a_b, tid_a, tid_b)
        seg = int(self.a_seg.data[i])
        self.a_a.swap_remove(i)
        self.a_b.swap_remove(i)
        self.a_seg.swap_remove(i)
        self.a_dt.swap_remove(i)
        self.a_sigma.swap_remove(i)
        new_seg = seg + 1
        # later segments shift up (bounces are found near the tail, but a
        # late splice could in principle land before an existing bounce)
        self.a_seg.data[self.a_seg.data > seg] += 1
        self.b_seg.data[self.b_seg.data >= seg] += 1
        times = self.timestamps.data
        after = times[self.a_a.data] >= t_bounce
        self.a_seg.data[after & (self.a_seg.data == seg)] = new_seg
        self.b_a.append(tid_a)
        self.b_b.append(tid_b)
        self.b_seg.append(seg)
        self.b_sigma.append(self.noise.bounce_sigma.copy())
        self.n_spins += 1
        self.bounce_times.append(t_bounce)
        self.bounce_times.sort()
        il = self._find_interval(self.l_a, self.l_b, tid_a, tid_b)
        self.l_sigma.data[il] = self.noise.location_sigma * self.noise.bounce_location_inflation
        self.revision += 1
        self.layout_epoch += 1
        return new_seg

    def remove_bounce(self, idx: int) -> None:
        """Drop bounce factor idx and restore the aero link (gate retraction)."""
        tid_a = int(self.b_a.data[idx])
        tid_b = int(self.b_b.data[idx])
        seg = int(self.b_seg.data[idx])
        t_bounce = self.bounce_times[seg]
        self.b_a.swap_remove(idx)
        self.b_b.swap_remove(idx)
        self.b_seg.swap_remove(idx)
        self.b_sigma.swap_remove(idx)
        self.a_seg.data[self.a_seg.data > seg] -= 1
        self.b_seg.data[self.b_seg.data > seg] -= 1
        self.bounce_times.remove(t_bounce)
        self.n_spins -= 1
        self.add_aero(tid_a, tid_b, seg)
        il = self._find_interval(self.l_a, self.l_b, tid_a, tid_b)
        self.l_sigma.data[il] = self.noise.location_sigma
        self.revision += 1
        self.layout_epoch += 1

    # -- bookkeeping --------------------------------------------------------

    def factor_counts(self) -> dict[str, int]:
        return {
            "camera_prior": 0 if self.freeze_cameras else len(self.cameras),
            "projection": self.p_cam.n,
            "location": self.l_a.n,
            "aero": self.a_a.n,
            "bounce": self.b_a.n,
            "spin_prior": 1 if self.spin_prior is not None else 0,
        }

    def n_factors(self) -> int:
        return sum(self.factor_counts().values())

    def variable_keys(self) -> list[VariableKey]:
        keys = []
        if not self.freeze_cameras:
            keys += [VariableKey(VarKind.CAMERA_POSE, c.camera_id) for c in self.cameras]
        for tid in self.order:
            keys.append(VariableKey(VarKind.LOCATION, tid))
            keys.append(VariableKey(VarKind.VELOCITY, tid))
        keys += [VariableKey(VarKind.SPIN, j) for j in range(self.n_spins)]
        return keys

    def _fx_arr(self):
        if not hasattr(self, "_fx"):
            self._fx = np.array([c.fx for c in self.cameras])
            self._fy = np.array([c.fy for c in self.cameras])
        return self._fx

    def _fy_arr(self):
        self._fx_arr()
        return self._fy

    def dump(self, values, path) -> None:
        """Debug dump: one record per factor with unwhitened residual norm."""
        ev = evaluate_blocks(self, values, with_jac=False, whitened=False)
        with Path(path).open("w") as f:
            for kind, keys_list, r in ev.iter_factors(self):
                f.write(
                    json.dumps({"kind": kind, "keys": keys_list, "residual_norm": float(np.linalg.norm(r))}) + "\n"
                )


# ---------------------------------------------------------------------------
# whole-graph evaluation


@dataclass
class BlockEval:
    """Whitened residuals (and optional Jacobians) for every factor block."""

    proj_r: np.ndarray
    proj_JL: np.ndarray | None
    proj_Jpose: np.ndarray | None
    loc_r: np.ndarray
    aero_r: np.ndarray
    aero_JVa: np.ndarray | None
    aero_JW: np.ndarray | None
    bounce_r: np.ndarray
    spin_prior_r: np.ndarray | None
    pose_prior_r: np.ndarray | None
    pose_prior_J: np.ndarray | None
    whitened: bool = True

    def cost(self) -> float:
        total = float(np.sum(self.proj_r**2) + np.sum(self.loc_r**2) + np.sum(self.aero_r**2) + np.sum(self.bounce_r**2))
        if self.spin_prior_r is not None:
            total += float(np.sum(self.spin_prior_r**2))
        if self.pose_prior_r is not None:
            total += float(np.sum(self.pose_prior_r**2))
        return 0.5 * total

    def iter_factors(self, g: FactorGraph):
        for i in range(g.p_cam.n):
            cam = g.cameras[int(g.p_cam.data[i])]
            yield "projection", [f"X({cam.camera_id})", f"L({int(g.p_tid.data[i])})"], self.proj_r[i]
        for i in range(g.l_a.n):
            yield "location", [f"L({int(g.l_a.data[i])})", f"V({int(g.l_a.data[i])})", f"L({int(g.l_b.data[i])})"], self.loc_r[i]
        for i in range(g.a_a.n):
            yield "aero", [f"V({int(g.a_a.data[i])})", f"V({int(g.a_b.data[i])})", f"W({int(g.a_seg.data[i])})"], self.aero_r[i]
        for i in range(g.b_a.n):
            s = int(g.b_seg.data[i])
            yield "bounce", [f"V({int(g.b_a.data[i])})", f"W({s})", f"V({int(g.b_b.data[i])})", f"W({s + 1})"], self.bounce_r[i]
        if self.spin_prior_r is not None:
            yield "spin_prior", ["W(0)"], self.spin_prior_r
        if self.pose_prior_r is not None:
            for i, cam in enumerate(self.pose_prior_r):
                yield "camera_prior", [f"X({i})"], cam


def evaluate_blocks(g: FactorGraph, values, with_jac: bool = True, whitened: bool = True) -> BlockEval:
    """Evaluate every factor block at the given values."""
    loc = values.loc
    vel = values.vel
    spin = values.spin

    # projection
    np_ = g.p_cam.n
    if np_ > 0:
        ci = g.p_cam.data
        rot = values.cam_rot[ci]
        trans = values.cam_trans[ci]
        fx = g._fx_arr()[ci]
        fy = g._fy_arr()[ci]
        tid = g.p_tid.data
        pr, pJL, pJX, _ = projection_kernel(
            rot, trans, fx, fy, loc[tid], g.p_pix.data,
            with_pose_jac=with_jac and not g.freeze_cameras, with_jac=with_jac,
        )
        if whitened:
            inv = 1.0 / g.p_sigma.data
            pr = pr * inv[:, None]
            if with_jac:
                pJL = pJL * inv[:, None, None]
                if pJX is not None:
                    pJX = pJX * inv[:, None, None]
    else:
        pr = np.zeros((0, 2))
        pJL = np.zeros((0, 2, 3)) if with_jac else None
        pJX = None

    # location
    nl = g.l_a.n
    if nl > 0:
        lr = location_kernel(loc[g.l_a.data], vel[g.l_a.data], loc[g.l_b.data], g.l_dt.data)
        if whitened:
            lr = lr / g.l_sigma.data
    else:
        lr = np.zeros((0, 3))

    # aero
    na = g.a_a.n
    if na > 0:
        ar, aJVa, aJW = aero_kernel(vel[g.a_a.data], vel[g.a_b.data], spin[g.a_seg.data], g.a_dt.data, g.params, with_jac=with_jac)
        if whitened:
            inv = 1.0 / g.a_sigma.data
            ar = ar * inv
            if with_jac:
                aJVa = aJVa * inv[:, :, None]
                aJW = aJW * inv[:, :, None]
    else:
        ar = np.zeros((0, 3))
        aJVa = np.zeros((0, 3, 3)) if with_jac else None
        aJW = np.zeros((0, 3, 3)) if with_jac else None

    # bounce
    nb = g.b_a.n
    if nb > 0:
        br = bounce_kernel(vel[g.b_a.data], spin[g.b_seg.data], vel[g.b_b.data], spin[g.b_seg.data + 1], g.bounce_M)
        if whitened:
            br = br / g.b_sigma.data
    else:
        br = np.zeros((0, 6))

    # spin prior
    spr = None
    if g.spin_prior is not None and g.n_spins > 0:
        spr = spin[0] - g.spin_prior.spin
        if whitened:
            spr = spr / g.spin_prior.sigma

    # camera pose priors
    ppr = None
    ppJ = None
    if not g.freeze_cameras:
        ncam = len(g.cameras)
        ppr = np.zeros((ncam, 6))
        ppJ = np.zeros((ncam, 6, 6)) if with_jac else None
        for i, cam in enumerate(g.cameras):
            res = pose_prior_residual(values.cam_rot[i], values.cam_trans[i], cam.rotation, cam.translation, cam.camera_id)
            sig = cam.pose_prior_sigma
            ppr[i] = res.value / sig if whitened else res.value
            if with_jac:
                J = res.jacobians[VariableKey(VarKind.CAMERA_POSE, cam.camera_id)]
                ppJ[i] = J / sig[:, None] if whitened else J

    return BlockEval(
        proj_r=pr, proj_JL=pJL, proj_Jpose=pJX,
        loc_r=lr, aero_r=ar, aero_JVa=aJVa, aero_JW=aJW,
        bounce_r=br, spin_prior_r=spr, pose_prior_r=ppr, pose_prior_J=ppJ,
        whitened=whitened,
    )


