"""Sparse nonlinear least squares over the factor graph.

Two entry points share one core: solve_batch runs Levenberg-Marquardt with
full relinearization and is the correctness reference; IncrementalSolver
warm-starts from the previous solution after each graph edit and
relinearizes only factors whose variables moved beyond a threshold since
their last linearization (plus anything new), re-solving the full sparse
system each iteration.

The linear algebra exploits the chain structure: location/velocity
variables are interleaved in time order, giving a banded Gauss-Newton
Hessian, while spins and (optional) camera poses form a small dense
border handled by a Schur complement. Assembly is vectorized per factor
kind; nothing iterates over individual factors in Python.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numba import njit

from . import so3
from .graph import (
    BlockEval,
    FactorGraph,
    VariableKey,
    VarKind,
    aero_kernel,
    evaluate_blocks,
    projection_kernel,
)

BANDWIDTH = 8  # max column distance inside the time-ordered state band


class UnderconstrainedError(RuntimeError):
    def __init__(self, keys):
        self.keys = list(keys)
        super().__init__(f"variables with no attached factor: {self.keys}")


class SingularSystemError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# values and layout


class Values:
    """Current estimates for every variable in a graph.

    Backed by flat arrays aligned with the graph's stable ids; the mapping
    interface (get/set by VariableKey) is for convenience and tests.
    """

    def __init__(self, n_times=0, n_spins=0, cam_rot=None, cam_trans=None):
        self.loc = np.zeros((n_times, 3))
        self.vel = np.zeros((n_times, 3))
        self.spin = np.zeros((n_spins, 3))
        self.cam_rot = np.zeros((0, 3, 3)) if cam_rot is None else np.array(cam_rot, dtype=float)
        self.cam_trans = np.zeros((0, 3)) if cam_trans is None else np.array(cam_trans, dtype=float)

    @classmethod
    def for_graph(cls, g: FactorGraph) -> "Values":
        v = cls(
            g.n_times,
            g.n_spins,
            np.stack([c.rotation for c in g.cameras]) if g.cameras else None,
            np.stack([c.translation for c in g.cameras]) if g.cameras else None,
        )
        return v

    def resize(self, n_times: int, n_spins: int) -> None:
        if n_times > self.loc.shape[0]:
            grow = n_times - self.loc.shape[0]
            self.loc = np.vstack([self.loc, np.zeros((grow, 3))])
            self.vel = np.vstack([self.vel, np.zeros((grow, 3))])
        if n_spins > self.spin.shape[0]:
            grow = n_spins - self.spin.shape[0]
            self.spin = np.vstack([self.spin, np.zeros((grow, 3))])

    def copy(self) -> "Values":
        out = Values.__new__(Values)
        out.loc = self.loc.copy()
        out.vel = self.vel.copy()
        out.spin = self.spin.copy()
        out.cam_rot = self.cam_rot.copy()
        out.cam_trans = self.cam_trans.copy()
        return out

    def get(self, key: VariableKey):
        if key.kind == VarKind.LOCATION:
            return self.loc[key.index]
        if key.kind == VarKind.VELOCITY:
            return self.vel[key.index]
        if key.kind == VarKind.SPIN:
            return self.spin[key.index]
        if key.kind == VarKind.CAMERA_POSE:
            return self.cam_rot[key.index], self.cam_trans[key.index]
        raise KeyError(key)

    def set(self, key: VariableKey, value) -> None:
        if key.kind == VarKind.LOCATION:
            self.loc[key.index] = value
        elif key.kind == VarKind.VELOCITY:
            self.vel[key.index] = value
        elif key.kind == VarKind.SPIN:
            self.spin[key.index] = value
        elif key.kind == VarKind.CAMERA_POSE:
            self.cam_rot[key.index], self.cam_trans[key.index] = value
        else:
            raise KeyError(key)


class Layout:
    """Column layout: time-interleaved (L_t, V_t) band, then poses, then spins."""

    def __init__(self, g: FactorGraph):
        self.order = list(g.order)
        self.rank = np.full(g.n_times, -1, dtype=np.int64)
        if self.order:
            self.rank[np.asarray(self.order)] = np.arange(len(self.order))
        self.n_state = 6 * len(self.order)
        self.n_cam = 0 if g.freeze_cameras else len(g.cameras)
        self.n_spin = g.n_spins
        self.pose_base = self.n_state
        self.spin_base = self.n_state + 6 * self.n_cam
        self.n_total = self.spin_base + 3 * self.n_spin
        self.n_border = self.n_total - self.n_state

    def loc_col(self, tid) -> np.ndarray:
        return 6 * self.rank[tid]

    def vel_col(self, tid) -> np.ndarray:
        return 6 * self.rank[tid] + 3

    def pose_col(self, cam_idx) -> np.ndarray:
        return self.pose_base + 6 * np.asarray(cam_idx)

    def spin_col(self, seg) -> np.ndarray:
        return self.spin_base + 3 * np.asarray(seg)

    def spin_border_col(self, seg) -> np.ndarray:
        return 6 * self.n_cam + 3 * np.asarray(seg)

    def column_map(self, g: FactorGraph) -> dict[VariableKey, tuple[int, int]]:
        cm = {}
        if not g.freeze_cameras:
            for i, c in enumerate(g.cameras):
                cm[VariableKey(VarKind.CAMERA_POSE, c.camera_id)] = (self.pose_base + 6 * i, 6)
        for tid in self.order:
            cm[VariableKey(VarKind.LOCATION, tid)] = (int(self.loc_col(tid)), 3)
            cm[VariableKey(VarKind.VELOCITY, tid)] = (int(self.vel_col(tid)), 3)
        for j in range(g.n_spins):
            cm[VariableKey(VarKind.SPIN, j)] = (self.spin_base + 3 * j, 3)
        return cm

    def key_cols(self, key: VariableKey) -> tuple[int, int]:
        if key.kind == VarKind.LOCATION:
            return int(self.loc_col(key.index)), 3
        if key.kind == VarKind.VELOCITY:
            return int(self.vel_col(key.index)), 3
        if key.kind == VarKind.SPIN:
            return self.spin_base + 3 * key.index, 3
        if key.kind == VarKind.CAMERA_POSE:
            return self.pose_base + 6 * key.index, 6
        raise KeyError(key)


def retract(values: Values, layout: Layout, delta: np.ndarray) -> Values:
    """Apply a tangent step: additive for vectors, exp-map for poses."""
    out = values.copy()
    n_t = len(layout.order)
    if n_t:
        d = delta[: layout.n_state].reshape(n_t, 6)
        tids = np.array(layout.order)
        out.loc[tids] += d[:, :3]
        out.vel[tids] += d[:, 3:]
    for i in range(layout.n_cam):
        c0 = layout.pose_base + 6 * i
        out.cam_rot[i] = out.cam_rot[i] @ so3.exp(delta[c0 : c0 + 3])
        out.cam_trans[i] += delta[c0 + 3 : c0 + 6]
    if layout.n_spin:
        out.spin[: layout.n_spin] += delta[layout.spin_base :].reshape(layout.n_spin, 3)
    return out


# ---------------------------------------------------------------------------
# reference sparse linearization


@dataclass
class LinearSystem:
    """Stacked whitened Jacobian/residual system min ||J d - b||^2."""

    J: sp.csr_matrix
    b: np.ndarray
    column_map: dict[VariableKey, tuple[int, int]]


def linearize(g: FactorGraph, values: Values) -> LinearSystem:
    """Stack all whitened factor Jacobians into one sparse system.

    b is the negated whitened residual, so a Gauss-Newton step solves
    min ||J d - b||^2 directly.
    """
    if values.loc.shape[0] < g.n_times or values.spin.shape[0] < g.n_spins:
        missing = VariableKey(VarKind.LOCATION, values.loc.shape[0]) if values.loc.shape[0] < g.n_times else VariableKey(VarKind.SPIN, values.spin.shape[0])
        raise KeyError(f"values missing estimate for {missing}")
    layout = Layout(g)
    ev = evaluate_blocks(g, values, with_jac=True)
    jacs = _JacSource.from_eval(g, ev)
    rows_i, cols_i, vals_i, b_parts = [], [], [], []
    row0 = 0

    def emit(J, col0, row_base):
        n, r, d = J.shape
        rr = (row_base[:, None, None] + np.arange(r)[None, :, None] + np.zeros(d, dtype=np.int64)[None, None, :]).ravel()
        cc = (col0[:, None, None] + np.zeros(r, dtype=np.int64)[None, :, None] + np.arange(d)[None, None, :]).ravel()
        rows_i.append(rr)
        cols_i.append(cc)
        vals_i.append(J.ravel())

    for r_block, parts in _iter_blocks(g, layout, values, jacs):
        n, rdim = r_block.shape
        if n == 0:
            continue
        row_base = row0 + rdim * np.arange(n)
        for col0, J in parts:
            emit(J, np.asarray(col0), row_base)
        b_parts.append(-r_block.ravel())
        row0 += rdim * n

    if rows_i:
        J = sp.coo_matrix(
            (np.concatenate(vals_i), (np.concatenate(rows_i), np.concatenate(cols_i))),
            shape=(row0, layout.n_total),
        ).tocsr()
        b = np.concatenate(b_parts)
    else:
        J = sp.csr_matrix((0, layout.n_total))
        b = np.zeros(0)
    return LinearSystem(J=J, b=b, column_map=layout.column_map(g))


class _JacSource:
    """Holds whitened Jacobian arrays for the non-constant blocks."""

    def __init__(self, proj_JL, proj_Jpose, aero_JVa, aero_JW):
        self.proj_JL = proj_JL
        self.proj_Jpose = proj_Jpose
        self.aero_JVa = aero_JVa
        self.aero_JW = aero_JW

    @classmethod
    def from_eval(cls, g: FactorGraph, ev: BlockEval):
        return cls(ev.proj_JL, ev.proj_Jpose, ev.aero_JVa, ev.aero_JW)


def _iter_blocks(g: FactorGraph, layout: Layout, values: Values, jacs: _JacSource, ev: BlockEval | None = None):
    """Yield (whitened residual, [(col0 array, whitened J array), ...]) per kind.

    Parts are ordered so that within the band, earlier parts have strictly
    lower columns (needed by the banded assembler).
    """
    if ev is None:
        ev = evaluate_blocks(g, values, with_jac=False)
    I3 = np.eye(3)

    n = g.p_cam.n
    if n:
        parts = [(layout.loc_col(g.p_tid.data), jacs.proj_JL)]
        if not g.freeze_cameras:
            parts.append((layout.pose_col(g.p_cam.data), jacs.proj_Jpose))
        yield ev.proj_r, parts

    n = g.l_a.n
    if n:
        inv = 1.0 / g.l_sigma.data  # (n,3)
        dt = g.l_dt.data
        JLa = -I3[None] * inv[:, :, None]
        JVa = -dt[:, None, None] * I3[None] * inv[:, :, None]
        JLb = I3[None] * inv[:, :, None]
        yield ev.loc_r, [
            (layout.loc_col(g.l_a.data), JLa),
            (layout.vel_col(g.l_a.data), JVa),
            (layout.loc_col(g.l_b.data), JLb),
        ]

    n = g.a_a.n
    if n:
        inv = 1.0 / g.a_sigma.data
        JVb = I3[None] * inv[:, :, None]
        yield ev.aero_r, [
            (layout.vel_col(g.a_a.data), jacs.aero_JVa),
            (layout.vel_col(g.a_b.data), JVb),
            (layout.spin_col(g.a_seg.data), jacs.aero_JW),
        ]

    n = g.b_a.n
    if n:
        inv = 1.0 / g.b_sigma.data  # (n,6)
        M = g.bounce_M
        JVa = np.broadcast_to(-M[:, :3], (n, 6, 3)) * inv[:, :, None]
        JWa = np.broadcast_to(-M[:, 3:], (n, 6, 3)) * inv[:, :, None]
        top = np.zeros((6, 3))
        top[:3, :] = I3
        bot = np.zeros((6, 3))
        bot[3:, :] = I3
        JVb = np.broadcast_to(top, (n, 6, 3)) * inv[:, :, None]
        JWb = np.broadcast_to(bot, (n, 6, 3)) * inv[:, :, None]
        yield ev.bounce_r, [
            (layout.vel_col(g.b_a.data), JVa),
            (layout.vel_col(g.b_b.data), JVb),
            (layout.spin_col(g.b_seg.data), JWa),
            (layout.spin_col(g.b_seg.data + 1), JWb),
        ]

    if ev.spin_prior_r is not None:
        inv = 1.0 / g.spin_prior.sigma
        yield ev.spin_prior_r[None, :], [
            (np.array([layout.spin_col(0)]), (I3 * inv[:, None])[None]),
        ]

    if ev.pose_prior_r is not None:
        ncam = len(g.cameras)
        J = ev.pose_prior_J
        if J is None:
            from .graph import pose_prior_residual

            J = np.zeros((ncam, 6, 6))
            for i, cam in enumerate(g.cameras):
                res = pose_prior_residual(values.cam_rot[i], values.cam_trans[i], cam.rotation, cam.translation, cam.camera_id)
                J[i] = next(iter(res.jacobians.values())) / cam.pose_prior_sigma[:, None]
        yield ev.pose_prior_r, [
            (layout.pose_col(np.arange(ncam)), J),
        ]


# ---------------------------------------------------------------------------
# banded normal equations


class NormalEquations:
    def __init__(self, layout: Layout):
        self.layout = layout
        ns, nb = layout.n_state, layout.n_border
        self.ab = np.zeros((BANDWIDTH + 1, ns))  # upper banded H_state
        self.C = np.zeros((ns, nb))
        self.D = np.zeros((nb, nb))
        self.g = np.zeros(layout.n_total)

    def diag(self) -> np.ndarray:
        return np.concatenate([self.ab[BANDWIDTH], np.diag(self.D)])


def build_normal_equations(g: FactorGraph, layout: Layout, values: Values, jacs: _JacSource, ev: BlockEval | None = None) -> NormalEquations:
    ne = NormalEquations(layout)
    ns, nb = layout.n_state, layout.n_border
    band_idx_parts, band_val_parts = [], []
    c_idx_parts, c_val_parts = [], []
    g_idx_parts, g_val_parts = [], []

    for r_block, parts in _iter_blocks(g, layout, values, jacs, ev=ev):
        n = r_block.shape[0]
        if n == 0:
            continue
        cols = [np.atleast_1d(np.asarray(c)) for c, _ in parts]
        Js = [J for _, J in parts]
        in_band = [bool(np.all(c < ns)) if len(c) else True for c in cols]
        # gradient: g -= J^T r  (we store g = -J^T r)
        JTs = [J.transpose(0, 2, 1).copy() for J in Js]
        for c0, JT, J in zip(cols, JTs, Js):
            gi = np.matmul(JT, r_block[:, :, None])[:, :, 0]
            idx = c0[:, None] + np.arange(J.shape[2])[None, :]
            g_idx_parts.append(idx.ravel())
            g_val_parts.append(-gi.ravel())
        for i in range(len(parts)):
            for j in range(i, len(parts)):
                H = np.matmul(JTs[i], Js[j])
                ci, cj = cols[i], cols[j]
                di, dj = Js[i].shape[2], Js[j].shape[2]
                if in_band[i] and in_band[j]:
                    ii = ci[:, None, None] + np.arange(di)[None, :, None]
                    jj = cj[:, None, None] + np.arange(dj)[None, None, :]
                    if i == j:
                        mask = ii <= jj
                        flat = ((BANDWIDTH + ii - jj) * ns + jj)[mask]
                        vals = H[mask]
                    else:
                        # parts are column-ordered, so ii <= jj holds already
                        flat = ((BANDWIDTH + ii - jj) * ns + jj).ravel()
                        vals = H.ravel()
                    band_idx_parts.append(flat.ravel())
                    band_val_parts.append(vals.ravel())
                elif in_band[i] and not in_band[j]:
                    ii = ci[:, None, None] + np.arange(di)[None, :, None] + np.zeros(dj, dtype=np.int64)
                    jb = (cj - ns)[:, None, None] + np.arange(dj)[None, None, :] + np.zeros((di, 1), dtype=np.int64)
                    c_idx_parts.append((ii * nb + jb).ravel())
                    c_val_parts.append(H.ravel())
                elif not in_band[i] and not in_band[j]:
                    bi = ci - ns
                    bj = cj - ns
                    for a in range(di):
                        for b in range(dj):
                            np.add.at(ne.D, (bi + a, bj + b), H[:, a, b])
                            if i != j:
                                np.add.at(ne.D, (bj + b, bi + a), H[:, a, b])
                else:
                    raise AssertionError("border part ordered before band part")

    if band_idx_parts:
        acc = np.bincount(
            np.concatenate(band_idx_parts), weights=np.concatenate(band_val_parts), minlength=(BANDWIDTH + 1) * ns
        )
        ne.ab += acc.reshape(BANDWIDTH + 1, ns)
    if c_idx_parts and nb:
        acc = np.bincount(np.concatenate(c_idx_parts), weights=np.concatenate(c_val_parts), minlength=ns * nb)
        ne.C += acc.reshape(ns, nb)
    if g_idx_parts:
        ne.g += np.bincount(np.concatenate(g_idx_parts), weights=np.concatenate(g_val_parts), minlength=layout.n_total)
    return ne


@njit(cache=True, fastmath=True)
def _band_cholesky_rows(A):
    """In-place banded Cholesky (M = R^T R); returns False if not SPD.

    Row layout: A[j, bw + i - j] stores M[i, j] for j - bw <= i <= j, so
    each column of M occupies one contiguous row of A (cache-friendly).
    """
    n = A.shape[0]
    bw = A.shape[1] - 1
    for j in range(n):
        kmin = j - bw
        if kmin < 0:
            kmin = 0
        for i in range(kmin, j + 1):
            s = A[j, bw + i - j]
            k0 = i - bw
            if kmin > k0:
                k0 = kmin
            for k in range(k0, i):
                s -= A[i, bw + k - i] * A[j, bw + k - j]
            if i < j:
                A[j, bw + i - j] = s / A[i, bw]
            else:
                if s <= 0.0:
                    return False
                A[j, bw] = np.sqrt(s)
    return True


@njit(cache=True, fastmath=True)
def _band_cho_solve_rows(R, B):
    """Solve R^T R x = b in place for each column b of B (shape (n, k)).

    The RHS loop is innermost: each triangular solve is a serial
    recurrence, and interleaving the independent right-hand sides keeps
    the floating-point pipeline full while staying contiguous.
    """
    n = R.shape[0]
    bw = R.shape[1] - 1
    k = B.shape[1]
    for j in range(n):
        i0 = j - bw
        if i0 < 0:
            i0 = 0
        for i in range(i0, j):
            r = R[j, bw + i - j]
            for c in range(k):
                B[j, c] -= r * B[i, c]
        d = 1.0 / R[j, bw]
        for c in range(k):
            B[j, c] *= d
    for j in range(n - 1, -1, -1):
        i1 = j + bw + 1
        if i1 > n:
            i1 = n
        for i in range(j + 1, i1):
            r = R[i, bw + j - i]
            for c in range(k):
                B[j, c] -= r * B[i, c]
        d = 1.0 / R[j, bw]
        for c in range(k):
            B[j, c] *= d
    return B


def solve_normal_equations(
    ne: NormalEquations,
    lam: float,
    free_mask: np.ndarray | None = None,
    frozen_cols: int = 0,
) -> np.ndarray:
    """Solve (H + lam*diag(H)) delta = g via banded Cholesky + Schur border.

    frozen_cols leading state columns are held at zero step: the solve runs
    on the tail subsystem plus the full border, which is the exact solution
    conditioned on the frozen prefix (cross-terms to fixed variables drop).
    """
    layout = ne.layout
    ns, nb = layout.n_state, layout.n_border
    abr = np.ascontiguousarray(ne.ab.T)  # (ns, bw+1), one matrix column per row
    D = ne.D.copy()
    g = ne.g.copy()
    # relative damping plus an absolute floor: directions whose curvature
    # is nearly zero (an unobservable spin magnitude, say) would otherwise
    # take unbounded steps along the flat valley
    abr[:, BANDWIDTH] = abr[:, BANDWIDTH] * (1.0 + lam) + lam
    if nb:
        D[np.arange(nb), np.arange(nb)] = D[np.arange(nb), np.arange(nb)] * (1.0 + lam) + lam
    if free_mask is not None and free_mask.any():
        fs = free_mask[:ns]
        abr[fs, BANDWIDTH] = 1.0
        g[:ns][fs] = 0.0
        fb = free_mask[ns:]
        if nb:
            D[np.arange(nb)[fb], np.arange(nb)[fb]] = 1.0
            g[ns:][fb] = 0.0
    m = min(max(int(frozen_cols), 0), ns)
    delta = np.zeros(layout.n_total)
    if ns - m:
        abt = abr[m:]
        if not _band_cholesky_rows(abt):
            raise np.linalg.LinAlgError("banded system not positive definite")
        if nb:
            # one back-substitution pass for [g | C] together
            B = np.empty((ns - m, 1 + nb))
            B[:, 0] = g[m:ns]
            B[:, 1:] = ne.C[m:]
            _band_cho_solve_rows(abt, B)
            y, X = B[:, 0], B[:, 1:]
            S = D - ne.C[m:].T @ X
            rhs = g[ns:] - ne.C[m:].T @ y
            cf = sla.cho_factor(S, check_finite=False)
            db = sla.cho_solve(cf, rhs, check_finite=False)
            delta[ns:] = db
            delta[m:ns] = y - X @ db
        else:
            yb = g[m:ns].copy()[:, None]
            _band_cho_solve_rows(abt, yb)
            delta[m:ns] = yb[:, 0]
    elif nb:
        cf = sla.cho_factor(D, check_finite=False)
        delta[ns:] = sla.cho_solve(cf, g[ns:], check_finite=False)
    if free_mask is not None:
        delta[free_mask] = 0.0
    return delta


# ---------------------------------------------------------------------------
# solvers


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    cost_tol: float = 1e-9
    step_tol: float = 0.0  # accepted-step infinity norm below this converges
    lambda_init: float = 1e-6
    lambda_max: float = 1e8
    relin_threshold: float = 1e-3
    allow_free: bool = False
    # states older than this many seconds behind the newest timestamp are
    # held fixed during the solve (fixed-lag smoothing); inf solves everything
    lag_window: float = np.inf


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    relinearized_factors: int = 0
    lambda_final: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "relinearized_factors": self.relinearized_factors,
        }


def unconstrained_keys(g: FactorGraph) -> list[VariableKey]:
    """Variables that no factor touches (structurally unobservable)."""
    loc_seen = np.zeros(g.n_times, dtype=bool)
    vel_seen = np.zeros(g.n_times, dtype=bool)
    spin_seen = np.zeros(g.n_spins, dtype=bool)
    loc_seen[g.p_tid.data] = True
    loc_seen[g.l_a.data] = True
    loc_seen[g.l_b.data] = True
    vel_seen[g.l_a.data] = True
    vel_seen[g.a_a.data] = True
    vel_seen[g.a_b.data] = True
    vel_seen[g.b_a.data] = True
    vel_seen[g.b_b.data] = True
    spin_seen[g.a_seg.data] = True
    spin_seen[g.b_seg.data] = True
    if g.b_seg.n:
        spin_seen[g.b_seg.data + 1] = True
    if g.spin_prior is not None and g.n_spins:
        spin_seen[0] = True
    out = []
    for tid in range(g.n_times):
        if not loc_seen[tid]:
            out.append(VariableKey(VarKind.LOCATION, tid))
        if not vel_seen[tid]:
            out.append(VariableKey(VarKind.VELOCITY, tid))
    for j in range(g.n_spins):
        if not spin_seen[j]:
            out.append(VariableKey(VarKind.SPIN, j))
    return out


def _free_mask(g: FactorGraph, layout: Layout, keys) -> np.ndarray | None:
    if not keys:
        return None
    mask = np.zeros(layout.n_total, dtype=bool)
    for k in keys:
        c0, d = layout.key_cols(k)
        mask[c0 : c0 + d] = True
    return mask


def _lm_loop(g: FactorGraph, values: Values, config: SolverConfig, ne_fn, lam_init: float | None = None) -> tuple[Values, SolveReport]:
    """Shared LM iteration; ne_fn(values, ev, layout) -> (NormalEquations, n_relinearized)."""
    layout = Layout(g)
    free = unconstrained_keys(g)
    if free and not config.allow_free:
        raise UnderconstrainedError(free)
    fmask = _free_mask(g, layout, free)
    frozen_cols = 0
    if np.isfinite(config.lag_window) and len(layout.order) > 1:
        times = g.timestamps.data[np.asarray(layout.order)]
        frozen_cols = 6 * int(np.searchsorted(times, times[-1] - config.lag_window, side="right"))

    report = SolveReport()
    ev = evaluate_blocks(g, values, with_jac=False)
    cost = ev.cost()
    report.initial_cost = cost
    lam = config.lambda_init if lam_init is None else lam_init
    for it in range(config.max_iter):
        ne, n_relin = ne_fn(values, ev, layout)
        report.relinearized_factors += n_relin
        accepted = False
        solved_once = False
        while lam <= config.lambda_max:
            try:
                delta = solve_normal_equations(ne, lam, fmask, frozen_cols=frozen_cols)
            except (np.linalg.LinAlgError, sla.LinAlgError):
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            solved_once = True
            cand = retract(values, layout, delta)
            ev_new = evaluate_blocks(g, cand, with_jac=False)
            new_cost = ev_new.cost()
            if new_cost > cost and new_cost - cost <= config.cost_tol * max(cost, 1e-300):
                # flat to within tolerance: stop instead of damping up
                report.converged = True
                report.iterations = it + 1
                break
            if new_cost <= cost:
                values = cand
                ev = ev_new
                accepted = True
                decrease = cost - new_cost
                cost = new_cost
                lam = max(lam / 3.0, 1e-12)
                report.iterations = it + 1
                if decrease <= config.cost_tol * max(cost, 1e-300) or np.abs(delta).max() < max(1e-13, config.step_tol) or cost < 1e-14:
                    report.converged = True
                break
            lam *= 10.0
        if not accepted:
            if not solved_once:
                raise SingularSystemError("normal equations unsolvable after damping escalation")
            report.converged = True  # no improving step exists at max damping
            break
        if report.converged:
            break
    report.final_cost = cost
    report.lambda_final = lam
    return values, report


def solve_batch(g: FactorGraph, initial: Values, config: SolverConfig = SolverConfig()) -> tuple[Values, SolveReport]:
    """Reference LM solve with full relinearization every iteration."""

    def ne_fn(values, ev, layout):
        ev_j = evaluate_blocks(g, values, with_jac=True)
        jacs = _JacSource.from_eval(g, ev_j)
        return build_normal_equations(g, layout, values, jacs, ev=ev), 0

    return _lm_loop(g, initial.copy(), config, ne_fn)


# ---------------------------------------------------------------------------
# marginals


def _assemble_exact(g: FactorGraph, values: Values) -> tuple[Layout, NormalEquations]:
    layout = Layout(g)
    ev = evaluate_blocks(g, values, with_jac=True)
    jacs = _JacSource.from_eval(g, ev)
    return layout, build_normal_equations(g, layout, values, jacs, ev=ev)


def marginal_sigma(g: FactorGraph, values: Values, key: VariableKey) -> np.ndarray:
    """Per-dimension std-dev of one variable: sqrt(diag of its (J'J)^-1 block)."""
    return marginal_sigmas(g, values, [key])[key]


def marginal_sigmas(g: FactorGraph, values: Values, keys) -> dict[VariableKey, np.ndarray]:
    layout, ne = _assemble_exact(g, values)
    ns, nb = layout.n_state, layout.n_border
    free = set(unconstrained_keys(g))
    fmask = _free_mask(g, layout, free)
    if fmask is not None:
        # unobserved variables carry infinite marginals; pin their columns
        # so the factorization of the rest goes through
        fs = fmask[:ns]
        ne.ab[BANDWIDTH, fs] = 1.0
        if nb:
            fb = np.nonzero(fmask[ns:])[0]
            ne.D[fb, fb] = 1.0
    try:
        cb = sla.cholesky_banded(ne.ab, lower=False, check_finite=False) if ns else None
        if nb:
            X = sla.cho_solve_banded((cb, False), ne.C, check_finite=False) if ns else np.zeros((0, nb))
            S = ne.D - ne.C.T @ X
            cf = sla.cho_factor(S, check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgError) as e:
        raise SingularSystemError(f"information matrix is singular: {e}") from e

    def solve_cols(E):  # E: (n_total, k)
        k = E.shape[1]
        out = np.zeros((layout.n_total, k))
        if ns:
            y = sla.cho_solve_banded((cb, False), E[:ns], check_finite=False)
        else:
            y = np.zeros((0, k))
        if nb:
            rhs = E[ns:] - ne.C.T @ y
            db = sla.cho_solve(cf, rhs, check_finite=False)
            out[ns:] = db
            out[:ns] = y - (X @ db if ns else 0.0)
        else:
            out[:ns] = y
        return out

    result = {}
    for key in keys:
        if key in free:
            result[key] = np.full(layout.key_cols(key)[1], np.inf)
            continue
        c0, d = layout.key_cols(key)
        E = np.zeros((layout.n_total, d))
        E[c0 : c0 + d] = np.eye(d)
        cov = solve_cols(E)[c0 : c0 + d]
        dg = np.diag(cov)
        if np.any(dg < -1e-9) or not np.all(np.isfinite(dg)):
            raise SingularSystemError(f"negative marginal variance for {key}")
        result[key] = np.sqrt(np.maximum(dg, 0.0))
    return result


# ---------------------------------------------------------------------------
# incremental assembly

_I3 = np.eye(3)


@njit(cache=True, fastmath=True)
def _grad_add(gvec, col0, J, r):
    """gvec[cols] -= J^T r, row-batched."""
    n, rd, d = J.shape
    for i in range(n):
        c = col0[i]
        for b in range(d):
            s = 0.0
            for a in range(rd):
                s += J[i, a, b] * r[i, a]
            gvec[c + b] -= s


@njit(cache=True, fastmath=True)
def _grad_add_diag(gvec, col0, coef, r):
    """gvec[cols] -= diag(coef) r, row-batched (whitened diagonal Jacobian)."""
    n, d = coef.shape
    for i in range(n):
        c = col0[i]
        for b in range(d):
            gvec[c + b] -= coef[i, b] * r[i, b]


def _compute_gradient(g: FactorGraph, layout: Layout, ev: BlockEval, jacs: _JacSource) -> np.ndarray:
    """g = -J^T r from current residuals and (possibly cached) Jacobians."""
    gvec = np.zeros(layout.n_total)
    if g.p_cam.n:
        _grad_add(gvec, layout.loc_col(g.p_tid.data), jacs.proj_JL, ev.proj_r)
    if g.l_a.n:
        inv = 1.0 / g.l_sigma.data
        dt = g.l_dt.data[:, None]
        _grad_add_diag(gvec, layout.loc_col(g.l_a.data), -inv, ev.loc_r)
        _grad_add_diag(gvec, layout.vel_col(g.l_a.data), -dt * inv, ev.loc_r)
        _grad_add_diag(gvec, layout.loc_col(g.l_b.data), inv, ev.loc_r)
    if g.a_a.n:
        inv = 1.0 / g.a_sigma.data
        _grad_add(gvec, layout.vel_col(g.a_a.data), jacs.aero_JVa, ev.aero_r)
        _grad_add_diag(gvec, layout.vel_col(g.a_b.data), inv, ev.aero_r)
        _grad_add(gvec, layout.spin_col(g.a_seg.data), jacs.aero_JW, ev.aero_r)
    if g.b_a.n:
        for col, J, _ in _bounce_parts(g, layout, np.arange(g.b_a.n), border_local=False):
            _grad_add(gvec, np.ascontiguousarray(col), np.ascontiguousarray(J), ev.bounce_r)
    if ev.spin_prior_r is not None and g.n_spins:
        c0 = layout.spin_col(0)
        gvec[c0 : c0 + 3] -= ev.spin_prior_r / np.asarray(g.spin_prior.sigma, dtype=float)
    return gvec


@njit(cache=True, fastmath=True)
def _h_add_band(ab, ci, cj, H, diag):
    """ab[bw + ii - jj, jj] += H for block pairs; diag keeps upper half only."""
    bw = ab.shape[0] - 1
    n, di, dj = H.shape
    for i in range(n):
        c0, c1 = ci[i], cj[i]
        for a in range(di):
            for b in range(dj):
                ii = c0 + a
                jj = c1 + b
                if diag and ii > jj:
                    continue
                ab[bw + ii - jj, jj] += H[i, a, b]


@njit(cache=True, fastmath=True)
def _h_add_C(C, ci, cj, H):
    n, di, dj = H.shape
    for i in range(n):
        c0, c1 = ci[i], cj[i]
        for a in range(di):
            for b in range(dj):
                C[c0 + a, c1 + b] += H[i, a, b]


@njit(cache=True, fastmath=True)
def _h_add_D(D, ci, cj, H, sym):
    n, di, dj = H.shape
    for i in range(n):
        c0, c1 = ci[i], cj[i]
        for a in range(di):
            for b in range(dj):
                D[c0 + a, c1 + b] += H[i, a, b]
                if sym:
                    D[c1 + b, c0 + a] += H[i, a, b]


def _loc_parts(g: FactorGraph, layout: Layout, rows: np.ndarray):
    inv = 1.0 / g.l_sigma.data[rows]
    dt = g.l_dt.data[rows]
    JLa = -_I3[None] * inv[:, :, None]
    JVa = -dt[:, None, None] * _I3[None] * inv[:, :, None]
    JLb = _I3[None] * inv[:, :, None]
    return [
        (layout.loc_col(g.l_a.data[rows]), JLa, False),
        (layout.vel_col(g.l_a.data[rows]), JVa, False),
        (layout.loc_col(g.l_b.data[rows]), JLb, False),
    ]


def _bounce_parts(g: FactorGraph, layout: Layout, rows: np.ndarray, border_local: bool):
    n = len(rows)
    inv = 1.0 / g.b_sigma.data[rows]
    M = g.bounce_M
    JVa = np.broadcast_to(-M[:, :3], (n, 6, 3)) * inv[:, :, None]
    JWa = np.broadcast_to(-M[:, 3:], (n, 6, 3)) * inv[:, :, None]
    top = np.zeros((6, 3))
    top[:3, :] = _I3
    bot = np.zeros((6, 3))
    bot[3:, :] = _I3
    JVb = np.broadcast_to(top, (n, 6, 3)) * inv[:, :, None]
    JWb = np.broadcast_to(bot, (n, 6, 3)) * inv[:, :, None]
    seg = g.b_seg.data[rows]
    scol = layout.spin_border_col if border_local else layout.spin_col
    return [
        (layout.vel_col(g.b_a.data[rows]), JVa, False),
        (layout.vel_col(g.b_b.data[rows]), JVb, False),
        (scol(seg), JWa, True),
        (scol(seg + 1), JWb, True),
    ]


def _aero_parts(g: FactorGraph, layout: Layout, rows: np.ndarray, JVa, JW):
    inv = 1.0 / g.a_sigma.data[rows]
    JVb = _I3[None] * inv[:, :, None]
    return [
        (layout.vel_col(g.a_a.data[rows]), JVa, False),
        (layout.vel_col(g.a_b.data[rows]), JVb, False),
        (layout.spin_border_col(g.a_seg.data[rows]), JW, True),
    ]


class _DeltaAssembler:
    """Banded/border Gauss-Newton matrices kept alive across updates.

    The band (ab), band-border coupling (C), and border (D) blocks are
    mutated by per-row additions/subtractions as factors arrive or get
    relinearized. A layout-epoch change on the graph (splice, bounce
    insertion, sigma change, non-tail growth) invalidates everything.
    Border (spin) column offsets never move between resets; band columns
    only grow at the tail.
    """

    def __init__(self):
        self.epoch = -1
        self.cap = 0
        self.nb = 0
        self.ab = None
        self.C = None
        self.D = None
        self.n_loc = 0
        self.n_bounce = 0
        self.added_pj = np.zeros(0, dtype=bool)
        self.added_ae = np.zeros(0, dtype=bool)

    def reset(self, layout: Layout) -> None:
        self.cap = max(2 * layout.n_state, 384)
        self.nb = layout.n_border
        self.ab = np.zeros((BANDWIDTH + 1, self.cap))
        self.C = np.zeros((self.cap, self.nb))
        self.D = np.zeros((self.nb, self.nb))
        self.n_loc = 0
        self.n_bounce = 0
        self.added_pj = np.zeros(0, dtype=bool)
        self.added_ae = np.zeros(0, dtype=bool)

    def ensure(self, layout: Layout) -> None:
        if layout.n_state > self.cap:
            grow = max(2 * self.cap, layout.n_state) - self.cap
            self.ab = np.concatenate([self.ab, np.zeros((BANDWIDTH + 1, grow))], axis=1)
            self.C = np.concatenate([self.C, np.zeros((grow, self.nb))], axis=0)
            self.cap += grow

    @staticmethod
    def _flags(flags: np.ndarray, n: int) -> np.ndarray:
        if n > len(flags):
            flags = np.concatenate([flags, np.zeros(n - len(flags), dtype=bool)])
        return flags

    def scatter(self, parts, sign: float) -> None:
        """Add sign * J^T J of one factor block to the stored matrices.

        parts: [(col0 (n,), J (n,r,d), is_border)] with band parts first
        and band columns strictly increasing across parts; border columns
        are border-local.
        """
        cols = [np.ascontiguousarray(np.atleast_1d(np.asarray(c))) for c, _, _ in parts]
        Js = [J for _, J, _ in parts]
        border = [b for _, _, b in parts]
        JTs = [J.transpose(0, 2, 1).copy() for J in Js]
        for i in range(len(parts)):
            for j in range(i, len(parts)):
                H = np.matmul(JTs[i], Js[j])
                if sign < 0:
                    H = -H
                ci, cj = cols[i], cols[j]
                if not border[i] and not border[j]:
                    _h_add_band(self.ab, ci, cj, H, i == j)
                elif not border[i] and border[j]:
                    _h_add_C(self.C, ci, cj, H)
                elif border[i] and border[j]:
                    _h_add_D(self.D, ci, cj, H, i != j)
                else:
                    raise AssertionError("border part ordered before band part")


# ---------------------------------------------------------------------------
# incremental solver


class IncrementalSolver:
    """Warm-started solver over a growing graph.

    The owner edits the graph (new variables, factors, bounce insertions),
    seeds initial estimates for the new variables in .values, then calls
    update(). Jacobians of unchanged factors are reused until their
    variables drift past relin_threshold from the stored linearization
    point.
    """

    def __init__(self, g: FactorGraph, config: SolverConfig = SolverConfig(allow_free=True)):
        self.graph = g
        self.config = replace(config, allow_free=True)
        self.values = Values.for_graph(g)
        # caches: projection
        self._pj_lin = None  # (n,3) L at linearization
        self._pj_JL = None
        self._pj_Jpose = None
        self._pj_n = 0
        # caches: aero
        self._ae_lin = None  # (n,6) [Va, W]
        self._ae_JVa = None
        self._ae_JW = None
        self._ae_id = None  # (n,3) (tid_a, tid_b, seg) at cache time
        self._ae_n = 0
        self._lam = config.lambda_init
        self._asm = _DeltaAssembler()

    # cache maintenance -----------------------------------------------------

    def _sync_caches(self):
        g = self.graph
        npj, nae = g.p_cam.n, g.a_a.n

        def grow(arr, n_old, n_new, tail):
            if arr is None:
                return np.full((max(n_new, 16), *tail), np.nan)
            if n_new > arr.shape[0]:
                extra = np.full((max(n_new, 2 * arr.shape[0]) - arr.shape[0], *tail), np.nan)
                return np.concatenate([arr, extra], axis=0)
            return arr

        self._pj_lin = grow(self._pj_lin, self._pj_n, npj, (3,))
        self._pj_JL = grow(self._pj_JL, self._pj_n, npj, (2, 3))
        if not g.freeze_cameras:
            self._pj_Jpose = grow(self._pj_Jpose, self._pj_n, npj, (2, 6))
        self._ae_lin = grow(self._ae_lin, self._ae_n, nae, (6,))
        self._ae_JVa = grow(self._ae_JVa, self._ae_n, nae, (3, 3))
        self._ae_JW = grow(self._ae_JW, self._ae_n, nae, (3, 3))
        # projection factors are append-only, so cached rows stay aligned.
        # aero rows move under swap_remove (splice, bounce insertion) and
        # their segment labels can change; invalidate any row whose
        # (tid_a, tid_b, seg) identity differs from what was cached.
        ident = np.stack([g.a_a.data, g.a_b.data, g.a_seg.data], axis=1) if nae else np.zeros((0, 3), dtype=np.int64)
        if self._ae_id is not None:
            m = min(nae, self._ae_id.shape[0])
            changed = np.any(ident[:m] != self._ae_id[:m], axis=1)
            self._ae_lin[:m][changed] = np.nan
        self._ae_id = ident.copy()
        self._pj_n, self._ae_n = npj, nae

    def notify_rows_dirty(self, block: str, idx) -> None:
        """Mark cached rows stale after in-place edits (swap/segment changes)."""
        if block == "projection" and self._pj_lin is not None:
            self._pj_lin[idx] = np.nan
        if block == "aero" and self._ae_lin is not None:
            self._ae_lin[idx] = np.nan

    def invalidate(self) -> None:
        self._pj_lin = None
        self._pj_JL = None
        self._pj_Jpose = None
        self._pj_n = 0
        self._ae_lin = None
        self._ae_JVa = None
        self._ae_JW = None
        self._ae_id = None
        self._ae_n = 0
        self._asm.epoch = -1

    # normal equations ------------------------------------------------------

    def _ne_fn(self, values: Values, ev: BlockEval, layout: Layout):
        """Refresh stale Jacobians, maintain the persistent H, build g.

        With frozen cameras the Gauss-Newton matrices live in the delta
        assembler: only new and relinearized factor rows touch them. With
        free camera poses (rare, offline) the full build runs instead.
        """
        g = self.graph
        use_delta = g.freeze_cameras
        self._sync_caches()
        asm = self._asm
        if use_delta:
            if asm.epoch != g.layout_epoch or asm.nb != layout.n_border or asm.ab is None:
                asm.reset(layout)
                asm.epoch = g.layout_epoch
                if g.spin_prior is not None and g.n_spins:
                    inv = 1.0 / np.asarray(g.spin_prior.sigma, dtype=float)
                    asm.scatter([(np.array([layout.spin_border_col(0)]), (_I3 * inv[:, None])[None], True)], 1.0)
            asm.ensure(layout)
        thr = self.config.relin_threshold
        n_relin = 0

        npj = g.p_cam.n
        if npj:
            L = values.loc[g.p_tid.data]
            moved = np.max(np.abs(L - self._pj_lin[:npj]), axis=1)
            stale = (~np.isfinite(moved) | (moved >= thr)) if thr > 0 else np.ones(npj, dtype=bool)
            if not g.freeze_cameras:
                stale = np.ones(npj, dtype=bool)  # pose motion not tracked per-row
            cols = layout.loc_col(g.p_tid.data)
            if use_delta:
                asm.added_pj = asm._flags(asm.added_pj, npj)
                sub = np.nonzero(stale & asm.added_pj[:npj])[0]
                if len(sub):
                    asm.scatter([(cols[sub], self._pj_JL[sub], False)], -1.0)
            idx = np.nonzero(stale)[0]
            if len(idx):
                ci = g.p_cam.data[idx]
                _, JL, JX, _ = projection_kernel(
                    values.cam_rot[ci], values.cam_trans[ci], g._fx_arr()[ci], g._fy_arr()[ci],
                    L[idx], g.p_pix.data[idx], with_pose_jac=not g.freeze_cameras,
                )
                inv = 1.0 / g.p_sigma.data[idx]
                self._pj_JL[idx] = JL * inv[:, None, None]
                if JX is not None:
                    self._pj_Jpose[idx] = JX * inv[:, None, None]
                self._pj_lin[idx] = L[idx]
                n_relin += len(idx)
            if use_delta:
                need = np.nonzero(stale | ~asm.added_pj[:npj])[0]
                if len(need):
                    asm.scatter([(cols[need], self._pj_JL[need], False)], 1.0)
                    asm.added_pj[need] = True

        nae = g.a_a.n
        if nae:
            cur = np.concatenate([values.vel[g.a_a.data], values.spin[g.a_seg.data]], axis=1)
            dV = np.max(np.abs(cur[:, :3] - self._ae_lin[:nae, :3]), axis=1)
            dW = np.linalg.norm(cur[:, 3:] - self._ae_lin[:nae, 3:], axis=1)
            # the spin is shared by every aero factor and drifts a little on
            # each update; its Jacobian changes on the scale of |W|, so use
            # a coarser, relative staleness test for the spin columns
            w_lin = np.linalg.norm(self._ae_lin[:nae, 3:], axis=1)
            thr_w = np.maximum(2.0, 0.05 * w_lin)
            moved_ok = np.isfinite(dV) & np.isfinite(dW)
            if thr > 0:
                stale = ~moved_ok | (dV >= thr) | (dW >= thr_w)
            else:
                stale = np.ones(nae, dtype=bool)
            if use_delta:
                asm.added_ae = asm._flags(asm.added_ae, nae)
                sub = np.nonzero(stale & asm.added_ae[:nae])[0]
                if len(sub):
                    asm.scatter(_aero_parts(g, layout, sub, self._ae_JVa[sub], self._ae_JW[sub]), -1.0)
            idx = np.nonzero(stale)[0]
            if len(idx):
                _, JVa, JW = aero_kernel(
                    values.vel[g.a_a.data[idx]], values.vel[g.a_b.data[idx]],
                    values.spin[g.a_seg.data[idx]], g.a_dt.data[idx], g.params,
                )
                inv = 1.0 / g.a_sigma.data[idx]
                self._ae_JVa[idx] = JVa * inv[:, :, None]
                self._ae_JW[idx] = JW * inv[:, :, None]
                self._ae_lin[idx] = cur[idx]
                n_relin += len(idx)
            if use_delta:
                need = np.nonzero(stale | ~asm.added_ae[:nae])[0]
                if len(need):
                    asm.scatter(_aero_parts(g, layout, need, self._ae_JVa[need], self._ae_JW[need]), 1.0)
                    asm.added_ae[need] = True

        jacs = _JacSource(
            proj_JL=self._pj_JL[:npj] if npj else np.zeros((0, 2, 3)),
            proj_Jpose=(self._pj_Jpose[:npj] if (npj and not g.freeze_cameras) else None),
            aero_JVa=self._ae_JVa[:nae] if nae else np.zeros((0, 3, 3)),
            aero_JW=self._ae_JW[:nae] if nae else np.zeros((0, 3, 3)),
        )
        if not use_delta:
            return build_normal_equations(g, layout, values, jacs, ev=ev), n_relin

        if g.l_a.n > asm.n_loc:
            rows = np.arange(asm.n_loc, g.l_a.n)
            asm.scatter(_loc_parts(g, layout, rows), 1.0)
            asm.n_loc = g.l_a.n
        if g.b_a.n > asm.n_bounce:
            rows = np.arange(asm.n_bounce, g.b_a.n)
            asm.scatter(_bounce_parts(g, layout, rows, border_local=True), 1.0)
            asm.n_bounce = g.b_a.n

        ne = NormalEquations.__new__(NormalEquations)
        ne.layout = layout
        ne.ab = asm.ab[:, : layout.n_state]
        ne.C = asm.C[: layout.n_state]
        ne.D = asm.D
        ne.g = _compute_gradient(g, layout, ev, jacs)
        return ne, n_relin

    # solving ---------------------------------------------------------------

    def update(self) -> tuple[Values, SolveReport]:
        """Re-optimize after graph edits; returns (values, report)."""
        self.values.resize(self.graph.n_times, self.graph.n_spins)
        values, report = _lm_loop(
            self.graph, self.values, self.config, self._ne_fn, lam_init=self._lam
        )
        self.values = values
        self._lam = min(max(report.lambda_final, 1e-6), 1e-2)
        return values, report

    def marginals(self, keys) -> dict[VariableKey, np.ndarray]:
        return marginal_sigmas(self.graph, self.values, keys)


def solve_incremental(state: IncrementalSolver, new_values_init: dict | None = None) -> tuple[Values, SolveReport]:
    """Functional wrapper: seed freshly created variables, then update."""
    state.values.resize(state.graph.n_times, state.graph.n_spins)
    if new_values_init:
        for key, val in new_values_init.items():
            state.values.set(key, val)
    return state.update()
