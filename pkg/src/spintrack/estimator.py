"""Streaming ball-state estimation from asynchronous detections.

The Estimator ingests pixel detections one at a time (in arrival order,
which may differ from capture order), maintains a factor graph over all
timestamps seen so far, re-optimizes incrementally after each detection,
detects bounces from the smoothed trajectory, and predicts the next
landing points by integrating the current state forward.

label_spin refines the spin estimate offline by re-solving the finished
graph with the spin prior recentred on the previous solution until the
initial spin stops moving.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace

import numpy as np

from . import physics
from .core import CameraModel, Detection, NoiseSpec, PhysicsParams, SpinPrior
from .graph import MIN_DEPTH, FactorGraph, VariableKey, VarKind
from .physics import FlightState, LandingPrediction
from .solver import IncrementalSolver, SolverConfig, SolveReport, Values, solve_batch

SPIN_FLOOR = 30.0  # rad/s; see Estimator._guard_spin


@dataclass(frozen=True)
class EstimatorConfig:
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    # streaming updates run with looser tolerances than the batch
    # reference; each later ingest keeps polishing the same system, and a
    # final tight solve (solve_full) recovers the batch answer exactly
    solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(
            allow_free=True,
            cost_tol=1e-6,
            step_tol=1e-5,
            max_iter=10,
            relin_threshold=0.1,
            lag_window=0.5,
        )
    )
    late_tolerance: float = 0.05  # seconds; older detections are dropped
    # landing predictions are withheld until the state is minimally
    # constrained; earlier ones would be driven by one or two rays
    min_predict_detections: int = 10
    min_predict_span: float = 0.06  # seconds of observed flight
    # gauge fix: in flight the lift model constrains only the spin
    # direction, so while no bounce pins the magnitude the uninformative
    # prior is recentred at this nominal rate along the estimated axis
    nominal_spin: float = 2 * np.pi * 30.0  # rad/s
    bounce_check_lag: float = 0.008  # wait this long past an interval before gating
    bounce_hysteresis: float = 0.05  # min spacing between accepted bounces
    bounce_height_margin: float = 0.08  # only gate intervals this close to contact
    freeze_cameras: bool = True
    init_height: float = 1.0  # assumed height for the first single-ray init
    max_bounces: int = 2  # landing predictions stop after the second touch


@dataclass
class EstimateSnapshot:
    """State estimate and landing prediction after one ingested detection."""

    t: float
    location: np.ndarray
    velocity: np.ndarray
    spin: np.ndarray
    segment: int
    n_bounces: int
    n_detections: int
    landing: LandingPrediction | None
    report: SolveReport
    sigmas: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "t": self.t,
            "location": [float(x) for x in self.location],
            "velocity": [float(x) for x in self.velocity],
            "spin": [float(x) for x in self.spin],
            "segment": self.segment,
            "n_bounces": self.n_bounces,
            "n_detections": self.n_detections,
        }
        if self.landing is not None:
            d["landing"] = {
                "truncated": self.landing.truncated,
                "first": None if self.landing.first is None else {
                    "t": float(self.landing.first[1]), "point": [float(x) for x in self.landing.first[0]],
                },
                "second": None if self.landing.second is None else {
                    "t": float(self.landing.second[1]), "point": [float(x) for x in self.landing.second[0]],
                },
            }
        if self.sigmas is not None:
            d["sigmas"] = {str(k): [float(x) for x in v] for k, v in self.sigmas.items()}
        return d


class Estimator:
    """Incremental factor-graph estimator over a stream of detections."""

    def __init__(
        self,
        cameras: list[CameraModel],
        params: PhysicsParams | None = None,
        config: EstimatorConfig | None = None,
        spin_prior: SpinPrior | None = None,
    ):
        self.params = params or PhysicsParams()
        self.config = config or EstimatorConfig()
        self.graph = FactorGraph(
            cameras, self.params, self.config.noise, freeze_cameras=self.config.freeze_cameras
        )
        self.solver = IncrementalSolver(self.graph, self.config.solver)
        self.spin_prior = spin_prior or SpinPrior.zero_default()
        self.graph.set_spin_prior(self.spin_prior)
        self.n_ingested = 0
        self.n_dropped_late = 0
        self.n_dropped_cheirality = 0
        self.n_dropped_unspliceable = 0
        self._pending_contact: float | None = None

    # -- helpers -------------------------------------------------------------

    @property
    def values(self) -> Values:
        return self.solver.values

    def _latest_time(self) -> float | None:
        if not self.graph.order:
            return None
        return self.graph.time_of(self.graph.order[-1])

    def _tid_at_time(self, t: float, tol: float = 1e-9) -> int | None:
        times = self.graph.timestamps.data
        order = self.graph.order
        keys = [times[tid] for tid in order]
        i = bisect.bisect_left(keys, t - tol)
        if i < len(order) and abs(keys[i] - t) <= tol:
            return order[i]
        return None

    def _init_location(self, det: Detection, cam: CameraModel) -> np.ndarray:
        order = self.graph.order
        v = self.values
        if len(order) >= 1:
            prev = order[-1]
            dt = det.timestamp - self.graph.time_of(prev)
            return v.loc[prev] + v.vel[prev] * max(dt, 0.0)
        origin, direction = cam.back_project(det.pixel)
        if abs(direction[2]) > 1e-6:
            s = (self.config.init_height - origin[2]) / direction[2]
            if s > MIN_DEPTH:
                return origin + s * direction
        return origin + 10.0 * direction

    def _spin_init(self) -> np.ndarray:
        w = np.array(self.spin_prior.spin, dtype=float)
        if np.linalg.norm(w) < SPIN_FLOOR:
            # exact zero spin is a stationary point of the normalized lift
            # model (direction undefined), so start at a healthy magnitude
            w = np.full(3, SPIN_FLOOR / np.sqrt(3.0))
        return w

    # -- ingest --------------------------------------------------------------

    def ingest(self, det: Detection, snapshot: bool = True, with_sigmas: bool = False) -> EstimateSnapshot | None:
        """Add one detection, re-solve, and (optionally) return a snapshot."""
        g = self.graph
        if det.camera_id not in g.cam_index:
            raise KeyError(f"detection references unknown camera {det.camera_id}")
        cam = g.cameras[g.cam_index[det.camera_id]]
        self.n_ingested += 1

        latest = self._latest_time()
        if latest is not None and det.timestamp < latest - self.config.late_tolerance:
            self.n_dropped_late += 1
            return self._snapshot(snapshot, with_sigmas, SolveReport())

        tid = self._tid_at_time(det.timestamp)
        if tid is None:
            tid = self._add_linked_timestamp(det)
            if tid is None:
                return self._snapshot(snapshot, with_sigmas, SolveReport())
        L = self.values.loc[tid]
        depth = (cam.rotation @ L + cam.translation)[2]
        if depth < MIN_DEPTH:
            self.n_dropped_cheirality += 1
            return self._snapshot(snapshot, with_sigmas, SolveReport())
        g.add_projection(det.camera_id, tid, det.pixel, det.pixel_sigma)

        _, report = self.solver.update()
        self._guard_spin()
        if self._maybe_reseed_spin():
            _, report3 = self.solver.update()
            self._guard_spin()
            report.iterations += report3.iterations
            report.relinearized_factors += report3.relinearized_factors
            report.final_cost = report3.final_cost
            report.converged = report3.converged
        if self._maybe_insert_bounce():
            _, report2 = self.solver.update()
            self._guard_spin()
            report.iterations += report2.iterations
            report.relinearized_factors += report2.relinearized_factors
            report.final_cost = report2.final_cost
            report.converged = report2.converged
        return self._snapshot(snapshot, with_sigmas, report)

    def _add_linked_timestamp(self, det: Detection) -> int | None:
        """Create and chain-link a timestamp for det.timestamp; None if unspliceable."""
        g = self.graph
        cam = g.cameras[g.cam_index[det.camera_id]]
        L_init = self._init_location(det, cam)
        order_before = list(g.order)
        latest = self._latest_time()
        is_append = latest is None or det.timestamp > latest

        if is_append or len(order_before) < 2:
            tid = g.add_timestamp(det.timestamp)
        else:
            # landing inside an existing interval: make sure it carries an
            # aero factor (a bounce interval cannot be split; drop instead)
            pos = bisect.bisect_left([g.time_of(x) for x in order_before], det.timestamp)
            if 0 < pos < len(order_before):
                a, b = order_before[pos - 1], order_before[pos]
                if np.any((g.b_a.data == a) & (g.b_b.data == b)):
                    self.n_dropped_unspliceable += 1
                    return None
            tid = g.splice_timestamp(det.timestamp)

        self.values.resize(g.n_times, g.n_spins)
        self.values.loc[tid] = L_init
        if g.n_spins >= 1 and len(g.order) == 1:
            self.values.spin[0] = self._spin_init()

        pos = g.order.index(tid)
        if len(g.order) > 1 and (pos == 0 or pos == len(g.order) - 1):
            if pos == 0:
                other = g.order[1]
                g.add_location(tid, other)
                g.add_aero(tid, other, g.segment_of_time(det.timestamp))
                self.values.vel[tid] = self.values.vel[other]
            else:
                other = g.order[-2]
                g.add_location(other, tid)
                g.add_aero(other, tid, g.segment_of_time(g.time_of(other)))
                dt = det.timestamp - g.time_of(other)
                if dt > 1e-6 and np.any(self.values.vel[other]):
                    self.values.vel[tid] = self.values.vel[other] + np.asarray(self.params.gravity) * dt
                else:
                    self.values.vel[tid] = self.values.vel[other]
        elif len(g.order) > 1:
            # spliced mid-chain: interpolate neighbors
            a, b = g.order[pos - 1], g.order[pos + 1]
            self.values.vel[tid] = 0.5 * (self.values.vel[a] + self.values.vel[b])
        return tid

    # -- bounce gating -------------------------------------------------------

    def _maybe_insert_bounce(self) -> bool:
        """Predictive contact gate.

        An unmodeled bounce never shows up as a crossing in the smoothed
        estimate: the tight dynamics factors smear the kink and the tail
        plateaus above the ground. Instead, while the ball is descending
        we keep predicting the contact time by integrating the latest
        state forward; the prediction is frozen once data reaches it
        (later updates are contaminated by the unmodeled kink), and the
        bounce factor is inserted into the interval containing the
        predicted contact once detections extend past it by the check
        lag.
        """
        g = self.graph
        cfg = self.config
        latest = self._latest_time()
        if latest is None or len(g.order) < 4:
            return False
        v = self.values
        tid_last = g.order[-1]
        z = v.loc[tid_last][2]
        # refresh the pending contact prediction from the clean tail
        if self._pending_contact is None or latest < self._pending_contact:
            self._pending_contact = None
            if z < 1.0 and v.vel[tid_last][2] < -0.5:
                near = any(abs(latest - tb) < cfg.bounce_hysteresis for tb in g.bounce_times)
                if not near:
                    try:
                        state = FlightState(L=v.loc[tid_last], V=v.vel[tid_last], W=v.spin[g.n_spins - 1], t=latest)
                        traj = physics.integrate(state, 0.25, 2e-3, self.params, max_bounces=1)
                        if traj.bounces:
                            t_pred = float(traj.bounces[0].time)
                            if all(abs(t_pred - tb) > cfg.bounce_hysteresis for tb in g.bounce_times):
                                self._pending_contact = t_pred
                    except (physics.IntegrationError, ValueError):
                        pass
        if self._pending_contact is None:
            return False
        t_star = self._pending_contact
        if latest < t_star + cfg.bounce_check_lag:
            return False
        # find the chain interval containing the predicted contact
        order = g.order
        times = self.graph.timestamps.data
        pos = bisect.bisect_right([times[t] for t in order], t_star)
        self._pending_contact = None  # consumed (or unusable)
        if pos <= 0 or pos >= len(order):
            return False
        a, b = order[pos - 1], order[pos]
        if not np.any((g.a_a.data == a) & (g.a_b.data == b)):
            return False  # already a bounce here or unlinked
        new_seg = g.insert_bounce(a, b, t_star)
        v_in = v.vel[a].copy()
        if v_in[2] >= 0:
            v_in[2] = -0.1
        _, w_out = physics.bounce_map(v_in, v.spin[new_seg - 1], self.params)
        self.values.resize(g.n_times, g.n_spins)
        self.values.spin[new_seg] = w_out
        # the post-bounce tail was optimized without the kink; re-seed its
        # velocities from the bounce map so the next solve starts close
        v_out, _ = physics.bounce_map(v_in, v.spin[new_seg - 1], self.params)
        for tid in order[pos:]:
            if v.vel[tid][2] < 0.5:
                v.vel[tid] = v_out
        return True

    def _guard_spin(self) -> None:
        """Keep unobservable spin magnitudes at a healthy scale.

        With normalized lift the flight factors fix only the spin
        direction; until a bounce factor pins a spin's magnitude, a
        zero-mean prior slowly collapses it toward zero, where the
        direction becomes ill-conditioned and the optimizer crawls.
        Magnitude is a pure gauge freedom there (the flight cost depends
        only on the spin direction), so renormalizing unpinned spins to
        the configured nominal rate is cost-invariant — and it matters
        downstream because the bounce map is linear in W, so predictions
        through a future bounce inherit whatever magnitude we pick.
        """
        g = self.graph
        v = self.values
        nominal = self.config.nominal_spin
        pinned = set()
        for s in g.b_seg.data:
            pinned.add(int(s))
            pinned.add(int(s) + 1)
        if np.linalg.norm(self.spin_prior.spin) >= SPIN_FLOOR:
            pinned.add(0)
        for j in range(g.n_spins):
            if j in pinned:
                continue
            norm = np.linalg.norm(v.spin[j])
            if norm > 1e-9:
                v.spin[j] *= nominal / norm
            else:
                v.spin[j] = np.full(3, nominal / np.sqrt(3.0))
        # an uninformative prior exerts a steady pull of the unobservable
        # magnitude toward zero; recentre its mean on the current estimate
        # so the solver sees no spurious gradient between updates (the
        # information it contributes is unchanged)
        if (
            g.spin_prior is not None
            and g.n_spins
            and np.linalg.norm(self.spin_prior.spin) < SPIN_FLOOR
            and not np.array_equal(g.spin_prior.spin, v.spin[0])
        ):
            g.set_spin_prior(SpinPrior(spin=v.spin[0].copy(), sigma=g.spin_prior.sigma))

    def _maybe_reseed_spin(self) -> bool:
        """Data-driven re-seed of the pre-bounce spin direction.

        The spin direction enters the flight model only through the lift
        direction unit(W x V), so the cost surface over the direction is
        multi-modal and gradient steps from a bad initialization can
        stall on the wrong side of the sphere. The smoothed velocity
        chain exposes the lift directly -- the acceleration left after
        drag and gravity -- and W = unit(V x a_lift) reproduces it. The
        proposal is accepted only when it lowers the aero-factor cost at
        the current velocities, so noise-driven proposals are rejected.
        """
        g = self.graph
        v = self.values
        if (
            g.n_spins != 1
            or g.b_a.n > 0
            or g.a_a.n < 12
            or np.linalg.norm(self.spin_prior.spin) >= SPIN_FLOOR
        ):
            return False
        Va = v.vel[g.a_a.data]
        Vb = v.vel[g.a_b.data]
        dt = g.a_dt.data
        a_obs = (Vb - Va) / dt[:, None]
        a_lift = a_obs - physics.drag_force(Va, self.params) / self.params.mass - self.params.gravity
        d_hat = np.sum(a_lift * dt[:, None], axis=0)
        dn = np.linalg.norm(d_hat)
        if dn < 1e-9:
            return False
        w_prop = np.cross(np.mean(Va, axis=0), d_hat / dn)
        wn = np.linalg.norm(w_prop)
        if wn < 1e-9:
            return False
        w_prop *= self.config.nominal_spin / wn

        def aero_cost(W):
            acc = physics.acceleration(Va, np.broadcast_to(W, Va.shape), self.params)
            r = (Vb - Va - acc * dt[:, None]) / g.a_sigma.data
            return float(np.sum(r * r))

        if aero_cost(w_prop) >= 0.98 * aero_cost(v.spin[0]):
            return False
        v.spin[0] = w_prop
        if g.spin_prior is not None:
            g.set_spin_prior(SpinPrior(spin=w_prop.copy(), sigma=g.spin_prior.sigma))
        return True

    # -- output --------------------------------------------------------------

    def _snapshot(self, want: bool, with_sigmas: bool, report: SolveReport) -> EstimateSnapshot | None:
        if not want:
            return None
        return self.snapshot(with_sigmas=with_sigmas, report=report)

    def snapshot(self, with_sigmas: bool = False, report: SolveReport | None = None) -> EstimateSnapshot | None:
        g = self.graph
        if not g.order:
            return None
        tid = g.order[-1]
        t = g.time_of(tid)
        seg = g.n_spins - 1
        v = self.values
        cfg = self.config
        landing = None
        constrained = (
            g.p_cam.n >= cfg.min_predict_detections
            and t - g.time_of(g.order[0]) >= cfg.min_predict_span
        )
        if constrained and np.any(v.vel[tid]):
            try:
                state = FlightState(L=v.loc[tid], V=v.vel[tid], W=v.spin[seg], t=t)
                landing = physics.predict_landings(state, self.params)
            except (physics.IntegrationError, ValueError):
                landing = None
        sigmas = None
        if with_sigmas:
            keys = [
                VariableKey(VarKind.LOCATION, tid),
                VariableKey(VarKind.VELOCITY, tid),
                VariableKey(VarKind.SPIN, seg),
            ]
            sigmas = self.solver.marginals(keys)
        return EstimateSnapshot(
            t=t,
            location=v.loc[tid].copy(),
            velocity=v.vel[tid].copy(),
            spin=v.spin[seg].copy(),
            segment=seg,
            n_bounces=len(g.bounce_times),
            n_detections=g.p_cam.n,
            landing=landing,
            report=report or SolveReport(),
            sigmas=sigmas,
        )

    def solve_full(self) -> tuple[Values, SolveReport]:
        """Batch re-solve of the whole graph from the incremental solution."""
        cfg = replace(self.config.solver, allow_free=True, relin_threshold=0.0, lag_window=np.inf)
        values, report = solve_batch(self.graph, self.values, cfg)
        self.solver.values = values
        return values, report


# ---------------------------------------------------------------------------
# offline spin labeling


class SpinLabelError(RuntimeError):
    pass


@dataclass
class SpinLabelResult:
    spins: np.ndarray  # (n_segments, 3) rad/s
    iterations: int
    converged: bool
    values: Values


def label_spin(
    detections: list[Detection],
    cameras: list[CameraModel],
    params: PhysicsParams | None = None,
    config: EstimatorConfig | None = None,
    sigma: float | None = None,
    tol: float = 2 * np.pi * 0.1,
    max_iter: int = 20,
    divergence_limit: float = 2 * np.pi * 200.0,
    estimator: "Estimator | None" = None,
) -> SpinLabelResult:
    """Estimate per-segment spin offline by iterated prior recentring.

    Solves the full graph, moves the spin prior mean to the estimated
    initial spin, and repeats until the estimate stops changing. The
    prior sigma stays wide so the data dominates at the fixed point.

    Pass estimator to reuse one that has already ingested the detections
    (its graph is modified in place); otherwise a fresh Estimator streams
    the detection list first.
    """
    params = params or PhysicsParams()
    config = config or EstimatorConfig()
    sigma = sigma if sigma is not None else 2 * np.pi * 50.0
    if estimator is not None:
        est = estimator
        config = est.config
        params = est.params
    else:
        est = Estimator(cameras, params, config)
        for det in detections:
            est.ingest(det, snapshot=False)
    if est.graph.n_spins == 0 or est.graph.p_cam.n == 0:
        raise SpinLabelError("no usable detections to label")

    g = est.graph
    values = est.values
    w0 = values.spin[0].copy()
    solver_cfg = replace(config.solver, allow_free=True, lag_window=np.inf)
    converged = False
    iters = 0
    for iters in range(1, max_iter + 1):
        g.set_spin_prior(SpinPrior(spin=w0, sigma=np.full(3, sigma)))
        values, _ = solve_batch(g, values, solver_cfg)
        w_new = values.spin[0].copy()
        if np.linalg.norm(w_new) > divergence_limit:
            raise SpinLabelError(
                f"spin labeling diverged: |W0| = {np.linalg.norm(w_new):.1f} rad/s"
            )
        if np.linalg.norm(w_new - w0) < tol:
            w0 = w_new
            converged = True
            break
        w0 = w_new
    return SpinLabelResult(spins=values.spin.copy(), iterations=iters, converged=converged, values=values)
