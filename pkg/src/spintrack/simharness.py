"""Synthetic evaluation harness: cameras, shots, detections and metrics.

Ground truth comes from the RK4 integrator at a fine step. Detections
are produced per camera at its own frame rate and phase, with pixel
noise, dropouts, and a transport latency that perturbs arrival order
relative to capture order. Evaluation bins landing-prediction errors by
progress through the detection stream (quartile stages) so early- vs
late-rally accuracy can be compared across methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import physics
from .core import CameraModel, Detection, PhysicsParams

COURT_HALF_LENGTH = 11.885  # m, tennis court along x
COURT_HALF_WIDTH = 5.485  # m, doubles court along y


@dataclass(frozen=True)
class ShotSpec:
    """Initial conditions of one simulated shot."""

    location: np.ndarray  # (3,) m
    velocity: np.ndarray  # (3,) m/s
    spin: np.ndarray  # (3,) rad/s
    seed: int = 0

    def initial_state(self) -> physics.FlightState:
        return physics.FlightState(L=self.location, V=self.velocity, W=self.spin, t=0.0)


@dataclass(frozen=True)
class CameraSimSpec:
    """Sampling model of one camera's detection stream."""

    rate_hz: float = 140.0
    phase: float = 0.0  # seconds, first frame offset
    pixel_noise: float = 1.0  # px std-dev
    dropout: float = 0.02  # per-frame miss probability
    latency_mean: float = 1e-3  # seconds capture -> arrival
    latency_jitter: float = 0.5e-3  # std-dev of latency


def _look_at_rotation(position, target) -> np.ndarray:
    """World->camera rotation with +z toward target, +y roughly down."""
    z = np.asarray(target, float) - np.asarray(position, float)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, -1.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def make_court_cameras(n_per_side: int = 3, seed: int = 0) -> list[CameraModel]:
    """Six cameras on two walls at x = +-14.5 m, 5.5 m high, facing the court."""
    rng = np.random.default_rng(seed)
    cams = []
    cid = 0
    for side in (-1.0, 1.0):
        ys = np.linspace(-7.0, 7.0, n_per_side)
        for y in ys:
            pos = np.array([side * 14.5, y, 5.5])
            target = np.array([-side * 3.0, 0.0, 1.0])
            R = _look_at_rotation(pos, target)
            t = -R @ pos
            f = float(rng.uniform(900.0, 1100.0))
            cams.append(
                CameraModel(
                    camera_id=cid,
                    fx=f,
                    fy=f * float(rng.uniform(0.995, 1.005)),
                    cx=720.0 + float(rng.uniform(-5, 5)),
                    cy=540.0 + float(rng.uniform(-5, 5)),
                    rotation=R,
                    translation=t,
                    image_size=(1440, 1080),
                )
            )
            cid += 1
    return cams


def generate_truth(
    shot: ShotSpec, params: PhysicsParams, horizon: float = 6.0, dt: float = 1e-4
) -> tuple[physics.Trajectory, physics.LandingPrediction]:
    """Dense ground-truth trajectory (fine RK4 steps) and its true landings."""
    traj = physics.integrate(shot.initial_state(), horizon, dt, params)
    b = traj.bounces
    landings = physics.LandingPrediction(
        first=(b[0].position, b[0].time) if len(b) >= 1 else None,
        second=(b[1].position, b[1].time) if len(b) >= 2 else None,
        truncated=len(b) < 2,
    )
    return traj, landings


def second_landing_time(traj: physics.Trajectory) -> float | None:
    if len(traj.bounces) >= 2:
        return float(traj.bounces[1].time)
    return None


def simulate_detections(
    traj: physics.Trajectory,
    cameras: list[CameraModel],
    specs: list[CameraSimSpec] | CameraSimSpec | None = None,
    seed: int = 0,
    t_end: float | None = None,
) -> list[Detection]:
    """Per-camera sampling of the truth; returned in arrival order.

    Detection timestamps are capture times; the transport latency only
    shuffles the order in which they arrive. The stream stops at t_end
    (by default the second ground contact).
    """
    rng = np.random.default_rng(seed)
    if specs is None:
        specs = CameraSimSpec()
    if isinstance(specs, CameraSimSpec):
        specs = [
            CameraSimSpec(
                rate_hz=specs.rate_hz,
                phase=(i / max(len(cameras), 1)) / specs.rate_hz,
                pixel_noise=specs.pixel_noise,
                dropout=specs.dropout,
                latency_mean=specs.latency_mean,
                latency_jitter=specs.latency_jitter,
            )
            for i in range(len(cameras))
        ]
    if t_end is None:
        t_end = second_landing_time(traj)
        if t_end is None:
            t_end = float(traj.t[-1])
    arrivals = []
    for cam, spec in zip(cameras, specs):
        n_frames = int(math.floor((t_end - spec.phase) * spec.rate_hz)) + 1
        if n_frames <= 0:
            continue
        ts = spec.phase + np.arange(n_frames) / spec.rate_hz
        ts = ts[(ts >= traj.t[0]) & (ts <= min(t_end, traj.t[-1]))]
        L, _, _ = traj.sample(ts)
        keep = rng.random(len(ts)) >= spec.dropout
        for t, point, k in zip(ts, L, keep):
            if not k or not cam.in_view(point):
                continue
            pixel, depth = cam.project(point)
            if depth <= 0:
                continue
            pixel = pixel + rng.normal(0.0, spec.pixel_noise, 2)
            latency = max(spec.latency_mean + rng.normal(0.0, spec.latency_jitter), 0.0)
            arrivals.append((t + latency, Detection(camera_id=cam.camera_id, timestamp=float(t), pixel=pixel, pixel_sigma=spec.pixel_noise)))
    arrivals.sort(key=lambda x: x[0])
    return [d for _, d in arrivals]


def heavy_spin_suite(n_shots: int = 50, seed: int = 7, params: PhysicsParams | None = None) -> list[tuple[ShotSpec, physics.Trajectory]]:
    """Seeded shots with 20-50 Hz spin whose second landing stays in court.

    Candidates are resampled until the trajectory bounces twice inside
    the court bounds, so every returned shot has well-defined first and
    second landing targets.
    """
    params = params or PhysicsParams()
    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    while len(out) < n_shots and attempts < 200 * n_shots:
        attempts += 1
        L0 = np.array([rng.uniform(-11.5, -8.0), rng.uniform(-3.0, 3.0), rng.uniform(0.8, 2.2)])
        speed = rng.uniform(15.0, 30.0)
        elev = rng.uniform(0.02, 0.30)
        azim = rng.uniform(-0.18, 0.18)
        V0 = speed * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
        w_mag = 2 * np.pi * rng.uniform(20.0, 50.0)
        axis = rng.normal(size=3)
        axis[1] = abs(axis[1]) * 2.0 + 0.5  # mostly topspin-like, axis near +y
        axis /= np.linalg.norm(axis)
        W0 = w_mag * axis
        shot = ShotSpec(location=L0, velocity=V0, spin=W0, seed=int(rng.integers(0, 2**31 - 1)))
        try:
            traj, _ = generate_truth(shot, params)
        except physics.IntegrationError:
            continue
        if len(traj.bounces) < 2:
            continue
        p1, p2 = traj.bounces[0].position, traj.bounces[1].position
        ok = all(
            abs(p[0]) < COURT_HALF_LENGTH + 2.0 and abs(p[1]) < COURT_HALF_WIDTH + 2.0 for p in (p1, p2)
        )
        if not ok:
            continue
        out.append((shot, traj))
    if len(out) < n_shots:
        raise RuntimeError(f"could not sample {n_shots} in-court shots (got {len(out)})")
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class StageMetrics:
    """Planar landing RMSE binned by progress through the detection stream."""

    stage_rmse_first: list[float]  # 4 quartile stages, m
    stage_rmse_second: list[float]
    n_samples: list[int]
    position_rmse: float
    velocity_rel_rmse: float

    def to_dict(self) -> dict:
        return {
            "stage_rmse_first": [float(x) for x in self.stage_rmse_first],
            "stage_rmse_second": [float(x) for x in self.stage_rmse_second],
            "n_samples": [int(x) for x in self.n_samples],
            "position_rmse": float(self.position_rmse),
            "velocity_rel_rmse": float(self.velocity_rel_rmse),
        }


def planar_error(predicted, truth) -> float:
    p = np.asarray(predicted, float)[:2]
    q = np.asarray(truth, float)[:2]
    return float(np.linalg.norm(p - q))


@dataclass
class ShotResult:
    """Per-ingest predictions and state errors for one shot."""

    n_detections: int
    first_errors: np.ndarray  # (n,) planar error of first-landing prediction; nan if absent
    second_errors: np.ndarray
    position_errors: np.ndarray  # (n,) 3D error of smoothed state at detection time
    velocity_rel_errors: np.ndarray
    spin_estimate: np.ndarray | None = None  # (n_seg, 3) labeled spins
    failure: str | None = None
    ingest_ms: np.ndarray | None = None  # per-detection ingest+solve wall time
    # end-of-trajectory (batch-polished) accuracy, graph methods only
    final_position_rmse: float = float("nan")
    final_velocity_rel_rmse: float = float("nan")
    spin_label_rel_error: float = float("nan")  # |W0_label - W0_true| / |W0_true|
    label_iterations: int | None = None
    label_converged: bool | None = None


def stage_bins(n: int, n_stages: int = 4) -> np.ndarray:
    """Quartile stage index per detection (0..n_stages-1)."""
    idx = np.arange(n)
    return np.minimum((idx * n_stages) // max(n, 1), n_stages - 1)


def aggregate(results: list[ShotResult], n_stages: int = 4) -> StageMetrics:
    firsts = [[] for _ in range(n_stages)]
    seconds = [[] for _ in range(n_stages)]
    counts = [0] * n_stages
    pos_all, vel_all = [], []
    for res in results:
        if res.failure is not None:
            continue
        bins = stage_bins(res.n_detections, n_stages)
        for s in range(n_stages):
            m = bins == s
            fe = res.first_errors[m]
            se = res.second_errors[m]
            firsts[s].extend(fe[np.isfinite(fe)].tolist())
            seconds[s].extend(se[np.isfinite(se)].tolist())
            counts[s] += int(m.sum())
        pos_all.extend(res.position_errors[np.isfinite(res.position_errors)].tolist())
        vel_all.extend(res.velocity_rel_errors[np.isfinite(res.velocity_rel_errors)].tolist())

    def rmse(xs):
        return float(np.sqrt(np.mean(np.square(xs)))) if xs else float("nan")

    return StageMetrics(
        stage_rmse_first=[rmse(x) for x in firsts],
        stage_rmse_second=[rmse(x) for x in seconds],
        n_samples=counts,
        position_rmse=rmse(pos_all),
        velocity_rel_rmse=rmse(vel_all),
    )


# ---------------------------------------------------------------------------
# method drivers

PRIOR_SIGMA = 2 * np.pi * 1.0  # rad/s, sigma used for exact and labeled spin priors

METHODS = ("graph", "graph_exact", "graph_labeled", "ekf", "aekf")


def _graph_first_landing(est, params: PhysicsParams) -> np.ndarray | None:
    """Smoothed first-landing estimate after the bounce was modeled.

    Integrates the last pre-bounce smoothed state to ground contact, so
    the estimate keeps improving as later detections refine the bounce.
    """
    g = est.graph
    if not g.bounce_times:
        return None
    tb = g.bounce_times[0]
    v = est.values
    tid_pre = None
    t_pre = None
    for tid in g.order:
        t = g.time_of(tid)
        if t >= tb:
            break
        tid_pre, t_pre = tid, t
    if tid_pre is None:
        return None
    fs = physics.FlightState(t=t_pre, L=v.loc[tid_pre].copy(), V=v.vel[tid_pre].copy(), W=v.spin[0].copy())
    pl = physics.predict_landings(fs, params, horizon=max(2.0 * (tb - t_pre), 0.05))
    return pl.first[0] if pl.first is not None else None


def run_shot(
    shot: ShotSpec,
    traj: physics.Trajectory,
    cameras: list[CameraModel],
    params: PhysicsParams | None = None,
    method: str = "graph",
    spin_prior=None,
    detections: list[Detection] | None = None,
    collect_times: bool = False,
    label: bool = False,
    estimator_config=None,
) -> ShotResult:
    """Stream one shot through a method and record per-ingest errors.

    Landing predictions map onto the shot's two true bounces: before the
    first modeled bounce the next two predicted contacts are the first
    and second landings; afterwards the predicted next contact is the
    second landing, and the first-landing estimate comes from the
    smoothed pre-bounce state (graph) or stays frozen at its last
    pre-bounce value (filters).
    """
    import time

    from .baselines import BaselineTracker
    from .estimator import Estimator, label_spin

    params = params or PhysicsParams()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    dets = detections if detections is not None else simulate_detections(traj, cameras, seed=shot.seed)
    n = len(dets)
    res = ShotResult(
        n_detections=n,
        first_errors=np.full(n, np.nan),
        second_errors=np.full(n, np.nan),
        position_errors=np.full(n, np.nan),
        velocity_rel_errors=np.full(n, np.nan),
        ingest_ms=np.full(n, np.nan) if collect_times else None,
    )
    if len(traj.bounces) < 2:
        res.failure = "truth trajectory has fewer than two bounces"
        return res
    p1 = traj.bounces[0].position
    p2 = traj.bounces[1].position
    is_graph = method.startswith("graph")
    try:
        if is_graph:
            tracker = Estimator(cameras, params, config=estimator_config, spin_prior=spin_prior)
        else:
            tracker = BaselineTracker(cameras, params, method=method)
        frozen_first: np.ndarray | None = None
        for i, d in enumerate(dets):
            t0 = time.perf_counter()
            s = tracker.ingest(d)
            if res.ingest_ms is not None:
                res.ingest_ms[i] = 1e3 * (time.perf_counter() - t0)
            if s is None:
                continue
            st = traj.state_at(s.t)
            res.position_errors[i] = float(np.linalg.norm(s.location - st.L))
            res.velocity_rel_errors[i] = float(
                np.linalg.norm(s.velocity - st.V) / max(np.linalg.norm(st.V), 1e-9)
            )
            landing = s.landing
            if s.n_bounces == 0:
                if landing is not None and landing.first is not None:
                    res.first_errors[i] = planar_error(landing.first[0], p1)
                    frozen_first = np.asarray(landing.first[0])
                if landing is not None and landing.second is not None:
                    res.second_errors[i] = planar_error(landing.second[0], p2)
            else:
                first_est = _graph_first_landing(tracker, params) if is_graph else frozen_first
                if first_est is not None:
                    res.first_errors[i] = planar_error(first_est, p1)
                if landing is not None and landing.first is not None:
                    res.second_errors[i] = planar_error(landing.first[0], p2)
        if is_graph:
            tracker.solve_full()
            g, v = tracker.graph, tracker.values
            el, ev = [], []
            for tid in g.order:
                st = traj.state_at(g.time_of(tid))
                el.append(np.linalg.norm(v.loc[tid] - st.L))
                ev.append(np.linalg.norm(v.vel[tid] - st.V) / max(np.linalg.norm(st.V), 1e-9))
            res.final_position_rmse = float(np.sqrt(np.mean(np.square(el))))
            res.final_velocity_rel_rmse = float(np.sqrt(np.mean(np.square(ev))))
            if label:
                lab = label_spin(dets, cameras, params, estimator=tracker)
                res.spin_estimate = lab.spins
                res.label_iterations = lab.iterations
                res.label_converged = lab.converged
                w_true = np.asarray(shot.spin, float)
                res.spin_label_rel_error = float(
                    np.linalg.norm(lab.spins[0] - w_true) / max(np.linalg.norm(w_true), 1e-9)
                )
    except Exception as e:  # noqa: BLE001 - failures are recorded, not raised
        res.failure = f"{type(e).__name__}: {e}"
    return res


def evaluate(
    suite: list[tuple[ShotSpec, physics.Trajectory]],
    cameras: list[CameraModel],
    params: PhysicsParams | None = None,
    methods=("graph_labeled", "graph", "aekf", "ekf"),
    n_stages: int = 4,
    collect_times: bool = False,
    return_results: bool = False,
):
    """Run every method over the suite and aggregate stage-binned metrics.

    graph variants share one detection stream per shot; graph_labeled
    reuses the zero-prior run's spin labels as priors for its own pass.
    Failures are excluded from RMSE and reported per method with counts.
    """
    from .core import SpinPrior

    params = params or PhysicsParams()
    need_labels = "graph_labeled" in methods
    per_method: dict[str, list[ShotResult]] = {m: [] for m in methods}
    if need_labels and "graph" not in per_method:
        per_method["graph"] = []

    for idx, (shot, traj) in enumerate(suite):
        dets = simulate_detections(traj, cameras, seed=shot.seed)
        labels = None
        if "graph" in per_method:
            r = run_shot(
                shot, traj, cameras, params, "graph",
                detections=dets, collect_times=collect_times, label=need_labels,
            )
            per_method["graph"].append(r)
            labels = r.spin_estimate
        for m in methods:
            if m == "graph":
                continue
            prior = None
            if m == "graph_exact":
                prior = SpinPrior(spin=np.asarray(shot.spin, float), sigma=np.full(3, PRIOR_SIGMA))
            elif m == "graph_labeled":
                if labels is None:
                    per_method[m].append(
                        ShotResult(
                            n_detections=len(dets),
                            first_errors=np.full(len(dets), np.nan),
                            second_errors=np.full(len(dets), np.nan),
                            position_errors=np.full(len(dets), np.nan),
                            velocity_rel_errors=np.full(len(dets), np.nan),
                            failure="spin labeling unavailable for this shot",
                        )
                    )
                    continue
                prior = SpinPrior(spin=np.asarray(labels[0], float), sigma=np.full(3, PRIOR_SIGMA))
            per_method[m].append(
                run_shot(
                    shot, traj, cameras, params, m,
                    spin_prior=prior, detections=dets, collect_times=collect_times,
                )
            )

    out = {"n_shots": len(suite), "n_stages": n_stages, "methods": {}}
    for m, results in per_method.items():
        agg = aggregate(results, n_stages)
        entry = agg.to_dict()
        entry["failures"] = [
            {"shot": i, "error": r.failure} for i, r in enumerate(results) if r.failure is not None
        ]
        entry["n_failures"] = len(entry["failures"])
        fp = [r.final_position_rmse for r in results if np.isfinite(r.final_position_rmse)]
        fv = [r.final_velocity_rel_rmse for r in results if np.isfinite(r.final_velocity_rel_rmse)]
        if fp:
            entry["final_position_rmse"] = float(np.sqrt(np.mean(np.square(fp))))
            entry["final_velocity_rel_rmse"] = float(np.sqrt(np.mean(np.square(fv))))
        lab = [r.spin_label_rel_error for r in results if np.isfinite(r.spin_label_rel_error)]
        if lab:
            entry["spin_label_rel_error_mean"] = float(np.mean(lab))
            entry["label_converged_frac"] = float(
                np.mean([bool(r.label_converged) for r in results if r.label_converged is not None])
            )
            entry["label_iterations"] = [
                int(r.label_iterations) for r in results if r.label_iterations is not None
            ]
        if collect_times:
            ts = np.concatenate([r.ingest_ms[np.isfinite(r.ingest_ms)] for r in results if r.ingest_ms is not None])
            if ts.size:
                entry["ingest_ms_mean"] = float(ts.mean())
                entry["ingest_ms_p99"] = float(np.percentile(ts, 99))
        out["methods"][m] = entry
    if return_results:
        return out, per_method
    return out
