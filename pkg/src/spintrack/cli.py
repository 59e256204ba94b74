"""Command-line interface.

Subcommands: simulate (shot -> detections/truth files), estimate
(detections -> estimate stream), label-spin (detections -> spin label
record), evaluate (config -> stage metrics), run (full experiment).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import physics, simharness as sim
from .baselines import BaselineTracker
from .core import (
    PhysicsParams,
    load_calibration,
    load_detections,
    load_spin_prior,
    save_detections,
    save_spin_prior,
)
from .estimator import Estimator, label_spin
from .experiment import load_config, run_experiment


def _vec3(text: str) -> np.ndarray:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated numbers, got {text!r}")
    return np.array(parts)


def _load_setup(args) -> tuple[list, PhysicsParams]:
    cameras = load_calibration(args.calibration) if args.calibration else sim.make_court_cameras()
    params = PhysicsParams()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if cfg["physics"]:
            params = PhysicsParams(**cfg["physics"])
        if not args.calibration:
            from .experiment import _build_cameras

            cameras = _build_cameras(cfg["cameras"])
    return cameras, params


def cmd_simulate(args) -> int:
    cameras, params = _load_setup(args)
    shot = sim.ShotSpec(location=args.location, velocity=args.velocity, spin=args.spin, seed=args.seed)
    traj, landings = sim.generate_truth(shot, params)
    dets = sim.simulate_detections(traj, cameras, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_detections(dets, out / "detections.jsonl")
    physics.save_trajectory(traj, out / "truth.jsonl")
    rec = {
        "first": None if landings.first is None else [float(x) for x in landings.first[0]],
        "second": None if landings.second is None else [float(x) for x in landings.second[0]],
        "n_detections": len(dets),
    }
    (out / "landings.json").write_text(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(dets)} detections to {out}")
    return 0


def cmd_estimate(args) -> int:
    cameras, params = _load_setup(args)
    dets = list(load_detections(args.detections, cameras))
    prior = load_spin_prior(args.spin_prior) if args.spin_prior else None
    if args.method == "graph":
        tracker = Estimator(cameras, params, spin_prior=prior)
    else:
        tracker = BaselineTracker(cameras, params, method=args.method)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for d in dets:
            s = tracker.ingest(d)
            if s is None:
                continue
            rec = s.to_dict()
            rec["method"] = args.method
            sink.write(json.dumps(rec) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_label_spin(args) -> int:
    cameras, params = _load_setup(args)
    dets = list(load_detections(args.detections, cameras))
    res = label_spin(dets, cameras, params)
    rec = {
        "spins_hz": [[float(x) for x in w / (2 * np.pi)] for w in res.spins],
        "iterations": res.iterations,
        "converged": res.converged,
    }
    if args.out:
        from .core import SpinPrior

        save_spin_prior(
            SpinPrior(spin=res.spins[0], sigma=np.full(3, sim.PRIOR_SIGMA)), args.out
        )
    print(json.dumps(rec, sort_keys=True))
    return 0 if res.converged else 1


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    cameras, params = _load_setup(args)
    if cfg["physics"]:
        params = PhysicsParams(**cfg["physics"])
    suite = sim.heavy_spin_suite(cfg["suite"].get("n_shots", 8), seed=cfg["seed"], params=params)
    metrics = sim.evaluate(suite, cameras, params, methods=tuple(cfg["methods"]), n_stages=cfg["n_stages"])
    text = json.dumps(metrics, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_run(args) -> int:
    out = run_experiment(args.config, args.out)
    manifest = out / "failures.json"
    if manifest.exists():
        print(f"completed with failures; see {manifest}", file=sys.stderr)
        return 1
    print(f"experiment written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spintrack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a shot's truth and detection files")
    ps.add_argument("--location", type=_vec3, default=np.array([-10.0, 0.0, 1.5]), metavar="X,Y,Z")
    ps.add_argument("--velocity", type=_vec3, default=np.array([22.0, 1.0, 2.0]), metavar="VX,VY,VZ")
    ps.add_argument("--spin", type=_vec3, default=np.array([0.0, 180.0, 0.0]), metavar="WX,WY,WZ (rad/s)")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--calibration", help="camera calibration file (default: synthetic court rig)")
    ps.add_argument("--config", help="experiment config for physics/camera overrides")
    ps.add_argument("--out", required=True, help="output directory")
    ps.set_defaults(fn=cmd_simulate)

    pe = sub.add_parser("estimate", help="stream detections through an estimator")
    pe.add_argument("detections", help="detections file (newline-delimited records)")
    pe.add_argument("--method", choices=("graph", "ekf", "aekf"), default="graph")
    pe.add_argument("--spin-prior", help="spin prior file applied at startup (graph only)")
    pe.add_argument("--config", help="experiment config for physics/camera overrides")
    pe.add_argument("--calibration")
    pe.add_argument("--out", help="estimate stream output path (default stdout)")
    pe.set_defaults(fn=cmd_estimate)

    pl = sub.add_parser("label-spin", help="offline per-segment spin labeling")
    pl.add_argument("detections")
    pl.add_argument("--config")
    pl.add_argument("--calibration")
    pl.add_argument("--out", help="write the label as a spin-prior file")
    pl.set_defaults(fn=cmd_label_spin)

    pv = sub.add_parser("evaluate", help="stage-binned RMSE over a simulated suite")
    pv.add_argument("--config", required=True)
    pv.add_argument("--calibration")
    pv.add_argument("--out", help="metrics output path (default stdout)")
    pv.set_defaults(fn=cmd_evaluate)

    pr = sub.add_parser("run", help="full experiment from one config file")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", required=True, help="output directory")
    pr.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
