"""Experiment orchestration: one config file in, one output directory out.

A run is fully determined by (config, seed): ground truth, detections,
every method's estimate stream, and the stage-binned metrics. Output
files are written with sorted keys and no timestamps so a repeated run
is byte-identical. Errors in any stage are captured in a failure
manifest next to whatever partial outputs exist.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import simharness as sim
from .core import FormatError, PhysicsParams, load_calibration

CONFIG_FORMAT = 1

DEFAULT_CONFIG = {
    "format": CONFIG_FORMAT,
    "seed": 7,
    "physics": {},  # overrides of PhysicsParams fields
    "cameras": {"kind": "court", "n_per_side": 3, "seed": 0},
    "suite": {"kind": "heavy_spin", "n_shots": 8},
    "methods": ["graph_labeled", "graph_exact", "graph", "aekf", "ekf"],
    "n_stages": 4,
    "save_traces": True,
}


def load_config(path: str | Path) -> dict:
    with open(path) as f:
        cfg = json.load(f)
    return normalize_config(cfg)


def normalize_config(cfg: dict) -> dict:
    if cfg.get("format") != CONFIG_FORMAT:
        raise FormatError(f"config format must be {CONFIG_FORMAT}, got {cfg.get('format')!r}")
    out = {**DEFAULT_CONFIG, **cfg}
    unknown = set(out) - set(DEFAULT_CONFIG)
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    for m in out["methods"]:
        if m not in sim.METHODS:
            raise FormatError(f"unknown method {m!r}; expected one of {sim.METHODS}")
    return out


def _build_cameras(spec: dict):
    kind = spec.get("kind", "court")
    if kind == "court":
        return sim.make_court_cameras(spec.get("n_per_side", 3), seed=spec.get("seed", 0))
    if kind == "calibration":
        return load_calibration(spec["path"])
    raise FormatError(f"unknown camera spec kind {kind!r}")


def _build_suite(spec: dict, seed: int, params: PhysicsParams):
    kind = spec.get("kind", "heavy_spin")
    if kind == "heavy_spin":
        return sim.heavy_spin_suite(spec.get("n_shots", 8), seed=seed, params=params)
    if kind == "shots":
        out = []
        for i, s in enumerate(spec["shots"]):
            shot = sim.ShotSpec(
                location=np.asarray(s["location"], float),
                velocity=np.asarray(s["velocity"], float),
                spin=np.asarray(s["spin"], float),
                seed=int(s.get("seed", seed + i)),
            )
            traj, _ = sim.generate_truth(shot, params)
            out.append((shot, traj))
        return out
    raise FormatError(f"unknown suite kind {kind!r}")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _trace_records(results) -> list[dict]:
    recs = []
    for i, r in enumerate(results):
        recs.append(
            {
                "shot": i,
                "n_detections": r.n_detections,
                "first_errors": [None if not np.isfinite(x) else round(float(x), 6) for x in r.first_errors],
                "second_errors": [None if not np.isfinite(x) else round(float(x), 6) for x in r.second_errors],
                "failure": r.failure,
            }
        )
    return recs


def run_experiment(config: dict | str | Path, output_dir: str | Path) -> Path:
    """Run generate -> simulate -> estimate -> evaluate; write metrics.

    Returns the output directory. On error, writes failures.json naming
    the failing stage (and any missing path) alongside partial outputs.
    """
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures: list[dict] = []

    try:
        cfg = load_config(config) if isinstance(config, (str, Path)) else normalize_config(config)
    except (OSError, json.JSONDecodeError, FormatError) as e:
        failures.append({"stage": "config", "error": f"{type(e).__name__}: {e}"})
        _dump_json({"failures": failures}, out_dir / "failures.json")
        return out_dir
    _dump_json(cfg, out_dir / "config.json")

    try:
        params = PhysicsParams(**cfg["physics"]) if cfg["physics"] else PhysicsParams()
        cameras = _build_cameras(cfg["cameras"])
    except (OSError, KeyError, FormatError, TypeError, ValueError) as e:
        detail = f"{type(e).__name__}: {e}"
        if cfg["cameras"].get("kind") == "calibration":
            detail += f" (calibration path: {cfg['cameras'].get('path')!r})"
        failures.append({"stage": "setup", "error": detail})
        _dump_json({"failures": failures}, out_dir / "failures.json")
        return out_dir

    try:
        suite = _build_suite(cfg["suite"], cfg["seed"], params)
    except Exception as e:  # noqa: BLE001
        failures.append({"stage": "generate", "error": f"{type(e).__name__}: {e}"})
        _dump_json({"failures": failures}, out_dir / "failures.json")
        return out_dir

    metrics, per_method = sim.evaluate(
        suite, cameras, params, methods=tuple(cfg["methods"]), n_stages=cfg["n_stages"],
        return_results=True,
    )
    if cfg["save_traces"]:
        _dump_json(
            {m: _trace_records(rs) for m, rs in sorted(per_method.items())},
            out_dir / "traces.json",
        )
    metrics["config"] = cfg
    metrics["shots"] = [
        {
            "location": [float(x) for x in s.location],
            "velocity": [float(x) for x in s.velocity],
            "spin": [float(x) for x in s.spin],
            "seed": s.seed,
            "first_landing": [float(x) for x in t.bounces[0].position],
            "second_landing": [float(x) for x in t.bounces[1].position],
        }
        for s, t in suite
    ]
    _dump_json(metrics, out_dir / "metrics.json")

    # plot-ready series: one row per (method, stage, landing_index)
    series = []
    for m, e in sorted(metrics["methods"].items()):
        for li, key in ((1, "stage_rmse_first"), (2, "stage_rmse_second")):
            for s, v in enumerate(e[key]):
                series.append(
                    {"method": m, "stage": s + 1, "landing_index": li,
                     "rmse": None if not np.isfinite(v) else round(float(v), 6),
                     "n": e["n_samples"][s]}
                )
    _dump_json(series, out_dir / "stage_series.json")

    lines = [f"shots: {metrics['n_shots']}  stages: {metrics['n_stages']}"]
    for m, e in sorted(metrics["methods"].items()):
        lines.append(
            f"{m}: first {['%.3f' % x for x in e['stage_rmse_first']]} "
            f"second {['%.3f' % x for x in e['stage_rmse_second']]} failures {e['n_failures']}"
        )
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")

    method_failures = [
        {"stage": "estimate", "method": m, **f}
        for m, e in sorted(metrics["methods"].items())
        for f in e["failures"]
    ]
    if failures or method_failures:
        _dump_json({"failures": failures + method_failures}, out_dir / "failures.json")
    return out_dir
