"""Shared domain types, units, and the calibration/detection/prior file formats.

Units are SI throughout: meters, seconds, rad/s. Spin is handled in rad/s
internally; Hz appears only in the spin-prior file format and is converted
on load/save (w_rad = 2*pi*w_hz).

All types here are immutable after construction and safe to share between
threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import so3

TWO_PI = 2.0 * math.pi

CALIBRATION_FORMAT_VERSION = 1


class FormatError(ValueError):
    """A structured file failed to parse; message names the record/field."""


class ValidationError(ValueError):
    """A loaded value violates a domain invariant."""


def hz_to_rad(w_hz: float | np.ndarray) -> float | np.ndarray:
    return TWO_PI * np.asarray(w_hz, dtype=float) if isinstance(w_hz, (list, tuple, np.ndarray)) else TWO_PI * w_hz


def rad_to_hz(w_rad: float | np.ndarray):
    return np.asarray(w_rad, dtype=float) / TWO_PI if isinstance(w_rad, (list, tuple, np.ndarray)) else w_rad / TWO_PI


@dataclass(frozen=True)
class Detection:
    """One timestamped 2D pixel observation from one camera."""

    camera_id: int
    timestamp: float
    pixel: np.ndarray  # (u, v) pixels
    pixel_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float))
        if not np.isfinite(self.timestamp) or self.timestamp < 0.0:
            raise ValidationError(f"detection timestamp must be finite and >= 0, got {self.timestamp}")
        if self.pixel.shape != (2,) or not np.all(np.isfinite(self.pixel)):
            raise ValidationError("detection pixel must be a finite 2-vector")
        if self.pixel_sigma <= 0.0:
            raise ValidationError("pixel_sigma must be positive")


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics and fixed pose of one camera.

    rotation/translation map world coordinates into the camera frame:
    p_cam = R @ p_world + T.
    """

    camera_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3 world->camera
    translation: np.ndarray  # 3-vector, meters
    image_size: tuple[int, int]  # (width, height) pixels
    pose_prior_sigma: np.ndarray = field(
        default_factory=lambda: np.array([1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3])
    )  # (rot rad x3, trans m x3)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        object.__setattr__(self, "pose_prior_sigma", np.asarray(self.pose_prior_sigma, dtype=float))
        w, h = self.image_size
        if not so3.is_rotation(self.rotation, tol=1e-9):
            raise ValidationError(f"camera {self.camera_id}: R is not a rotation matrix (orthonormal, det=+1)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.camera_id}: focal lengths must be positive")
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise ValidationError(f"camera {self.camera_id}: principal point outside image")
        if self.pose_prior_sigma.shape != (6,) or np.any(self.pose_prior_sigma <= 0):
            raise ValidationError(f"camera {self.camera_id}: pose_prior_sigma must be 6 positive entries")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, point_world: np.ndarray) -> tuple[np.ndarray, float]:
        """Pinhole projection; returns (pixel, depth). Depth may be <= 0."""
        p = self.rotation @ np.asarray(point_world, dtype=float) + self.translation
        z = p[2]
        if z <= 0.0:
            return np.full(2, np.nan), z
        return np.array([self.fx * p[0] / z + self.cx, self.fy * p[1] / z + self.cy]), z

    def in_view(self, point_world: np.ndarray, margin: float = 0.0) -> bool:
        px, z = self.project(point_world)
        if z <= 0.0:
            return False
        w, h = self.image_size
        return bool(margin <= px[0] < w - margin and margin <= px[1] < h - margin)

    def back_project(self, pixel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-frame ray (origin, unit direction) through a pixel."""
        d_cam = np.array([(pixel[0] - self.cx) / self.fx, (pixel[1] - self.cy) / self.fy, 1.0])
        origin = -self.rotation.T @ self.translation
        direction = self.rotation.T @ d_cam
        return origin, direction / np.linalg.norm(direction)


@dataclass(frozen=True)
class PhysicsParams:
    """Aerodynamic, bounce and ball constants.

    Defaults are standard tennis-ball values and are config-overridable;
    they are not measured ground truth.

    lift_form selects how the Magnus term uses the spin-velocity cross
    product: "normalized" (default) uses its unit vector so the force
    magnitude is (1/2) rho A C_L |V|^2; "paper" multiplies by the raw
    cross product.
    """

    mass: float = 0.057
    ball_radius: float = 0.033
    shell_radius: float = 0.032
    rho_air: float = 1.204
    drag_coeff: float = 0.55
    lift_coeff: float = 0.30
    restitution: float = 0.75
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    ground_z: float = 0.0
    contact_offset: float | None = None  # height of center above ground at contact; None -> ball_radius
    lift_form: str = "normalized"

    def __post_init__(self):
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        if min(self.mass, self.ball_radius, self.shell_radius, self.rho_air) <= 0:
            raise ValidationError("mass, radii and air density must be positive")
        if self.drag_coeff < 0 or self.lift_coeff < 0:
            raise ValidationError("drag/lift coefficients must be non-negative")
        if not (0.0 < self.restitution <= 1.0):
            raise ValidationError("restitution must lie in (0, 1]")
        if self.lift_form not in ("normalized", "paper"):
            raise ValidationError(f"unknown lift_form {self.lift_form!r}")
        if self.contact_offset is None:
            object.__setattr__(self, "contact_offset", self.ball_radius)

    @property
    def area(self) -> float:
        return math.pi * self.ball_radius**2

    @property
    def contact_z(self) -> float:
        """Height of the ball center at ground contact."""
        return self.ground_z + self.contact_offset

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "ball_radius": self.ball_radius,
            "shell_radius": self.shell_radius,
            "rho_air": self.rho_air,
            "drag_coeff": self.drag_coeff,
            "lift_coeff": self.lift_coeff,
            "restitution": self.restitution,
            "gravity": list(self.gravity),
            "ground_z": self.ground_z,
            "contact_offset": self.contact_offset,
            "lift_form": self.lift_form,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicsParams":
        d = dict(d)
        if "gravity" in d:
            d["gravity"] = np.asarray(d["gravity"], dtype=float)
        return cls(**d)


@dataclass(frozen=True)
class SpinPrior:
    """Gaussian prior on the initial spin variable, rad/s."""

    spin: np.ndarray
    sigma: np.ndarray
    source: str = "zero_default"  # external_file | zero_default | labeled

    def __post_init__(self):
        object.__setattr__(self, "spin", np.asarray(self.spin, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.sigma.shape != (3,) or np.any(self.sigma <= 0):
            raise ValidationError("spin prior sigma must be 3 positive entries")

    @classmethod
    def zero_default(cls) -> "SpinPrior":
        # large-noise fallback when no external spin information exists
        return cls(np.zeros(3), np.full(3, TWO_PI * 50.0), source="zero_default")


@dataclass(frozen=True)
class NoiseSpec:
    """Per-factor diagonal noise (std-devs, not variances).

    The dynamics sigmas are harness-tuned; no measured values exist for
    them. Projection noise is taken per-detection from the detection
    record, with projection_sigma as the default.
    """

    projection_sigma: float = 1.0  # px
    location_sigma: float = 1.5e-3  # m
    aero_sigma: float = 1.5e-2  # m/s
    bounce_sigma: np.ndarray = field(
        default_factory=lambda: np.array([0.08, 0.08, 0.08, 3.0, 3.0, 3.0])
    )  # (m/s x3, rad/s x3)
    bounce_location_inflation: float = 20.0  # scale on location sigma across a bounce interval
    spin_prior_sigma: np.ndarray = field(default_factory=lambda: np.full(3, TWO_PI * 50.0))  # rad/s

    def __post_init__(self):
        object.__setattr__(self, "bounce_sigma", np.asarray(self.bounce_sigma, dtype=float))
        object.__setattr__(self, "spin_prior_sigma", np.asarray(self.spin_prior_sigma, dtype=float))
        if (
            min(self.projection_sigma, self.location_sigma, self.aero_sigma) <= 0
            or np.any(self.bounce_sigma <= 0)
            or np.any(self.spin_prior_sigma <= 0)
            or self.bounce_location_inflation <= 0
        ):
            raise ValidationError("all noise entries must be strictly positive")

    def to_dict(self) -> dict:
        return {
            "projection_sigma": self.projection_sigma,
            "location_sigma": self.location_sigma,
            "aero_sigma": self.aero_sigma,
            "bounce_sigma": list(self.bounce_sigma),
            "bounce_location_inflation": self.bounce_location_inflation,
            "spin_prior_sigma": list(self.spin_prior_sigma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        d = dict(d)
        for k in ("bounce_sigma", "spin_prior_sigma"):
            if k in d:
                d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)


@dataclass
class BallNodes:
    """The estimator's variable set: per-timestamp location/velocity and
    per-bounce-segment spin."""

    timestamps: list[float] = field(default_factory=list)
    locations: list[np.ndarray] = field(default_factory=list)
    velocities: list[np.ndarray] = field(default_factory=list)
    spins: list[np.ndarray] = field(default_factory=list)
    bounce_times: list[float] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.locations) != len(self.timestamps) or len(self.velocities) != len(self.timestamps):
            raise ValidationError("locations and velocities must share the timestamp key set")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValidationError("timestamps must be strictly increasing")
        if len(self.spins) != len(self.bounce_times) + 1:
            raise ValidationError("need exactly one spin per bounce segment (bounces + 1)")


# ---------------------------------------------------------------------------
# file formats


def load_calibration(path: str | Path) -> list[CameraModel]:
    """Read a camera calibration file (JSON, format 1)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != CALIBRATION_FORMAT_VERSION:
        raise FormatError(f"{path}: missing or unsupported 'format' field (expected {CALIBRATION_FORMAT_VERSION})")
    cams = []
    for i, rec in enumerate(doc.get("cameras", [])):
        required = ("camera_id", "fx", "fy", "cx", "cy", "R", "T", "width", "height")
        for k in required:
            if k not in rec:
                raise FormatError(f"{path}: camera record {i}: missing field {k!r}")
        R = np.asarray(rec["R"], dtype=float)
        if R.size != 9:
            raise FormatError(f"{path}: camera record {i}: R must have 9 entries (row-major)")
        cams.append(
            CameraModel(
                camera_id=int(rec["camera_id"]),
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                rotation=R.reshape(3, 3),
                translation=np.asarray(rec["T"], dtype=float),
                image_size=(int(rec["width"]), int(rec["height"])),
                pose_prior_sigma=np.asarray(
                    rec.get("pose_sigma", [1e-3] * 6), dtype=float
                ),
            )
        )
    return cams


def save_calibration(cameras: Sequence[CameraModel], path: str | Path) -> None:
    doc = {
        "format": CALIBRATION_FORMAT_VERSION,
        "cameras": [
            {
                "camera_id": c.camera_id,
                "fx": c.fx,
                "fy": c.fy,
                "cx": c.cx,
                "cy": c.cy,
                "R": [float(x) for x in c.rotation.ravel()],
                "T": [float(x) for x in c.translation],
                "width": c.image_size[0],
                "height": c.image_size[1],
                "pose_sigma": [float(x) for x in c.pose_prior_sigma],
            }
            for c in cameras
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_detections(
    path: str | Path, cameras: Sequence[CameraModel] | None = None
) -> Iterator[Detection]:
    """Yield detections in file order (arrival order, not timestamp order).

    If cameras is given, unknown camera ids and out-of-bounds pixels are
    errors.
    """
    path = Path(path)
    by_id = {c.camera_id: c for c in cameras} if cameras is not None else None
    with path.open() as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection(
                    camera_id=int(rec["camera_id"]),
                    timestamp=float(rec["t"]),
                    pixel=np.array([float(rec["u"]), float(rec["v"])]),
                    pixel_sigma=float(rec.get("sigma_px", 1.0)),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: record {i}: {e}") from e
            if by_id is not None:
                cam = by_id.get(det.camera_id)
                if cam is None:
                    raise FormatError(f"{path}: record {i}: unknown camera_id {det.camera_id}")
                w, h = cam.image_size
                if not (0 <= det.pixel[0] < w and 0 <= det.pixel[1] < h):
                    raise FormatError(f"{path}: record {i}: pixel outside image bounds")
            yield det


def save_detections(detections: Sequence[Detection], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for d in detections:
            f.write(
                json.dumps(
                    {
                        "camera_id": d.camera_id,
                        "t": d.timestamp,
                        "u": float(d.pixel[0]),
                        "v": float(d.pixel[1]),
                        "sigma_px": d.pixel_sigma,
                    }
                )
                + "\n"
            )


def load_spin_prior(path: str | Path) -> SpinPrior:
    """Read a spin-prior file (newline-delimited records, spin in Hz).

    Uses the first record; the file interface allows several so that an
    upstream producer can append refined estimates.
    """
    path = Path(path)
    with path.open() as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                spin_hz = np.array([float(rec["wx_hz"]), float(rec["wy_hz"]), float(rec["wz_hz"])])
                sigma_hz = float(rec["sigma_hz"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: record {i}: {e}") from e
            return SpinPrior(TWO_PI * spin_hz, np.full(3, TWO_PI * sigma_hz), source="external_file")
    raise FormatError(f"{path}: no spin prior records")


def save_spin_prior(prior: SpinPrior, path: str | Path, t_before: float = 0.0) -> None:
    w_hz = prior.spin / TWO_PI
    rec = {
        "t_before": t_before,
        "wx_hz": float(w_hz[0]),
        "wy_hz": float(w_hz[1]),
        "wz_hz": float(w_hz[2]),
        "sigma_hz": float(np.mean(prior.sigma) / TWO_PI),
    }
    Path(path).write_text(json.dumps(rec) + "\n")


__all__ = [
    "Detection",
    "CameraModel",
    "PhysicsParams",
    "SpinPrior",
    "NoiseSpec",
    "BallNodes",
    "FormatError",
    "ValidationError",
    "load_calibration",
    "save_calibration",
    "load_detections",
    "save_detections",
    "load_spin_prior",
    "save_spin_prior",
    "hz_to_rad",
    "rad_to_hz",
    "TWO_PI",
]
