"""Domain types, validation, and file-format round trips."""

import json

import numpy as np
import pytest

from spintrack.core import (
    TWO_PI,
    CameraModel,
    Detection,
    FormatError,
    NoiseSpec,
    PhysicsParams,
    SpinPrior,
    ValidationError,
    hz_to_rad,
    load_calibration,
    load_detections,
    load_spin_prior,
    rad_to_hz,
    save_calibration,
    save_detections,
    save_spin_prior,
)


def test_hz_rad_roundtrip():
    assert hz_to_rad(1.0) == pytest.approx(TWO_PI)
    assert rad_to_hz(hz_to_rad(12.5)) == pytest.approx(12.5)
    np.testing.assert_allclose(rad_to_hz(hz_to_rad([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])


def test_detection_validation():
    with pytest.raises(ValidationError):
        Detection(camera_id=0, timestamp=-1.0, pixel=(0.0, 0.0))
    with pytest.raises(ValidationError):
        Detection(camera_id=0, timestamp=0.0, pixel=(np.nan, 0.0))
    with pytest.raises(ValidationError):
        Detection(camera_id=0, timestamp=0.0, pixel=(0.0, 0.0), pixel_sigma=0.0)


def test_physics_params_validation():
    with pytest.raises(ValidationError):
        PhysicsParams(mass=0.0)
    with pytest.raises(ValidationError):
        PhysicsParams(restitution=1.5)
    with pytest.raises(ValidationError):
        PhysicsParams(lift_form="bogus")
    p = PhysicsParams()
    assert p.contact_offset == p.ball_radius
    assert p.contact_z == pytest.approx(p.ball_radius)
    assert p.area == pytest.approx(np.pi * p.ball_radius**2)


def test_physics_params_dict_roundtrip():
    p = PhysicsParams(drag_coeff=0.6, ground_z=0.1)
    q = PhysicsParams.from_dict(p.to_dict())
    assert q.drag_coeff == p.drag_coeff
    np.testing.assert_allclose(q.gravity, p.gravity)
    assert q.contact_z == p.contact_z


def test_noise_spec_validation_and_roundtrip():
    with pytest.raises(ValidationError):
        NoiseSpec(projection_sigma=0.0)
    n = NoiseSpec(aero_sigma=0.02)
    m = NoiseSpec.from_dict(n.to_dict())
    assert m.aero_sigma == n.aero_sigma
    np.testing.assert_allclose(m.bounce_sigma, n.bounce_sigma)


def test_spin_prior_validation():
    with pytest.raises(ValidationError):
        SpinPrior(np.zeros(3), np.array([1.0, -1.0, 1.0]))
    p = SpinPrior.zero_default()
    assert p.source == "zero_default"
    np.testing.assert_allclose(p.spin, 0.0)


def test_camera_validation(cameras):
    cam = cameras[0]
    with pytest.raises(ValidationError):
        CameraModel(
            camera_id=0, fx=-1.0, fy=1000.0, cx=720, cy=540,
            rotation=cam.rotation, translation=cam.translation, image_size=(1440, 1080),
        )
    with pytest.raises(ValidationError):
        CameraModel(
            camera_id=0, fx=1000.0, fy=1000.0, cx=720, cy=540,
            rotation=np.eye(3) * 2.0, translation=cam.translation, image_size=(1440, 1080),
        )


def test_camera_project_backproject_consistency(cameras):
    cam = cameras[0]
    point = np.array([1.0, 0.5, 1.2])
    pixel, depth = cam.project(point)
    assert depth > 0
    origin, direction = cam.back_project(pixel)
    # the point lies on the back-projected ray
    d = point - origin
    d /= np.linalg.norm(d)
    np.testing.assert_allclose(d, direction, atol=1e-12)
    assert cam.in_view(point)


def test_camera_project_behind(cameras):
    cam = cameras[0]
    behind = -cam.rotation.T @ cam.translation + cam.rotation.T @ np.array([0.0, 0.0, -5.0])
    pixel, depth = cam.project(behind)
    assert depth < 0
    assert np.all(np.isnan(pixel))
    assert not cam.in_view(behind)


def test_calibration_roundtrip(tmp_path, cameras):
    path = tmp_path / "calib.json"
    save_calibration(cameras, path)
    loaded = load_calibration(path)
    assert len(loaded) == len(cameras)
    for a, b in zip(cameras, loaded):
        assert a.camera_id == b.camera_id
        assert a.fx == pytest.approx(b.fx)
        np.testing.assert_allclose(a.rotation, b.rotation)
        np.testing.assert_allclose(a.translation, b.translation)
        assert a.image_size == b.image_size


def test_calibration_format_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("not json")
    with pytest.raises(FormatError):
        load_calibration(p)
    p.write_text(json.dumps({"format": 99, "cameras": []}))
    with pytest.raises(FormatError):
        load_calibration(p)
    p.write_text(json.dumps({"format": 1, "cameras": [{"camera_id": 0}]}))
    with pytest.raises(FormatError, match="missing field"):
        load_calibration(p)


def test_detections_roundtrip(tmp_path):
    dets = [
        Detection(camera_id=1, timestamp=0.01, pixel=(100.0, 200.0), pixel_sigma=1.5),
        Detection(camera_id=0, timestamp=0.005, pixel=(5.0, 7.0)),
    ]
    path = tmp_path / "dets.jsonl"
    save_detections(dets, path)
    loaded = list(load_detections(path))
    assert len(loaded) == 2  # file order preserved (arrival order)
    assert loaded[0].camera_id == 1
    assert loaded[0].timestamp == pytest.approx(0.01)
    np.testing.assert_allclose(loaded[1].pixel, [5.0, 7.0])


def test_detections_validated_against_cameras(tmp_path, cameras):
    path = tmp_path / "dets.jsonl"
    path.write_text('{"camera_id": 99, "t": 0.0, "u": 1.0, "v": 1.0}\n')
    with pytest.raises(FormatError, match="unknown camera_id"):
        list(load_detections(path, cameras))
    path.write_text('{"camera_id": 0, "t": 0.0, "u": 1e6, "v": 1.0}\n')
    with pytest.raises(FormatError, match="outside image bounds"):
        list(load_detections(path, cameras))
    path.write_text('{"camera_id": 0, "t": 0.0}\n')
    with pytest.raises(FormatError):
        list(load_detections(path))


def test_spin_prior_roundtrip(tmp_path):
    prior = SpinPrior(spin=TWO_PI * np.array([10.0, -5.0, 2.0]), sigma=np.full(3, TWO_PI * 3.0))
    path = tmp_path / "spin.jsonl"
    save_spin_prior(prior, path)
    loaded = load_spin_prior(path)
    np.testing.assert_allclose(loaded.spin, prior.spin, rtol=1e-12)
    np.testing.assert_allclose(loaded.sigma, prior.sigma, rtol=1e-12)
    assert loaded.source == "external_file"
    (tmp_path / "empty.jsonl").write_text("\n")
    with pytest.raises(FormatError, match="no spin prior"):
        load_spin_prior(tmp_path / "empty.jsonl")
