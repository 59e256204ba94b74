"""Rotation helpers: exp/log inverses, Jacobian, and edge cases."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from spintrack import so3

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_hat_is_cross_product(rng):
    for _ in range(20):
        w = rng.normal(size=3)
        v = rng.normal(size=3)
        np.testing.assert_allclose(so3.hat(w) @ v, np.cross(w, v), atol=1e-12)


@given(vec3)
@settings(max_examples=100, deadline=None)
def test_exp_produces_rotation(w):
    assert so3.is_rotation(so3.exp(w), tol=1e-9)


@given(vec3)
@settings(max_examples=100, deadline=None)
def test_log_inverts_exp(w):
    theta = np.linalg.norm(w)
    if theta > np.pi - 1e-3:  # log returns the wrapped representative there
        w = w * ((np.pi - 1e-3) / theta)
    np.testing.assert_allclose(so3.log(so3.exp(w)), w, atol=1e-7)


def test_log_near_pi(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        w = (np.pi - 1e-8) * axis
        R = so3.exp(w)
        w_back = so3.log(R)
        # axis sign is ambiguous exactly at pi; compare rotations instead
        np.testing.assert_allclose(so3.exp(w_back), R, atol=1e-6)


def test_exp_of_zero_is_identity():
    np.testing.assert_allclose(so3.exp(np.zeros(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(so3.log(np.eye(3)), np.zeros(3), atol=1e-15)


def test_right_jacobian_inv_matches_fd(rng):
    eps = 1e-7
    for _ in range(20):
        w = rng.normal(size=3)
        Jinv = so3.right_jacobian_inv(w)
        J_fd = np.zeros((3, 3))
        for k in range(3):
            dw = np.zeros(3)
            dw[k] = eps
            # d log(exp(w) exp(dw)) / d dw
            J_fd[:, k] = (so3.log(so3.exp(w) @ so3.exp(dw)) - so3.log(so3.exp(w) @ so3.exp(-dw))) / (2 * eps)
        np.testing.assert_allclose(Jinv, J_fd, rtol=1e-4, atol=1e-6)


def test_is_rotation_rejects_non_rotations():
    assert not so3.is_rotation(np.eye(3) * 1.001)
    assert not so3.is_rotation(-np.eye(3))  # det = -1
    assert not so3.is_rotation(np.eye(4))
    assert so3.is_rotation(np.eye(3))
