import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layoutlearn import diff as D
from layoutlearn.geom import (
    DegenerateInputError,
    Ray,
    RigidScaleTransform,
    quat_from_axis_angle,
    quat_to_rotmat,
    transform_points,
    transform_ray,
    transform_rays,
    world_center,
)

import oracles

finite = st.floats(-3, 3, allow_nan=False)
quats = st.lists(finite, min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)
vec3 = st.lists(finite, min_size=3, max_size=3)


def test_identity_quaternion():
    assert np.array_equal(quat_to_rotmat([0, 0, 0, 1.0]), np.eye(3))


def test_unnormalized_identity():
    assert np.array_equal(quat_to_rotmat([0, 0, 0, 2.0]), np.eye(3))


def test_quarter_turn_about_z():
    h = math.sqrt(2) / 2
    R = quat_to_rotmat([0, 0, h, h])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(R, oracles.rodrigues([0, 0, 1], math.pi / 2), atol=1e-15)


def test_degenerate_quaternion_rejected():
    with pytest.raises(DegenerateInputError):
        quat_to_rotmat([0, 0, 0, 1e-13])


@given(quats)
def test_rotmat_matches_scipy(q):
    np.testing.assert_allclose(quat_to_rotmat(q), oracles.rotmat(q), atol=1e-12)


@given(quats)
def test_rotation_is_proper_orthonormal(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


@given(quats, st.integers(-8, 8))
def test_scale_invariance_powers_of_two(q, e):
    # multiplying by 2^e is exact in binary, so the normalised result is identical
    assert np.array_equal(quat_to_rotmat(q), quat_to_rotmat(np.asarray(q) * 2.0**e))


@given(quats, st.floats(1e-3, 1e3))
def test_scale_invariance_general(q, lam):
    np.testing.assert_allclose(quat_to_rotmat(q), quat_to_rotmat(np.asarray(q) * lam), atol=1e-15, rtol=0)


def test_identity_transform_keeps_ray():
    ray = Ray(np.array([0.3, -1.0, 2.0]), np.array([0.1, 0.2, -0.7]))
    out = transform_ray(ray, RigidScaleTransform.identity())
    assert np.array_equal(out.origin, ray.origin)
    assert np.array_equal(out.direction, ray.direction)


def test_pure_scale():
    T = RigidScaleTransform(np.array([0, 0, 0, 1.0]), np.zeros(3), 2.0)
    out = transform_ray(Ray(np.array([1.0, 0, 0]), np.array([0, 0, 1.0])), T)
    assert np.array_equal(out.origin, [2, 0, 0])
    assert np.array_equal(out.direction, [0, 0, 2])


def test_rotate_then_translate():
    h = math.sqrt(2) / 2
    T = RigidScaleTransform(np.array([0, 0, h, h]), np.array([0, 1.0, 0]), 1.0)
    out = transform_ray(Ray(np.array([1.0, 0, 0]), np.array([1.0, 0, 0])), T)
    expected = oracles.point_to_local([1.0, 0, 0], T.to_vector())[0]
    np.testing.assert_allclose(out.origin, expected, atol=1e-15)
    np.testing.assert_allclose(out.origin, [0, 0, 0], atol=1e-15)


@given(quats, vec3, st.floats(-2, 2), vec3, vec3)
def test_ray_points_follow_point_transform(q, t, s, o, d):
    d = np.asarray(d)
    if np.linalg.norm(d) < 1e-3:
        d = np.array([0, 0, 1.0])
    vec = np.array([*q, *t, s])
    ok, dk = transform_rays(np.reshape(o, (1, 3)), d.reshape(1, 3), vec)
    for tt in np.random.default_rng(0).uniform(-5, 5, 10):
        lhs = ok[0] + tt * dk[0]
        rhs = oracles.point_to_local(np.asarray(o) + tt * d, vec)[0]
        np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_transform_points_matches_oracle(rng):
    vec = np.concatenate([rng.normal(size=4), rng.normal(size=3), [0.7]])
    pts = rng.normal(size=(20, 3))
    np.testing.assert_allclose(transform_points(pts, vec), oracles.point_to_local(pts, vec), atol=1e-13)


def test_world_center_maps_to_local_origin(rng):
    T = RigidScaleTransform.from_vector(np.concatenate([rng.normal(size=4), rng.normal(size=3), [1.3]]))
    c = world_center(T)
    np.testing.assert_allclose(transform_points(c[None], T.to_vector())[0], 0, atol=1e-14)


def test_transform_has_eight_scalars():
    assert RigidScaleTransform.identity().to_vector().shape == (8,)


def test_negative_scale_allowed():
    T = RigidScaleTransform(np.array([0, 0, 0, 1.0]), np.zeros(3), -1.0)
    out = transform_ray(Ray(np.array([1.0, 2, 3]), np.array([0, 0, 1.0])), T)
    assert np.array_equal(out.origin, [-1, -2, -3])


def test_quaternion_gradient_through_normalisation():
    tape = D.Tape()
    q = tape.leaf(np.array([0.1, -0.2, 0.3, 0.9]))
    R = quat_to_rotmat(q)
    loss = D.sum_(D.mul(R, np.arange(9.0).reshape(3, 3)))
    g = D.backward(tape, loss)[q.index]
    # scaling q leaves R fixed, so the gradient is orthogonal to q
    assert abs(g @ q.value) < 1e-12
    h = 1e-6
    fd = []
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        f = lambda v: float(np.sum(quat_to_rotmat(v) * np.arange(9.0).reshape(3, 3)))
        fd.append((f(q.value + e) - f(q.value - e)) / (2 * h))
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_axis_angle_quaternion_agrees_with_rodrigues():
    q = quat_from_axis_angle([1, 2, 3], 0.7)
    np.testing.assert_allclose(quat_to_rotmat(q), oracles.rodrigues([1, 2, 3], 0.7), atol=1e-14)
