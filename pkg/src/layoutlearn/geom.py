"""Quaternions, rays and the per-field rigid+scale transform.

Vectors are plain float64 arrays of shape ``(..., 3)``; quaternions are
``(qx, qy, qz, qw)`` with the scalar part last.  Every function here is written
against :mod:`layoutlearn.diff` primitives, so passing :class:`~layoutlearn.diff.Var`
handles yields a differentiable result and passing arrays yields plain numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff as D

QUAT_EPS = 1e-12


class DegenerateInputError(ValueError):
    pass


IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def quat_to_rotmat(q):
    """Rotation matrix of ``q / |q|``.

    Normalization happens on every call (and is differentiated through), so the
    optimizer may let ``|q|`` drift freely.
    """
    qv = D.value_of(q)
    if not np.all(np.isfinite(qv)) or np.linalg.norm(qv) <= QUAT_EPS:
        raise DegenerateInputError(f"quaternion norm must exceed {QUAT_EPS}, got {qv}")
    n2 = D.sum_(D.mul(q, q))
    x, y, z, w = (D.getitem(q, i) for i in range(4))
    # (2/|q|^2) folds the normalization into the usual unit-quaternion formula
    k = D.div(2.0, n2)
    xx, yy, zz = D.mul(x, x), D.mul(y, y), D.mul(z, z)
    xy, xz, yz = D.mul(x, y), D.mul(x, z), D.mul(y, z)
    wx, wy, wz = D.mul(w, x), D.mul(w, y), D.mul(w, z)
    entries = [
        D.sub(1.0, D.mul(k, D.add(yy, zz))),
        D.mul(k, D.sub(xy, wz)),
        D.mul(k, D.add(xz, wy)),
        D.mul(k, D.add(xy, wz)),
        D.sub(1.0, D.mul(k, D.add(xx, zz))),
        D.mul(k, D.sub(yz, wx)),
        D.mul(k, D.sub(xz, wy)),
        D.mul(k, D.add(yz, wx)),
        D.sub(1.0, D.mul(k, D.add(xx, yy))),
    ]
    return D.reshape(D.concat([D.reshape(e, (1,)) for e in entries]), (3, 3))


def axis_angle_to_rotmat(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula (reference construction, arrays only)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    return np.concatenate([np.sin(angle / 2) * a, [np.cos(angle / 2)]])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        if np.any(np.linalg.norm(np.asarray(self.direction), axis=-1) <= 0):
            raise DegenerateInputError("ray direction must be non-zero")

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


@dataclass(frozen=True)
class RigidScaleTransform:
    """``(q, t, s)``: a field's placement, eight scalars in ``q, t, s`` order."""

    rotation: np.ndarray = IDENTITY_QUAT
    translation: np.ndarray = np.zeros(3)
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "RigidScaleTransform":
        return cls(IDENTITY_QUAT.copy(), np.zeros(3), 1.0)

    @classmethod
    def from_vector(cls, v) -> "RigidScaleTransform":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (8,):
            raise ValueError(f"a transform has exactly 8 parameters, got shape {v.shape}")
        return cls(v[:4].copy(), v[4:7].copy(), float(v[7]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation, [self.scale]]).astype(np.float64)


def split_params(p):
    """``(q, t, s)`` slices of an 8-vector (array or Var)."""
    return D.getitem(p, slice(0, 4)), D.getitem(p, slice(4, 7)), D.getitem(p, slice(7, 8))


def transform_rays(origins, directions, params):
    """Instance-specific rays for a batch of base rays.

    ``o_k = s (R o - t)`` and ``d_k = s R d`` with ``params`` the 8-vector
    ``(q, t, s)``; ``origins``/``directions`` have shape ``(R, 3)``.
    """
    q, t, s = split_params(params)
    rot_t = D.transpose(quat_to_rotmat(q))
    o_k = D.mul(s, D.sub(D.matmul(origins, rot_t), t))
    d_k = D.mul(s, D.matmul(directions, rot_t))
    return o_k, d_k


def transform_ray(ray: Ray, T: RigidScaleTransform) -> Ray:
    o, d = transform_rays(
        np.asarray(ray.origin, dtype=np.float64).reshape(1, 3),
        np.asarray(ray.direction, dtype=np.float64).reshape(1, 3),
        T.to_vector(),
    )
    return Ray(o.reshape(3), d.reshape(3))


def transform_points(points, params):
    """World points into a field's local frame: ``mu -> s (R mu - t)``."""
    q, t, s = split_params(params)
    rot_t = D.transpose(quat_to_rotmat(q))
    return D.mul(s, D.sub(D.matmul(points, rot_t), t))


def world_center(T: RigidScaleTransform) -> np.ndarray:
    """World position of the local origin, i.e. ``R^T t``."""
    return quat_to_rotmat(T.rotation).T @ np.asarray(T.translation, dtype=np.float64)
