"""Rigid transforms, pose distances, pose residuals and dual quaternion blending.

Quaternions are stored (w, x, y, z) and kept in the hemisphere w >= 0.
A ``RigidTransform`` maps points ``p -> R p + t``; ``A @ B`` applies ``B`` first.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

POSE_STRUCT = struct.Struct("<7d")


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the largest diagonal term for stability."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return np.array(q)


def axis_angle_to_quat(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-12:
        # first-order expansion keeps tiny rotations differentiable
        q = np.concatenate([[1.0], 0.5 * rotvec])
        return q / np.linalg.norm(q)
    axis = rotvec / angle
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError(f"invalid quaternion {q!r}")
    # leave already-unit input bit-identical so text round trips are exact
    if abs(n - 1.0) > 1e-12:
        q = q / n
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An SE(3) element: unit quaternion ``q`` (w, x, y, z) and translation ``t`` in meters."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _canonical(self.q))
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t!r}")
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rotation(cls, R, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_axis_angle(cls, rotvec, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(axis_angle_to_quat(rotvec), t)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> RigidTransform:
        v = np.asarray(values, dtype=float)
        return cls(v[:4], v[4:7])

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> RigidTransform:
        return cls.from_array(POSE_STRUCT.unpack_from(data, offset))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.t
        return M

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    def to_bytes(self) -> bytes:
        return POSE_STRUCT.pack(*self.as_array())

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.t

    def inverse(self) -> RigidTransform:
        return invert(self)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"RigidTransform(q=[{q}], t=[{t}])"


def translate(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), (x, y, z))


def _axis_rotation(axis: int, degrees: float) -> RigidTransform:
    v = np.zeros(3)
    v[axis] = math.radians(degrees)
    return RigidTransform.from_axis_angle(v)


def rotate_x(degrees: float) -> RigidTransform:
    return _axis_rotation(0, degrees)


def rotate_y(degrees: float) -> RigidTransform:
    return _axis_rotation(1, degrees)


def rotate_z(degrees: float) -> RigidTransform:
    return _axis_rotation(2, degrees)


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """Transform applying ``B`` then ``A``."""
    return RigidTransform(quat_mul(A.q, B.q), A.rotation @ B.t + A.t)


def invert(T: RigidTransform) -> RigidTransform:
    qi = quat_conj(T.q)
    return RigidTransform(qi, -(quat_to_matrix(qi) @ T.t))


class PoseDistance(NamedTuple):
    translation_m: float
    angle_deg: float

    def within(self, translation_m: float, angle_deg: float, inclusive: bool = False) -> bool:
        if inclusive:
            return self.translation_m <= translation_m and self.angle_deg <= angle_deg
        return self.translation_m < translation_m and self.angle_deg < angle_deg


def rotation_angle(q: np.ndarray) -> float:
    """Rotation angle in radians of a unit quaternion, in [0, pi]."""
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def pose_distance(A: RigidTransform, B: RigidTransform) -> PoseDistance:
    rel = quat_mul(quat_conj(A.q), B.q)
    return PoseDistance(
        float(np.linalg.norm(A.t - B.t)), math.degrees(rotation_angle(rel))
    )


class PoseResidual(NamedTuple):
    qvec: np.ndarray
    tvec: np.ndarray

    def as_vector(self, rotation_weight: float = 1.0) -> np.ndarray:
        return np.concatenate([rotation_weight * self.qvec, self.tvec])


def error_vector(T: RigidTransform) -> PoseResidual:
    # q is already canonical (w >= 0)
    return PoseResidual(T.q[1:].copy(), T.t.copy())


def is_identity(T: RigidTransform, tol: float = 1e-9) -> bool:
    return bool(np.linalg.norm(error_vector(T).as_vector()) <= tol)


@dataclass(frozen=True, eq=False)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    @classmethod
    def from_transform(cls, T: RigidTransform) -> DualQuaternion:
        real = T.q.copy()
        dual = 0.5 * quat_mul(np.concatenate([[0.0], T.t]), real)
        return cls(real, dual)

    def normalized(self) -> DualQuaternion:
        n = float(np.linalg.norm(self.real))
        if n == 0:
            raise ValueError("cannot normalise a dual quaternion with zero real part")
        real = self.real / n
        dual = self.dual / n
        # project out the component that breaks dot(real, dual) = 0
        dual = dual - np.dot(real, dual) * real
        return DualQuaternion(real, dual)

    def to_transform(self) -> RigidTransform:
        dq = self.normalized()
        t = 2.0 * quat_mul(dq.dual, quat_conj(dq.real))[1:]
        return RigidTransform(dq.real, t)


def dqb_blend(samples: Sequence[RigidTransform], weights: Sequence[float] | None = None) -> RigidTransform:
    """Weighted dual quaternion blend of rigid transforms.

    Each sample is flipped into the hemisphere of the first sample's rotation
    before summing, so antipodal quaternions do not cancel.
    """
    if len(samples) == 0:
        raise ValueError("no samples to blend")
    if weights is None:
        w = np.ones(len(samples))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(samples),):
            raise ValueError("weights must match samples")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be non-negative and not all zero")
    w = w / w.sum()
    pivot = samples[0].q
    real = np.zeros(4)
    dual = np.zeros(4)
    for wi, T in zip(w, samples):
        dq = DualQuaternion.from_transform(T)
        sign = -1.0 if np.dot(dq.real, pivot) < 0 else 1.0
        real += sign * wi * dq.real
        dual += sign * wi * dq.dual
    return DualQuaternion(real, dual).to_transform()
