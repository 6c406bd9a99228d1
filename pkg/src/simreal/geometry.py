"""SE(3) pose algebra, quaternion metrics, and pinhole camera projection.

All types are immutable values and every operation is pure. Poses serialize
as 7 reals (px, py, pz, qw, qx, qy, qz) everywhere in this package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNIT_NORM_TOL = 1e-9


class NonPositiveDepth(ValueError):
    """A projective operation received a point with depth <= 0."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = a % (2.0 * math.pi)
    if w > math.pi:
        w -= 2.0 * math.pi
    return w


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("Vec3 components must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    @staticmethod
    def zero() -> "Vec3":
        return Vec3(0.0, 0.0, 0.0)

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z), renormalized on construction.

    Construction renormalizes so that repeated composition cannot drift; a
    near-zero norm is rejected rather than silently normalized.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)
        if n < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        if abs(n - 1.0) > UNIT_NORM_TOL:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @staticmethod
    def identity() -> "UnitQuaternion":
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "UnitQuaternion":
        ax = np.asarray(axis, dtype=float)
        n = np.linalg.norm(ax)
        if n < 1e-12:
            raise ValueError("rotation axis must be nonzero")
        ax = ax / n
        half = 0.5 * angle
        s = math.sin(half)
        return UnitQuaternion(math.cos(half), s * ax[0], s * ax[1], s * ax[2])

    @staticmethod
    def from_yaw(angle: float) -> "UnitQuaternion":
        return UnitQuaternion.from_axis_angle((0.0, 0.0, 1.0), angle)

    @staticmethod
    def from_rotation_matrix(m) -> "UnitQuaternion":
        r = np.asarray(m, dtype=float)
        t = r[0, 0] + r[1, 1] + r[2, 2]
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            return UnitQuaternion(0.25 * s, (r[2, 1] - r[1, 2]) / s,
                                  (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
        if r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            return UnitQuaternion((r[2, 1] - r[1, 2]) / s, 0.25 * s,
                                  (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
        if r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
            return UnitQuaternion((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                                  0.25 * s, (r[1, 2] + r[2, 1]) / s)
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        return UnitQuaternion((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                              (r[1, 2] + r[2, 1]) / s, 0.25 * s)

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def to_rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        """Hamilton product self ⊗ other (applies other first)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: Vec3) -> Vec3:
        r = self.to_rotation_matrix() @ v.to_array()
        return Vec3.from_array(r)

    def dot(self, other: "UnitQuaternion") -> float:
        return (self.w * other.w + self.x * other.x
                + self.y * other.y + self.z * other.z)


@dataclass(frozen=True)
class Pose:
    position: Vec3
    orientation: UnitQuaternion

    @staticmethod
    def identity() -> "Pose":
        return Pose(Vec3.zero(), UnitQuaternion.identity())

    def to_array(self) -> np.ndarray:
        """7-real serialization (px, py, pz, qw, qx, qy, qz)."""
        return np.concatenate([self.position.to_array(), self.orientation.to_array()])

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=float)
        return Pose(Vec3.from_array(a[:3]),
                    UnitQuaternion(float(a[3]), float(a[4]), float(a[5]), float(a[6])))


@dataclass(frozen=True)
class RigidTransform:
    rotation: UnitQuaternion
    translation: Vec3

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(UnitQuaternion.identity(), Vec3.zero())

    @staticmethod
    def from_yaw_and_translation(yaw: float, translation: Vec3) -> "RigidTransform":
        return RigidTransform(UnitQuaternion.from_yaw(yaw), translation)

    def inverse(self) -> "RigidTransform":
        inv_rot = self.rotation.conjugate()
        t = inv_rot.rotate(self.translation)
        return RigidTransform(inv_rot, Vec3(-t.x, -t.y, -t.z))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("pixel coordinates must be finite")


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a ∘ b: the result applies b first, then a."""
    rot = a.rotation.multiply(b.rotation)
    t = a.rotation.rotate(b.translation) + a.translation
    return RigidTransform(rot, t)


def apply_point(t: RigidTransform, p: Vec3) -> Vec3:
    return t.rotation.rotate(p) + t.translation


def apply_transform(t: RigidTransform, p: Pose) -> Pose:
    """Rigidly transform a pose: R·position + translation, rotation ⊗ orientation."""
    return Pose(apply_point(t, p.position), t.rotation.multiply(p.orientation))


def quat_distance(a: UnitQuaternion, b: UnitQuaternion) -> float:
    """Geodesic angle 2·arccos(|<a,b>|) in [0, pi]; invariant to sign flips."""
    d = min(1.0, abs(a.dot(b)))
    return 2.0 * math.acos(d)


def project(k: CameraIntrinsics, point: Vec3) -> PixelPoint:
    if point.z <= 0.0:
        raise NonPositiveDepth(f"cannot project point with z = {point.z}")
    return PixelPoint(k.fx * point.x / point.z + k.cx,
                      k.fy * point.y / point.z + k.cy)


def lift(k: CameraIntrinsics, px: PixelPoint, depth: float) -> Vec3:
    if depth <= 0.0:
        raise NonPositiveDepth(f"cannot lift pixel with depth = {depth}")
    return Vec3((px.u - k.cx) / k.fx * depth,
                (px.v - k.cy) / k.fy * depth,
                depth)


def yaw_of(r: UnitQuaternion) -> float:
    """Rotation angle about the world vertical axis, atan2(R21, R11), in (-pi, pi]."""
    m = r.to_rotation_matrix()
    return math.atan2(m[1, 0], m[0, 0])


def pose_as_transform(p: Pose) -> RigidTransform:
    """View a world pose as the body-to-world transform."""
    return RigidTransform(p.orientation, p.position)
