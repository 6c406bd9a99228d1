"""One-shot reference-trajectory ingestion, preprocessing, and augmentation.

Trajectory files are line-delimited text: a versioned header declaring the
object layout, then one frame per line with fields in fixed order
(frame index, dt, object blocks of id + 7-real pose, per-hand 6x3 keypoints
plus 7-real wrist pose, per-arm 6-real guidance action).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Pose,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    apply_point,
    apply_transform,
    quat_distance,
)

FORMAT_TAG = "trajv1"


class ParseError(ValueError):
    """Malformed trajectory file record."""


class ValidationError(ValueError):
    """Trajectory invariant violation; message names the offending frame."""


class InvalidStride(ValueError):
    pass


class EmptyGroup(ValueError):
    pass


@dataclass(frozen=True)
class HandKeypoints:
    """Five fingertip points plus the palm point of one hand, in meters."""

    fingertips: tuple[Vec3, Vec3, Vec3, Vec3, Vec3]
    palm: Vec3

    def points(self) -> list[Vec3]:
        return list(self.fingertips) + [self.palm]

    def to_array(self) -> np.ndarray:
        return np.concatenate([p.to_array() for p in self.points()])

    @staticmethod
    def from_array(a) -> "HandKeypoints":
        a = np.asarray(a, dtype=float).reshape(6, 3)
        tips = tuple(Vec3.from_array(a[i]) for i in range(5))
        return HandKeypoints(tips, Vec3.from_array(a[5]))


@dataclass(frozen=True)
class TrajectoryFrame:
    object_poses: tuple[tuple[str, Pose], ...]
    left_hand: HandKeypoints
    right_hand: HandKeypoints
    left_wrist: Pose
    right_wrist: Pose
    left_action: np.ndarray   # 6 reals: translation (m), Euler (rad)
    right_action: np.ndarray

    def __post_init__(self):
        ids = [oid for oid, _ in self.object_poses]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate object ids within a frame")
        object.__setattr__(self, "left_action", np.asarray(self.left_action, dtype=float))
        object.__setattr__(self, "right_action", np.asarray(self.right_action, dtype=float))
        if self.left_action.shape != (6,) or self.right_action.shape != (6,):
            raise ValidationError("guidance actions must have 6 components per arm")

    def object_ids(self) -> tuple[str, ...]:
        return tuple(oid for oid, _ in self.object_poses)

    def pose_of(self, object_id: str) -> Pose:
        for oid, pose in self.object_poses:
            if oid == object_id:
                return pose
        raise KeyError(object_id)


@dataclass(frozen=True)
class ReferenceTrajectory:
    frames: tuple[TrajectoryFrame, ...]
    dt: float

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValidationError("trajectory must contain at least one frame")
        if not (self.dt > 0):
            raise ValidationError("dt must be positive")
        ids0 = set(self.frames[0].object_ids())
        for i, frame in enumerate(self.frames):
            if set(frame.object_ids()) != ids0:
                raise ValidationError(f"frame {i}: object_id set differs from frame 0")

    def __len__(self) -> int:
        return len(self.frames)

    def object_ids(self) -> tuple[str, ...]:
        return self.frames[0].object_ids()


@dataclass(frozen=True)
class AugmentationRange:
    """Per-axis translation bounds (m) and a symmetric yaw bound (rad)."""

    x: tuple[float, float] = (0.0, 0.0)
    y: tuple[float, float] = (0.0, 0.0)
    z: tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z):
            if lo > hi:
                raise ValueError("translation bound lower > upper")
        if self.yaw < 0:
            raise ValueError("yaw bound must be nonnegative")


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_trajectory(traj: ReferenceTrajectory, path) -> None:
    ids = traj.object_ids()
    lines = [f"{FORMAT_TAG} objects={len(ids)} ids={','.join(ids)}"]
    for i, frame in enumerate(traj.frames):
        parts = [str(i), repr(float(traj.dt))]
        for oid, pose in frame.object_poses:
            parts.append(oid)
            parts.append(_format_floats(pose.to_array()))
        for hand, wrist in ((frame.left_hand, frame.left_wrist),
                            (frame.right_hand, frame.right_wrist)):
            parts.append(_format_floats(hand.to_array()))
            parts.append(_format_floats(wrist.to_array()))
        parts.append(_format_floats(frame.left_action))
        parts.append(_format_floats(frame.right_action))
        lines.append(" ".join(parts))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _take(tokens: list[str], n: int, frame: int, what: str) -> np.ndarray:
    if len(tokens) < n:
        raise ParseError(f"frame {frame}: truncated record while reading {what}")
    try:
        vals = np.array([float(t) for t in tokens[:n]], dtype=float)
    except ValueError as exc:
        raise ParseError(f"frame {frame}: non-numeric value in {what}: {exc}") from None
    del tokens[:n]
    return vals


def load_trajectory(path) -> ReferenceTrajectory:
    with open(path) as fh:
        raw_lines = [ln.strip() for ln in fh if ln.strip()]
    if not raw_lines:
        raise ParseError("empty trajectory file")
    header = raw_lines[0].split()
    if not header or header[0] != FORMAT_TAG:
        raise ParseError(f"expected header tag {FORMAT_TAG!r}")
    fields = dict(tok.split("=", 1) for tok in header[1:] if "=" in tok)
    try:
        n_objects = int(fields["objects"])
        ids = tuple(fields["ids"].split(",")) if fields.get("ids") else ()
    except (KeyError, ValueError) as exc:
        raise ParseError(f"malformed header: {exc}") from None
    if len(ids) != n_objects:
        raise ParseError("header object count does not match declared ids")

    frames = []
    dt = None
    for k, line in enumerate(raw_lines[1:]):
        tokens = line.split()
        _take(tokens, 1, k, "frame index")
        frame_dt = float(_take(tokens, 1, k, "dt")[0])
        if dt is None:
            dt = frame_dt
        elif abs(frame_dt - dt) > 1e-12:
            raise ValidationError(f"frame {k}: dt {frame_dt} differs from header frame dt {dt}")
        object_poses = []
        for _ in range(n_objects):
            if not tokens:
                raise ParseError(f"frame {k}: missing object block")
            oid = tokens.pop(0)
            pose = Pose.from_array(_take(tokens, 7, k, f"pose of {oid!r}"))
            object_poses.append((oid, pose))
        seen = {oid for oid, _ in object_poses}
        if seen != set(ids):
            raise ValidationError(f"frame {k}: object ids {sorted(seen)} != header ids {sorted(ids)}")
        hands = []
        for side in ("left", "right"):
            kp = HandKeypoints.from_array(_take(tokens, 18, k, f"{side} hand keypoints"))
            wrist = Pose.from_array(_take(tokens, 7, k, f"{side} wrist pose"))
            hands.append((kp, wrist))
        left_action = _take(tokens, 6, k, "left guidance action")
        right_action = _take(tokens, 6, k, "right guidance action")
        if tokens:
            raise ParseError(f"frame {k}: {len(tokens)} trailing tokens")
        frames.append(TrajectoryFrame(
            object_poses=tuple(object_poses),
            left_hand=hands[0][0], right_hand=hands[1][0],
            left_wrist=hands[0][1], right_wrist=hands[1][1],
            left_action=left_action, right_action=right_action,
        ))
    if dt is None:
        raise ParseError("trajectory file has a header but no frames")
    return ReferenceTrajectory(frames=tuple(frames), dt=dt)


def _transform_hand(t: RigidTransform, hand: HandKeypoints) -> HandKeypoints:
    tips = tuple(apply_point(t, p) for p in hand.fingertips)
    return HandKeypoints(tips, apply_point(t, hand.palm))


def _rotate_action(t: RigidTransform, action: np.ndarray) -> np.ndarray:
    # Guidance actions are deltas: rotate the translational part, keep the
    # Euler offsets unchanged.
    out = np.array(action, dtype=float)
    out[:3] = t.rotation.to_rotation_matrix() @ out[:3]
    return out


def augment_trajectory(traj: ReferenceTrajectory, t: RigidTransform) -> ReferenceTrajectory:
    """Apply one rigid transform to every object and hand pose in every frame."""
    frames = []
    for frame in traj.frames:
        frames.append(TrajectoryFrame(
            object_poses=tuple((oid, apply_transform(t, pose))
                               for oid, pose in frame.object_poses),
            left_hand=_transform_hand(t, frame.left_hand),
            right_hand=_transform_hand(t, frame.right_hand),
            left_wrist=apply_transform(t, frame.left_wrist),
            right_wrist=apply_transform(t, frame.right_wrist),
            left_action=_rotate_action(t, frame.left_action),
            right_action=_rotate_action(t, frame.right_action),
        ))
    return ReferenceTrajectory(frames=tuple(frames), dt=traj.dt)


def sample_random_transform(rng_range: AugmentationRange, seed: int) -> RigidTransform:
    """Uniform translation within per-axis bounds and a uniform pure-yaw rotation."""
    rng = np.random.default_rng(seed)
    tx = rng.uniform(*rng_range.x)
    ty = rng.uniform(*rng_range.y)
    tz = rng.uniform(*rng_range.z)
    yaw = rng.uniform(-rng_range.yaw, rng_range.yaw) if rng_range.yaw > 0 else 0.0
    return RigidTransform(UnitQuaternion.from_yaw(yaw), Vec3(tx, ty, tz))


def downsample(traj: ReferenceTrajectory, stride: int) -> ReferenceTrajectory:
    """Keep frames 0, stride, 2*stride, ... and always the final frame."""
    if stride < 1:
        raise InvalidStride(f"stride must be >= 1, got {stride}")
    n = len(traj.frames)
    keep = list(range(0, n, stride))
    if keep[-1] != n - 1:
        keep.append(n - 1)
    return ReferenceTrajectory(frames=tuple(traj.frames[i] for i in keep),
                               dt=traj.dt * stride)


def canonicalize_symmetry(traj: ReferenceTrajectory, object_id: str,
                          symmetry_group: list[UnitQuaternion]) -> ReferenceTrajectory:
    """Remove symmetry-induced orientation flips from one object's track.

    For each frame after the first, the orientation q is replaced by q ⊗ s for
    the group element s that minimizes the quaternion distance to the previous
    frame's canonicalized orientation. Ties keep the identity element so the
    operation is idempotent.
    """
    if not symmetry_group:
        raise EmptyGroup("symmetry group must contain at least the identity")
    frames = [traj.frames[0]]
    prev = dict(traj.frames[0].object_poses)[object_id].orientation
    for frame in traj.frames[1:]:
        pose = frame.pose_of(object_id)
        best_q = pose.orientation
        best_d = quat_distance(best_q, prev)
        for s in symmetry_group:
            cand = pose.orientation.multiply(s)
            d = quat_distance(cand, prev)
            if d < best_d - 1e-15:
                best_q, best_d = cand, d
        new_poses = tuple(
            (oid, Pose(p.position, best_q) if oid == object_id else p)
            for oid, p in frame.object_poses
        )
        frames.append(TrajectoryFrame(
            object_poses=new_poses,
            left_hand=frame.left_hand, right_hand=frame.right_hand,
            left_wrist=frame.left_wrist, right_wrist=frame.right_wrist,
            left_action=frame.left_action, right_action=frame.right_action,
        ))
        prev = best_q
    return ReferenceTrajectory(frames=tuple(frames), dt=traj.dt)
