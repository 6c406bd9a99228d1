"""Unified manipulation reward suite over reference trajectories.

Covers the object-centric distance chain with contact gating, object
trajectory tracking, the power penalty, residual action composition, early
termination, and the fixed-layout observation vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import UnitQuaternion, Vec3, quat_distance

N_CHAIN_KEYPOINTS = 12  # 6 keypoints per hand, two hands


class ChainLengthMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    """An observation block has the wrong length; message names the field."""


@dataclass(frozen=True)
class DistanceChain:
    """Vectors from the object center to the 12 hand keypoints, in meters."""

    vectors: np.ndarray  # (12, 3)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.shape != (N_CHAIN_KEYPOINTS, 3):
            raise ChainLengthMismatch(
                f"distance chain must be ({N_CHAIN_KEYPOINTS}, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("distance chain contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @staticmethod
    def from_keypoints(object_center: Vec3, keypoints) -> "DistanceChain":
        c = object_center.to_array()
        vecs = np.array([p.to_array() - c for p in keypoints], dtype=float)
        return DistanceChain(vecs)

    def flatten(self) -> np.ndarray:
        return self.vectors.reshape(-1)


@dataclass(frozen=True)
class ContactSet:
    """Boolean contact flags for (hand_part_id, object_id) pairs."""

    pairs: tuple[tuple[str, str, bool], ...]

    def __post_init__(self):
        keys = [(p, o) for p, o, _ in self.pairs]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (part, object) pair in contact set")

    def flags_vector(self) -> np.ndarray:
        """Flags as floats, ordered by sorted (part, object) key."""
        ordered = sorted(self.pairs, key=lambda t: (t[0], t[1]))
        return np.array([1.0 if c else 0.0 for _, _, c in ordered])


@dataclass(frozen=True)
class RewardConfig:
    k1: float = 1.0        # object position coefficient
    k2: float = 1.0        # object orientation coefficient
    lam: float = 1e-3      # power penalty coefficient
    n_num: int = 2         # contact count threshold gating the chain reward
    w_chain: float = 1.0
    w_obj: float = 1.0

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0 or self.lam < 0 or self.n_num < 0:
            raise ValueError("reward coefficients must be nonnegative")


@dataclass(frozen=True)
class JointState:
    forces: np.ndarray      # actuation force per hand joint (N·m)
    velocities: np.ndarray  # joint velocity (rad/s)

    def __post_init__(self):
        f = np.asarray(self.forces, dtype=float)
        v = np.asarray(self.velocities, dtype=float)
        if f.shape != v.shape:
            raise ValueError("force and velocity vectors must have equal length")
        object.__setattr__(self, "forces", f)
        object.__setattr__(self, "velocities", v)


@dataclass(frozen=True)
class ResidualBounds:
    translation: float = 0.01   # meters
    orientation: float = 0.04   # radians

    def __post_init__(self):
        if self.translation <= 0 or self.orientation <= 0:
            raise ValueError("residual bounds must be positive")


def contact_count(contacts: ContactSet) -> int:
    """Number of distinct contacting (hand part, object) pairs.

    The symmetric double sum over hand parts and objects counts each
    contacting pair twice; halving it leaves the distinct-pair count.
    """
    double = sum(2 for _, _, touching in contacts.pairs if touching)
    return double // 2


def chain_reward(current: DistanceChain, reference: DistanceChain,
                 n_contact: int, cfg: RewardConfig) -> float:
    """exp(-mean keypoint deviation norm), gated to 0 below the contact threshold."""
    if n_contact < cfg.n_num:
        return 0.0
    diffs = np.linalg.norm(reference.vectors - current.vectors, axis=1)
    return float(math.exp(-float(np.mean(diffs))))


def object_tracking_reward(p: Vec3, q: UnitQuaternion, p_ref: Vec3,
                           q_ref: UnitQuaternion, cfg: RewardConfig) -> float:
    pos_err2 = (p - p_ref).norm() ** 2
    ori_err = quat_distance(q, q_ref)
    return float(math.exp(-cfg.k1 * pos_err2 - cfg.k2 * ori_err ** 2))


def power_penalty(js: JointState, cfg: RewardConfig) -> float:
    return float(-cfg.lam * np.sum(np.abs(js.forces * js.velocities)))


def total_reward(chain: float, obj: float, penalty: float, cfg: RewardConfig) -> float:
    return cfg.w_chain * chain + cfg.w_obj * obj + penalty


def compose_residual_action(a_g: np.ndarray, delta: np.ndarray,
                            bounds: ResidualBounds) -> np.ndarray:
    """Scale a [-1, 1] network residual to physical bounds and add it to the
    coarse guidance action (translation then Euler components)."""
    a_g = np.asarray(a_g, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if a_g.shape != (6,) or delta.shape != (6,):
        raise DimensionMismatch("residual composition expects 6-component actions")
    scale = np.array([bounds.translation] * 3 + [bounds.orientation] * 3)
    return a_g + delta * scale


def should_terminate_early(p_obj: Vec3, p_ref: Vec3, threshold: float) -> bool:
    """True when object tracking error strictly exceeds the threshold."""
    if threshold <= 0:
        raise ValueError("termination threshold must be positive")
    return (p_obj - p_ref).norm() > threshold


# Observation layout: appendix-table order and dimensions; the underspecified
# 10-dim reference-distance block is deliberately omitted.
OBS_LAYOUT: tuple[tuple[str, int], ...] = (
    ("arm_qpos", 12),
    ("hand_qpos", 36),
    ("arm_qvel", 12),
    ("hand_qvel", 36),
    ("hand_pos", 6),
    ("hand_quat", 8),
    ("distance_chain", 72),
    ("contact", 24),
    ("actuator", 24),
    ("time", 1),
    ("ref_hand_pos", 6),
    ("ref_hand_quat", 8),
    ("ref_object_pos", 3),
    ("ref_object_quat", 4),
)
OBS_DIM = sum(dim for _, dim in OBS_LAYOUT)


@dataclass(frozen=True)
class StepState:
    """Robot-side quantities entering the observation at one control step."""

    arm_qpos: np.ndarray
    hand_qpos: np.ndarray
    arm_qvel: np.ndarray
    hand_qvel: np.ndarray
    hand_pos: np.ndarray
    hand_quat: np.ndarray
    chain: DistanceChain
    actuator: np.ndarray


@dataclass(frozen=True)
class ReferenceState:
    """Reference-frame quantities paired with a StepState."""

    chain: DistanceChain
    hand_pos: np.ndarray
    hand_quat: np.ndarray
    object_pos: np.ndarray
    object_quat: np.ndarray


def _block(name: str, values, expected: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape[0] != expected:
        raise DimensionMismatch(f"field {name!r} has dim {arr.shape[0]}, expected {expected}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"field {name!r} contains non-finite values")
    return arr


def build_observation(state: StepState, reference: ReferenceState,
                      contact_flags, step_index: int, horizon: int) -> np.ndarray:
    """Concatenate observation blocks in the documented fixed layout.

    The 72-dim distance-chain block is the current chain (36) followed by the
    reference chain (36); time is the normalized step index t/T.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    chain_block = np.concatenate([state.chain.flatten(), reference.chain.flatten()])
    blocks = [
        _block("arm_qpos", state.arm_qpos, 12),
        _block("hand_qpos", state.hand_qpos, 36),
        _block("arm_qvel", state.arm_qvel, 12),
        _block("hand_qvel", state.hand_qvel, 36),
        _block("hand_pos", state.hand_pos, 6),
        _block("hand_quat", state.hand_quat, 8),
        _block("distance_chain", chain_block, 72),
        _block("contact", contact_flags, 24),
        _block("actuator", state.actuator, 24),
        np.array([step_index / horizon], dtype=float),
        _block("ref_hand_pos", reference.hand_pos, 6),
        _block("ref_hand_quat", reference.hand_quat, 8),
        _block("ref_object_pos", reference.object_pos, 3),
        _block("ref_object_quat", reference.object_quat, 4),
    ]
    obs = np.concatenate(blocks)
    assert obs.shape == (OBS_DIM,)
    return obs
