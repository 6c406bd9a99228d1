"""Deterministic synthetic world: a planar omnidirectional base with a
forward-mounted pinhole camera over a 3D landmark field, a matcher oracle
standing in for learned feature matching, depth rendering, and first-order
kinematic chains for the hybrid-control harness.

All randomness flows through explicit seeds; equal seeds reproduce runs
bit-identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .depth_aug import DepthImage
from .geometry import (
    CameraIntrinsics,
    PixelPoint,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    compose,
    wrap_angle,
)
from .pnp_servo import CAMERA_FORWARD_EXTRINSIC, Correspondence


class DegenerateField(RuntimeError):
    pass


class NoVisibleLandmarks(RuntimeError):
    pass


@dataclass(frozen=True)
class LandmarkField:
    points: np.ndarray  # (n, 3) world frame, meters

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("landmark field must be an (n, 3) array")
        if p.shape[0] < 12:
            raise ValueError(f"landmark field needs >= 12 points, got {p.shape[0]}")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class BaseState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_transform(self) -> RigidTransform:
        return RigidTransform(UnitQuaternion.from_yaw(self.yaw),
                              Vec3(self.x, self.y, 0.0))


@dataclass(frozen=True)
class WorldConfig:
    n_landmarks: int = 60
    field_x: tuple[float, float] = (1.5, 3.5)
    field_y: tuple[float, float] = (-1.5, 1.5)
    field_z: tuple[float, float] = (-1.0, 1.0)
    image_width: int = 320
    image_height: int = 320
    fx: float = 300.0
    fy: float = 300.0
    near: float = 0.2
    far: float = 10.0
    pixel_noise_sigma: float = 1.0
    outlier_fraction: float = 0.1
    depth_noise_sigma: float = 0.005
    actuation_noise_sigma: float = 0.02
    coupling_gain: float = 0.2       # lateral slip per (rad of reorientation x m of travel)
    backdrop_depth: float = 4.0
    splat_radius: int = 1            # landmark footprint half-width in pixels
    extrinsic: RigidTransform = field(default_factory=lambda: CAMERA_FORWARD_EXTRINSIC)
    seed: int = 0

    def __post_init__(self):
        if min(self.pixel_noise_sigma, self.depth_noise_sigma,
               self.actuation_noise_sigma) < 0:
            raise ValueError("noise magnitudes must be nonnegative")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ValueError("outlier fraction must lie in [0, 1)")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy,
                                self.image_width / 2.0, self.image_height / 2.0)


def field_is_degenerate(points: np.ndarray, tol: float = 0.05) -> bool:
    """True when the points are (near) coplanar: smallest singular value of
    the centered cloud below tolerance."""
    p = np.asarray(points, dtype=float)
    centered = p - p.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[-1] < tol)


def generate_field(cfg: WorldConfig) -> LandmarkField:
    """Seeded uniform landmarks in the configured volume, non-coplanarity
    verified with bounded regeneration."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(20):
        pts = np.stack([
            rng.uniform(*cfg.field_x, size=cfg.n_landmarks),
            rng.uniform(*cfg.field_y, size=cfg.n_landmarks),
            rng.uniform(*cfg.field_z, size=cfg.n_landmarks),
        ], axis=1)
        if not field_is_degenerate(pts):
            return LandmarkField(pts)
    raise DegenerateField("could not generate a non-coplanar landmark field")


def _camera_frame(base: BaseState, extrinsic: RigidTransform,
                  points: np.ndarray) -> np.ndarray:
    cam_in_world = compose(base.as_transform(), extrinsic)
    inv = cam_in_world.inverse()
    r = inv.rotation.to_rotation_matrix()
    t = inv.translation.to_array()
    return points @ r.T + t


def _in_frustum(cam_pts: np.ndarray, k: CameraIntrinsics,
                cfg: WorldConfig) -> np.ndarray:
    z = cam_pts[:, 2]
    ok = (z > cfg.near) & (z < cfg.far)
    safe_z = np.where(ok, z, 1.0)
    u = k.fx * cam_pts[:, 0] / safe_z + k.cx
    v = k.fy * cam_pts[:, 1] / safe_z + k.cy
    ok &= (u >= 0) & (u < cfg.image_width) & (v >= 0) & (v < cfg.image_height)
    return ok


@dataclass(frozen=True)
class Observation:
    correspondences: list[Correspondence]
    outlier_mask: np.ndarray
    depth: DepthImage


def render_depth_image(base: BaseState, fld: LandmarkField, k: CameraIntrinsics,
                       cfg: WorldConfig, seed, *, depth_noise_sigma: float = 0.0,
                       missing_fraction: float = 0.0) -> DepthImage:
    """Z-buffer of landmark splats over a flat backdrop at the maximum depth,
    with optional per-landmark depth noise and missing-pixel zeros."""
    rng = np.random.default_rng(seed)
    cam = _camera_frame(base, cfg.extrinsic, fld.points)
    visible = _in_frustum(cam, k, cfg)
    img = np.full((cfg.image_height, cfg.image_width), cfg.backdrop_depth)
    noise = rng.normal(0.0, depth_noise_sigma, size=len(cam)) \
        if depth_noise_sigma > 0 else np.zeros(len(cam))
    r = cfg.splat_radius
    for i in np.nonzero(visible)[0]:
        z = cam[i, 2]
        u = int(round(k.fx * cam[i, 0] / z + k.cx))
        v = int(round(k.fy * cam[i, 1] / z + k.cy))
        zn = min(max(z + noise[i], 0.0), cfg.backdrop_depth)
        v0, v1 = max(0, v - r), min(cfg.image_height, v + r + 1)
        u0, u1 = max(0, u - r), min(cfg.image_width, u + r + 1)
        patch = img[v0:v1, u0:u1]
        np.minimum(patch, zn, out=patch)
    if missing_fraction > 0:
        n_pix = img.size
        n_missing = int(round(missing_fraction * n_pix))
        idx = rng.choice(n_pix, size=n_missing, replace=False)
        flat = img.reshape(-1)
        flat[idx] = 0.0
    return DepthImage(img, cfg.backdrop_depth)


def observe(base: BaseState, goal: BaseState, fld: LandmarkField,
            k: CameraIntrinsics, cfg: WorldConfig, seed) -> Observation:
    """Matcher-oracle observation between the current and goal viewpoints.

    Landmarks visible from both poses yield correspondences: the goal-image
    pixel with Gaussian noise, and the current-camera 3D point displaced
    along its ray by depth noise. An exact round(outlier_fraction * n) of the
    matches have their goal pixels replaced by uniform random pixels, with
    the labels recorded for test access. Also renders the current-view depth
    image. Draw order is fixed: pixel noise, depth noise, outlier choice,
    outlier pixels, depth render.
    """
    rng = np.random.default_rng(seed)
    cam_cur = _camera_frame(base, cfg.extrinsic, fld.points)
    cam_goal = _camera_frame(goal, cfg.extrinsic, fld.points)
    visible = _in_frustum(cam_cur, k, cfg) & _in_frustum(cam_goal, k, cfg)
    idx = np.nonzero(visible)[0]
    if len(idx) == 0:
        raise NoVisibleLandmarks("no landmark visible from both poses")
    cur = cam_cur[idx]
    goal_pts = cam_goal[idx]
    m = len(idx)

    gz = goal_pts[:, 2]
    goal_px = np.stack([k.fx * goal_pts[:, 0] / gz + k.cx,
                        k.fy * goal_pts[:, 1] / gz + k.cy], axis=1)
    goal_px = goal_px + rng.normal(0.0, cfg.pixel_noise_sigma, size=(m, 2))

    ray_norm = np.linalg.norm(cur, axis=1)
    eps = rng.normal(0.0, cfg.depth_noise_sigma, size=m)
    scale = np.maximum(1.0 + eps / ray_norm, 1e-3)
    cur_noisy = cur * scale[:, None]

    n_out = int(round(cfg.outlier_fraction * m))
    outlier_mask = np.zeros(m, dtype=bool)
    if n_out > 0:
        out_idx = rng.choice(m, size=n_out, replace=False)
        outlier_mask[out_idx] = True
        goal_px[out_idx, 0] = rng.uniform(0.0, cfg.image_width, size=n_out)
        goal_px[out_idx, 1] = rng.uniform(0.0, cfg.image_height, size=n_out)

    corrs = [Correspondence(PixelPoint(goal_px[i, 0], goal_px[i, 1]),
                            Vec3.from_array(cur_noisy[i])) for i in range(m)]
    depth = render_depth_image(base, fld, k, cfg, rng,
                               depth_noise_sigma=cfg.depth_noise_sigma)
    return Observation(corrs, outlier_mask, depth)


def command_direction(v) -> float | None:
    """Heading of the commanded body-frame translation, None when (near) zero."""
    vx, vy = float(v[0]), float(v[1])
    if math.hypot(vx, vy) < 1e-9:
        return None
    return math.atan2(vy, vx)


def step_base(state: BaseState, v, dt: float, cfg: WorldConfig, seed,
              prev_direction: float | None = None) -> BaseState:
    """Integrate one planar velocity command with multiplicative actuation
    noise and an optional wheel-reorientation slip.

    Translation uses a symmetric half-translate / rotate / half-translate
    scheme so that, at zero noise, negating the command exactly inverts the
    step. When the commanded translation heading changes by delta relative to
    prev_direction, a lateral kick of coupling_gain * |delta| * speed * dt is
    injected perpendicular to the new heading (sign follows delta),
    emulating the extra displacement of wheel realignment.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, cfg.actuation_noise_sigma, size=3) \
        if cfg.actuation_noise_sigma > 0 else np.zeros(3)
    vx = float(v[0]) * (1.0 + noise[0])
    vy = float(v[1]) * (1.0 + noise[1])
    vyaw = float(v[2]) * (1.0 + noise[2])

    def world_step(x, y, yaw, half_dt):
        c, s = math.cos(yaw), math.sin(yaw)
        return x + half_dt * (c * vx - s * vy), y + half_dt * (s * vx + c * vy)

    x, y = world_step(state.x, state.y, state.yaw, 0.5 * dt)
    yaw = state.yaw + dt * vyaw
    x, y = world_step(x, y, yaw, 0.5 * dt)

    direction = command_direction(v)
    if (cfg.coupling_gain > 0 and direction is not None
            and prev_direction is not None):
        delta = wrap_angle(direction - prev_direction)
        if abs(delta) > 1e-9:
            speed = math.hypot(float(v[0]), float(v[1]))
            kick = cfg.coupling_gain * abs(delta) * speed * dt
            heading = yaw + direction + math.copysign(math.pi / 2.0, delta)
            x += kick * math.cos(heading)
            y += kick * math.sin(heading)
    return BaseState(x, y, wrap_angle(yaw))


def ground_truth_error(base: BaseState, goal: BaseState) -> tuple[float, float]:
    """Planar Euclidean distance and absolute wrapped yaw difference."""
    dist = math.hypot(base.x - goal.x, base.y - goal.y)
    ori = abs(wrap_angle(base.yaw - goal.yaw))
    return dist, ori


class ServoWorld:
    """Observation-and-command interface binding one servo episode to the
    synthetic world; logs ground-truth errors after every command."""

    def __init__(self, fld: LandmarkField, goal: BaseState, start: BaseState,
                 cfg: WorldConfig, seed: int):
        self.field = fld
        self.goal = goal
        self.state = start
        self.cfg = cfg
        self.intrinsics = cfg.intrinsics()
        self._rng = np.random.default_rng(seed)
        self._prev_direction: float | None = None
        self.gt_log: list[tuple[float, float]] = []
        self.last_observation: Observation | None = None

    def observe(self, goal: BaseState | None = None):
        obs = observe(self.state, goal if goal is not None else self.goal,
                      self.field, self.intrinsics, self.cfg, self._rng)
        self.last_observation = obs
        return obs.correspondences

    def command(self, v_x: float, v_y: float, v_yaw: float, dt: float) -> None:
        self.state = step_base(self.state, (v_x, v_y, v_yaw), dt, self.cfg,
                               self._rng, self._prev_direction)
        direction = command_direction((v_x, v_y, v_yaw))
        if direction is not None:
            self._prev_direction = direction
        self.gt_log.append(ground_truth_error(self.state, self.goal))

    def ground_truth(self) -> tuple[float, float]:
        return ground_truth_error(self.state, self.goal)


@dataclass(frozen=True)
class KinematicChain:
    """First-order joint tracker: q follows a target with per-joint lag tau."""

    q: np.ndarray
    tau: np.ndarray       # seconds per joint
    lower: np.ndarray
    upper: np.ndarray
    limit_hit: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        tau = np.broadcast_to(np.asarray(self.tau, dtype=float), q.shape).copy()
        lower = np.broadcast_to(np.asarray(self.lower, dtype=float), q.shape).copy()
        upper = np.broadcast_to(np.asarray(self.upper, dtype=float), q.shape).copy()
        if np.any(tau <= 0):
            raise ValueError("lag constants must be positive")
        if np.any(q < lower) or np.any(q > upper):
            raise ValueError("joint positions outside limits")
        flags = self.limit_hit
        flags = np.zeros(q.shape, dtype=bool) if flags is None \
            else np.asarray(flags, dtype=bool)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "limit_hit", flags)


def chain_step(chain: KinematicChain, target_q, dt: float) -> KinematicChain:
    """q <- q + (dt/tau) * (target - q), clamped to limits; clamping is
    flagged on the returned chain rather than raised."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    target = np.asarray(target_q, dtype=float)
    raw = chain.q + (dt / chain.tau) * (target - chain.q)
    clamped = np.clip(raw, chain.lower, chain.upper)
    return replace(chain, q=clamped, limit_hit=clamped != raw)


def scene_suite(n_scenes: int, seed: int = 0) -> list[tuple[DepthImage, DepthImage]]:
    """Paired (clean sim, synthetic noisy real) desk-scale depth scenes.

    The real image of each pair carries sensor depth noise and missing-pixel
    zeros; the sim image is the clean render of the same scene.
    """
    cfg = WorldConfig(
        n_landmarks=80,
        field_x=(0.35, 1.3), field_y=(-0.5, 0.5), field_z=(-0.4, 0.4),
        image_width=160, image_height=160,
        backdrop_depth=1.5, splat_radius=2,
        depth_noise_sigma=0.005,
    )
    k = cfg.intrinsics()
    pairs = []
    for i in range(n_scenes):
        fld = generate_field(replace(cfg, seed=seed + 1000 * i))
        base = BaseState()
        clean = render_depth_image(base, fld, k, cfg, seed + 1)
        real = render_depth_image(base, fld, k, cfg, seed + 2,
                                  depth_noise_sigma=cfg.depth_noise_sigma,
                                  missing_fraction=0.02)
        pairs.append((clean, real))
    return pairs
