"""Closed-loop PnP localization and sequential per-axis PID base control.

Pose estimation minimizes pixel reprojection error of current-frame 3D
points against goal-image pixels: a P3P minimal solver inside RANSAC,
followed by Gauss-Newton refinement on the inlier set. Control reads planar
errors (x, y, yaw) in the base frame and actuates one axis at a time until
every error is inside its threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import Polynomial

from .geometry import (
    CameraIntrinsics,
    PixelPoint,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    compose,
    wrap_angle,
    yaw_of,
)


class TooFewCorrespondences(ValueError):
    pass


class DegenerateGeometry(RuntimeError):
    pass


class PointBehindCamera(ValueError):
    pass


class SingularNormalEquations(RuntimeError):
    pass


class MatcherFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Correspondence:
    """A goal-image pixel paired with the matching 3D point in the current
    camera frame."""

    goal_pixel: PixelPoint
    current_point: Vec3

    def __post_init__(self):
        if self.current_point.z <= 0:
            raise ValueError("current-frame point must have positive depth")


@dataclass(frozen=True)
class PnPEstimate:
    rotation: UnitQuaternion
    translation: Vec3
    inlier_mask: np.ndarray
    mean_reprojection_error: float  # mean squared pixel distance over inliers

    def __post_init__(self):
        object.__setattr__(self, "inlier_mask",
                           np.asarray(self.inlier_mask, dtype=bool))

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


@dataclass(frozen=True)
class PoseError:
    """Goal pose expressed in the current base frame: positive e_x means the
    goal lies ahead of the robot."""

    e_x: float
    e_y: float
    e_yaw: float


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.8
    ki: float = 0.0
    kd: float = 0.1
    integral_clamp: float = 1.0
    output_clamp: float = 0.3

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError("gains must be nonnegative")
        if self.integral_clamp <= 0 or self.output_clamp <= 0:
            raise ValueError("clamps must be positive")


@dataclass
class PidState:
    integral: float = 0.0
    prev_error: float | None = None


# Camera looks along base +x: optical z = base x, optical x = base -y,
# optical y = base -z.
CAMERA_FORWARD_EXTRINSIC = RigidTransform(
    UnitQuaternion.from_rotation_matrix(np.array([
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ])),
    Vec3.zero(),
)


@dataclass(frozen=True)
class ServoConfig:
    eps_x: float = 0.01
    eps_y: float = 0.01
    eps_yaw: float = math.radians(1.0)
    ransac_iterations: int = 24
    inlier_threshold_px: float = 5.0
    ransac_seed: int = 0
    refine_max_iterations: int = 20
    refine_tolerance: float = 1e-12
    control_dt: float = 0.2
    max_steps: int = 200
    extrinsic: RigidTransform = field(default_factory=lambda: CAMERA_FORWARD_EXTRINSIC)
    gains_x: PidGains = field(default_factory=lambda: PidGains(output_clamp=0.3))
    gains_y: PidGains = field(default_factory=lambda: PidGains(output_clamp=0.3))
    gains_yaw: PidGains = field(default_factory=lambda: PidGains(output_clamp=0.5))
    min_correspondences: int = 4
    matcher_failure_cycles: int = 3
    simultaneous_axes: bool = False

    def __post_init__(self):
        if min(self.eps_x, self.eps_y, self.eps_yaw) <= 0:
            raise ValueError("thresholds must be positive")
        if self.control_dt <= 0:
            raise ValueError("control period must be positive")


def _corr_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([[c.current_point.x, c.current_point.y, c.current_point.z]
                    for c in corrs])
    pix = np.array([[c.goal_pixel.u, c.goal_pixel.v] for c in corrs])
    return pts, pix


def _project_points(R: np.ndarray, t: np.ndarray, pts: np.ndarray,
                    k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project transformed points; returns (pixels, valid-depth mask)."""
    cam = pts @ R.T + t
    z = cam[:, 2]
    valid = z > 1e-12
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([k.fx * cam[:, 0] / safe_z + k.cx,
                   k.fy * cam[:, 1] / safe_z + k.cy], axis=1)
    return uv, valid


def reprojection_error(k: CameraIntrinsics, est: PnPEstimate, corrs) -> float:
    """Mean squared pixel distance between reprojected and goal pixels."""
    if len(corrs) == 0:
        raise TooFewCorrespondences("no correspondences")
    pts, pix = _corr_arrays(corrs)
    uv, valid = _project_points(est.rotation.to_rotation_matrix(),
                                est.translation.to_array(), pts, k)
    if not np.all(valid):
        raise PointBehindCamera("transformed point has nonpositive depth")
    return float(np.mean(np.sum((uv - pix) ** 2, axis=1)))


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid fit: dst ≈ R @ src + t."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def _p3p_candidates(pts: np.ndarray, bearings: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pose candidates from three 2D-3D pairs (Grunert-style quartic).

    Solves for the depths s_i along the goal-frame bearing rays such that
    pairwise distances match the 3D points, then fits (R, t) to the
    reconstructed camera points. Returns up to four (R, t) candidates.
    """
    f1, f2, f3 = bearings
    ca, cb, cg = float(f2 @ f3), float(f1 @ f3), float(f1 @ f2)
    a2 = float(np.sum((pts[1] - pts[2]) ** 2))
    b2 = float(np.sum((pts[0] - pts[2]) ** 2))
    c2 = float(np.sum((pts[0] - pts[1]) ** 2))
    if min(a2, b2, c2) < 1e-16:
        return []
    big_a, big_b = a2 / b2, c2 / b2
    q2 = Polynomial([1.0, -2.0 * cb, 1.0])            # 1 - 2 v cb + v^2
    num = Polynomial([1.0, 0.0, -1.0]) + (big_a - big_b) * q2
    den = Polynomial([2.0 * cg, -2.0 * ca])           # 2 (cg - v ca)
    quartic = num * num - 2.0 * cg * num * den + (Polynomial([1.0]) - big_b * q2) * den * den
    if np.allclose(quartic.coef, 0.0, atol=1e-18):
        return []
    roots = quartic.roots()
    candidates = []
    for root in roots:
        if abs(root.imag) > 1e-8:
            continue
        v = float(root.real)
        if v <= 0:
            continue
        dv = den(v)
        if abs(dv) < 1e-12:
            continue
        u = float(num(v) / dv)
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(s1_sq)
        depths = np.array([s1, u * s1, v * s1])
        cam_pts = depths[:, None] * bearings
        candidates.append(_kabsch(pts, cam_pts))
    return candidates


def _pixel_bearings(pix: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    rays = np.stack([(pix[:, 0] - k.cx) / k.fx,
                     (pix[:, 1] - k.cy) / k.fy,
                     np.ones(len(pix))], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def solve_pnp_ransac(corrs, k: CameraIntrinsics, cfg: ServoConfig,
                     seed: int) -> PnPEstimate:
    """RANSAC over 4-point minimal samples, consensus by pixel reprojection
    distance, winner refined on its inliers.

    The hypothesis schedule is fixed by the seed and the winner is the
    earliest hypothesis achieving the maximum inlier count, so the result is
    deterministic. The final inlier mask and mean squared error are evaluated
    against the refined pose.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences(f"PnP needs at least 4 correspondences, got {n}")
    pts, pix = _corr_arrays(corrs)
    bearings = _pixel_bearings(pix, k)
    rng = np.random.default_rng(seed)
    samples = [rng.choice(n, size=4, replace=False)
               for _ in range(cfg.ransac_iterations)]

    thr_sq = cfg.inlier_threshold_px ** 2
    best_count = -1
    best_pose: tuple[np.ndarray, np.ndarray] | None = None
    best_mask = None
    for sample in samples:
        tri, probe = sample[:3], sample[3]
        pose = None
        probe_best = math.inf
        for r_c, t_c in _p3p_candidates(pts[tri], bearings[tri]):
            uv, valid = _project_points(r_c, t_c, pts[probe:probe + 1], k)
            if not valid[0]:
                continue
            err = float(np.sum((uv[0] - pix[probe]) ** 2))
            if err < probe_best:
                probe_best, pose = err, (r_c, t_c)
        if pose is None:
            continue
        uv, valid = _project_points(pose[0], pose[1], pts, k)
        dist_sq = np.sum((uv - pix) ** 2, axis=1)
        mask = valid & (dist_sq <= thr_sq)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_pose, best_mask = count, pose, mask
            if count == n:
                break
    if best_pose is None or best_count < 4:
        raise DegenerateGeometry(
            f"no consensus pose: best inlier count {max(best_count, 0)} of {n}")

    rough = PnPEstimate(UnitQuaternion.from_rotation_matrix(best_pose[0]),
                        Vec3.from_array(best_pose[1]), best_mask, 0.0)
    refined = refine_pnp(corrs, k, rough, cfg)
    # Re-evaluate consensus against the refined pose.
    uv, valid = _project_points(refined.rotation.to_rotation_matrix(),
                                refined.translation.to_array(), pts, k)
    dist_sq = np.sum((uv - pix) ** 2, axis=1)
    mask = valid & (dist_sq <= thr_sq)
    mean_err = float(np.mean(dist_sq[mask])) if mask.any() else math.inf
    return PnPEstimate(refined.rotation, refined.translation, mask, mean_err)


def _rotation_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        wx = _skew(w)
        return np.eye(3) + wx + 0.5 * wx @ wx
    axis = w / theta
    wx = _skew(axis)
    return np.eye(3) + math.sin(theta) * wx + (1.0 - math.cos(theta)) * wx @ wx


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _jacobian_residual(R: np.ndarray, t: np.ndarray, pts: np.ndarray,
                       pix: np.ndarray, k: CameraIntrinsics):
    """Stacked (2n, 6) reprojection Jacobian and (2n,) residual.

    Parameters are [dtheta, dt] with the rotation increment applied on the
    left: R <- exp([dtheta]x) R. Residual is projected minus observed pixels.
    """
    cam = pts @ R.T + t
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    if np.any(z <= 1e-12):
        return None, None
    a = k.fx / z
    b = -k.fx * x / z ** 2
    c = k.fy / z
    d = -k.fy * y / z ** 2
    n = len(pts)
    jac = np.zeros((2 * n, 6))
    jac[0::2, 0] = b * y
    jac[0::2, 1] = a * z - b * x
    jac[0::2, 2] = -a * y
    jac[0::2, 3] = a
    jac[0::2, 5] = b
    jac[1::2, 0] = -c * z + d * y
    jac[1::2, 1] = -d * x
    jac[1::2, 2] = c * x
    jac[1::2, 4] = c
    jac[1::2, 5] = d
    uv = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)
    residual = (uv - pix).reshape(-1)
    return jac, residual


def reprojection_jacobian(k: CameraIntrinsics, rotation: UnitQuaternion,
                          translation: Vec3, corrs) -> np.ndarray:
    """Analytic (2n, 6) Jacobian of pixel residuals, columns [dtheta, dt]."""
    pts, pix = _corr_arrays(corrs)
    jac, _ = _jacobian_residual(rotation.to_rotation_matrix(),
                                translation.to_array(), pts, pix, k)
    if jac is None:
        raise PointBehindCamera("transformed point has nonpositive depth")
    return jac


def refine_pnp(corrs, k: CameraIntrinsics, initial: PnPEstimate,
               cfg: ServoConfig) -> PnPEstimate:
    """Gauss-Newton on the 6-parameter pose over the initial inlier set.

    Iterates until the step norm drops below tolerance or the iteration cap;
    a step that increases the error is retried with diagonal damping, and the
    best pose seen is returned, so the final mean squared error never exceeds
    the initial one.
    """
    mask = np.asarray(initial.inlier_mask, dtype=bool)
    if mask.shape[0] == len(corrs) and mask.any():
        subset = [c for c, m in zip(corrs, mask) if m]
    else:
        subset = list(corrs)
        mask = np.ones(len(corrs), dtype=bool)
    pts, pix = _corr_arrays(subset)

    def mean_sq(R, t):
        uv, valid = _project_points(R, t, pts, k)
        if not np.all(valid):
            return math.inf
        return float(np.mean(np.sum((uv - pix) ** 2, axis=1)))

    R = initial.rotation.to_rotation_matrix()
    t = initial.translation.to_array()
    best_err = mean_sq(R, t)
    best_R, best_t = R, t
    for _ in range(cfg.refine_max_iterations):
        jac, residual = _jacobian_residual(R, t, pts, pix, k)
        if jac is None:
            break
        h = jac.T @ jac
        g = jac.T @ residual
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            try:
                step = np.linalg.solve(h + 1e-6 * np.trace(h) / 6.0 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                raise SingularNormalEquations(
                    "normal equations singular even after damping") from None
        if not np.all(np.isfinite(step)):
            raise SingularNormalEquations("non-finite Gauss-Newton step")
        r_new = _rotation_exp(step[:3]) @ R
        t_new = t + step[3:]
        err_new = mean_sq(r_new, t_new)
        if err_new > best_err:
            damped = np.linalg.solve(h + np.trace(h) / 6.0 * np.eye(6), -g)
            r_d = _rotation_exp(damped[:3]) @ R
            t_d = t + damped[3:]
            err_d = mean_sq(r_d, t_d)
            if err_d >= best_err:
                break
            r_new, t_new, err_new, step = r_d, t_d, err_d, damped
        R, t = r_new, t_new
        if err_new < best_err:
            best_err, best_R, best_t = err_new, R, t
        if float(np.linalg.norm(step)) < cfg.refine_tolerance:
            break
    return PnPEstimate(UnitQuaternion.from_rotation_matrix(best_R),
                       Vec3.from_array(best_t), mask, best_err)


def extract_pose_errors(est: PnPEstimate, extrinsic: RigidTransform) -> PoseError:
    """Planar pose error in the base frame.

    The PnP estimate maps current-camera points to the goal camera frame;
    conjugating its inverse by the camera-to-base extrinsic yields the goal
    pose in the current base frame, whose planar translation and yaw are the
    per-axis errors.
    """
    t_pnp = RigidTransform(est.rotation, est.translation)
    t_err = compose(compose(extrinsic, t_pnp.inverse()), extrinsic.inverse())
    return PoseError(t_err.translation.x, t_err.translation.y,
                     wrap_angle(yaw_of(t_err.rotation)))


def pid_step(state: PidState, e: float, dt: float, gains: PidGains) -> float:
    """One PID update: trapezoidal clamped integral, backward-difference
    derivative on the error signal, clamped output. Mutates the state."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.prev_error is None:
        state.integral += dt * e
        derivative = 0.0
    else:
        state.integral += 0.5 * dt * (e + state.prev_error)
        derivative = (e - state.prev_error) / dt
    state.integral = float(np.clip(state.integral, -gains.integral_clamp,
                                   gains.integral_clamp))
    state.prev_error = e
    v = gains.kp * e + gains.ki * state.integral + gains.kd * derivative
    return float(np.clip(v, -gains.output_clamp, gains.output_clamp))


AXES = ("x", "y", "yaw")


def sequential_axis(err: PoseError, cfg: ServoConfig) -> str:
    """First axis in (x, y, yaw) whose error exceeds its threshold; 'done'
    when all are within thresholds."""
    if abs(err.e_x) > cfg.eps_x:
        return "x"
    if abs(err.e_y) > cfg.eps_y:
        return "y"
    if abs(err.e_yaw) > cfg.eps_yaw:
        return "yaw"
    return "done"


@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    n_matches: int
    n_inliers: int
    reproj_error_px: float  # RMS pixels over inliers
    e_x: float
    e_y: float
    e_yaw: float
    active_axis: str
    v_x: float
    v_y: float
    v_yaw: float


@dataclass(frozen=True)
class ServoOutcome:
    converged: bool
    steps: int
    history: tuple[CycleRecord, ...]
    reason: str


def _termination_ratio(err: PoseError, cfg: ServoConfig) -> float:
    return max(abs(err.e_x) / cfg.eps_x,
               abs(err.e_y) / cfg.eps_y,
               abs(err.e_yaw) / cfg.eps_yaw)


def servo_loop(world, goal, cfg: ServoConfig) -> ServoOutcome:
    """Closed-loop adjustment: re-estimate pose every cycle, actuate the
    selected axis, stop when all normalized errors are at most 1.

    The world must provide observe(goal) -> list of Correspondence plus an
    `intrinsics` attribute, and accept command(v_x, v_y, v_yaw, dt). PID
    memory is reset whenever the active axis changes.
    """
    states = {axis: PidState() for axis in AXES}
    gains = {"x": cfg.gains_x, "y": cfg.gains_y, "yaw": cfg.gains_yaw}
    history: list[CycleRecord] = []
    prev_axis: str | None = None
    matcher_failures = 0
    for cycle in range(cfg.max_steps + 1):
        corrs = world.observe(goal)
        if len(corrs) < max(4, cfg.min_correspondences):
            matcher_failures += 1
            if matcher_failures >= cfg.matcher_failure_cycles:
                raise MatcherFailure(
                    f"{matcher_failures} consecutive cycles below "
                    f"{cfg.min_correspondences} correspondences")
            if cycle >= cfg.max_steps:
                break
            world.command(0.0, 0.0, 0.0, cfg.control_dt)
            continue
        matcher_failures = 0
        est = solve_pnp_ransac(corrs, world.intrinsics, cfg,
                               seed=cfg.ransac_seed + cycle)
        err = extract_pose_errors(est, cfg.extrinsic)
        rms = math.sqrt(est.mean_reprojection_error)
        if _termination_ratio(err, cfg) <= 1.0:
            history.append(CycleRecord(cycle, len(corrs), est.n_inliers, rms,
                                       err.e_x, err.e_y, err.e_yaw, "done",
                                       0.0, 0.0, 0.0))
            return ServoOutcome(True, cycle, tuple(history), "converged")
        if cycle >= cfg.max_steps:
            break
        axis = sequential_axis(err, cfg)
        if axis != prev_axis:
            states = {a: PidState() for a in AXES}
            prev_axis = axis
        errors = {"x": err.e_x, "y": err.e_y, "yaw": err.e_yaw}
        if cfg.simultaneous_axes:
            v = {a: pid_step(states[a], errors[a], cfg.control_dt, gains[a])
                 for a in AXES}
        else:
            v = {a: 0.0 for a in AXES}
            v[axis] = pid_step(states[axis], errors[axis], cfg.control_dt,
                               gains[axis])
        history.append(CycleRecord(cycle, len(corrs), est.n_inliers, rms,
                                   err.e_x, err.e_y, err.e_yaw, axis,
                                   v["x"], v["y"], v["yaw"]))
        world.command(v["x"], v["y"], v["yaw"], cfg.control_dt)
    return ServoOutcome(False, cfg.max_steps, tuple(history),
                        "step budget exhausted")
