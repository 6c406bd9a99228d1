"""DAgger distillation with an exponential rollout scheduler, plus the
hybrid sim2real control loop over mirrored kinematic chains.

The shipped expert/student instantiation is deliberately tiny: a scripted
proportional expert and a least-squares linear student on a 2-D point-mass
reaching task, enough to exercise the full training loop without neural
machinery.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .simworld import KinematicChain, chain_step


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RolloutScheduler:
    """Probability of executing the expert action, annealed exponentially."""

    p: float = 1.0
    decay_factor: float = 0.93

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ValueError("p must lie in [0, 1]")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ValueError("decay factor must lie in (0, 1]")


def scheduler_step(s: RolloutScheduler) -> RolloutScheduler:
    return replace(s, p=s.p * s.decay_factor)


class ReplayBuffer:
    """Bounded (student observation, expert action) store, oldest-first eviction."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def add(self, observation: np.ndarray, expert_action: np.ndarray) -> None:
        self._entries.append((np.array(observation, dtype=float),
                              np.array(expert_action, dtype=float)))

    def __len__(self) -> int:
        return len(self._entries)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        obs = np.stack([o for o, _ in self._entries])
        act = np.stack([a for _, a in self._entries])
        return obs, act


class PolicyInterface(ABC):
    """Mapping from observation vector to action vector."""

    @abstractmethod
    def act(self, obs: np.ndarray) -> np.ndarray:
        ...


class TrainablePolicy(PolicyInterface):
    @abstractmethod
    def fit(self, observations: np.ndarray, actions: np.ndarray) -> None:
        ...


def choose_action(a_student: np.ndarray, a_expert: np.ndarray, p: float,
                  seed) -> tuple[np.ndarray, str]:
    """Expert action with probability p, student otherwise; returns the action
    and a provenance flag. `seed` may be an int or a numpy Generator."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if rng.random() < p:
        return np.array(a_expert, dtype=float), "expert"
    return np.array(a_student, dtype=float), "student"


def action_loss(a: np.ndarray, a_star: np.ndarray) -> float:
    """Combined squared-error plus absolute-error action loss."""
    a = np.asarray(a, dtype=float)
    a_star = np.asarray(a_star, dtype=float)
    if a.shape != a_star.shape:
        raise DimensionMismatch(f"action shapes differ: {a.shape} vs {a_star.shape}")
    diff = a - a_star
    return float(np.sum(diff ** 2) + np.sum(np.abs(diff)))


def inject_proprio_noise(obs: np.ndarray, proprio_indices, noise_range: float,
                         seed) -> np.ndarray:
    """Add uniform noise in [-range, range] at the proprioception indices only."""
    if noise_range < 0:
        raise ValueError("noise range must be nonnegative")
    out = np.array(obs, dtype=float)
    if noise_range == 0.0 or len(proprio_indices) == 0:
        return out
    rng = np.random.default_rng(seed)
    idx = np.asarray(proprio_indices, dtype=int)
    out[idx] += rng.uniform(-noise_range, noise_range, size=len(idx))
    return out


@dataclass
class ToyTask:
    """2-D point-mass reaching: observation (position, goal), action = bounded
    displacement per step."""

    action_bound: float = 1.0
    arena: float = 1.5
    horizon: int = 40
    proprio_indices: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        self.position = np.zeros(2)
        self.goal = np.zeros(2)
        self._step = 0

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.position = rng.uniform(-1.0, 1.0, size=2)
        self.goal = rng.uniform(-1.0, 1.0, size=2)
        self._step = 0
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.goal])

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        a = np.clip(np.asarray(action, dtype=float),
                    -self.action_bound, self.action_bound)
        self.position = np.clip(self.position + a, -self.arena, self.arena)
        self._step += 1
        reward = -float(np.linalg.norm(self.position - self.goal))
        return self.observation(), reward, self._step >= self.horizon


class ProportionalExpert(PolicyInterface):
    """Scripted expert: bounded proportional step toward the goal. With the
    default gain it never saturates inside the arena, so it is exactly linear
    in the observation."""

    def __init__(self, gain: float = 0.35, bound: float = 1.0):
        self.gain = gain
        self.bound = bound

    def act(self, obs: np.ndarray) -> np.ndarray:
        pos, goal = obs[:2], obs[2:4]
        return np.clip(self.gain * (goal - pos), -self.bound, self.bound)


class LinearPolicy(TrainablePolicy):
    """Affine policy fitted by least squares over the replay buffer."""

    def __init__(self, obs_dim: int, act_dim: int):
        self.weights = np.zeros((obs_dim + 1, act_dim))

    def act(self, obs: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(obs, dtype=float), [1.0]])
        return x @ self.weights

    def fit(self, observations: np.ndarray, actions: np.ndarray) -> None:
        x = np.hstack([observations, np.ones((len(observations), 1))])
        self.weights, *_ = np.linalg.lstsq(x, actions, rcond=None)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    p: float
    buffer_size: int
    probe_loss: float   # evaluated before this epoch's update
    rollout_return: float


@dataclass(frozen=True)
class DaggerResult:
    metrics: tuple[EpochMetrics, ...]
    final_p: float


def make_probe_set(env: ToyTask, expert: PolicyInterface, n: int,
                   seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed held-out (clean observation, expert action) pairs for evaluation."""
    rng = np.random.default_rng(seed)
    obs = []
    for _ in range(n):
        env.reset(rng)
        obs.append(env.observation())
    obs = np.stack(obs)
    act = np.stack([expert.act(o) for o in obs])
    return obs, act


def probe_loss(student: PolicyInterface, probe_obs: np.ndarray,
               probe_act: np.ndarray) -> float:
    losses = [action_loss(student.act(o), a) for o, a in zip(probe_obs, probe_act)]
    return float(np.mean(losses))


def dagger_train(env: ToyTask, expert: PolicyInterface, student: TrainablePolicy,
                 epochs: int, rollout_len: int, scheduler: RolloutScheduler,
                 buffer: ReplayBuffer, seed: int, *,
                 proprio_noise_range: float = 0.01,
                 probe_size: int = 64,
                 decay_per_epoch: bool = False) -> DaggerResult:
    """Interactive distillation: roll out under the scheduler's expert/student
    mixture, aggregate (noisy student observation, clean expert action) pairs,
    refit the student each epoch.

    The probe loss recorded for an epoch is evaluated before that epoch's
    update, so the first row measures the untrained student. The scheduler
    decays per environment step by default (per epoch when decay_per_epoch).
    """
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    rng = np.random.default_rng(seed)
    probe_obs, probe_act = make_probe_set(env, expert, probe_size, seed + 1)
    metrics = []
    obs = env.reset(rng)
    for epoch in range(epochs):
        loss_before = probe_loss(student, probe_obs, probe_act)
        rollout_return = 0.0
        for _ in range(rollout_len):
            o_student = inject_proprio_noise(obs, env.proprio_indices,
                                             proprio_noise_range, rng)
            a_student = student.act(o_student)
            a_expert = expert.act(obs)
            action, _ = choose_action(a_student, a_expert, scheduler.p, rng)
            buffer.add(o_student, a_expert)
            obs, reward, done = env.step(action)
            rollout_return += reward
            if not decay_per_epoch:
                scheduler = scheduler_step(scheduler)
            if done:
                obs = env.reset(rng)
        if decay_per_epoch:
            scheduler = scheduler_step(scheduler)
        data_obs, data_act = buffer.arrays()
        student.fit(data_obs, data_act)
        metrics.append(EpochMetrics(epoch, scheduler.p, len(buffer),
                                    loss_before, rollout_return))
    return DaggerResult(tuple(metrics), scheduler.p)


@dataclass(frozen=True)
class HybridTrace:
    """Per-step joint traces: `sim_q[t]` is the joint position the policy
    pipeline commands the real robot to (the in-loop simulated chain for
    hybrid control, the raw policy target for the naive baseline); `real_q[t]`
    is the position the real chain actually reached. deviation[t] is their
    norm at the same step."""

    sim_q: np.ndarray    # (steps + 1, n_joints)
    real_q: np.ndarray
    deviation: np.ndarray  # (steps + 1,)

    @property
    def terminal_deviation(self) -> float:
        return float(self.deviation[-1])


def _traces(sim_rows, real_rows) -> HybridTrace:
    sim_q = np.stack(sim_rows)
    real_q = np.stack(real_rows)
    dev = np.linalg.norm(sim_q - real_q, axis=1)
    return HybridTrace(sim_q, real_q, dev)


def hybrid_control_loop(policy: PolicyInterface, sim_chain: KinematicChain,
                        real_chain: KinematicChain, steps: int,
                        dt: float) -> HybridTrace:
    """Hybrid execution: infer the action from the real chain's observation,
    step the simulated chain with it, then command the real chain to the
    simulated chain's reached joint positions."""
    if sim_chain.q.shape != real_chain.q.shape:
        raise DimensionMismatch("chains must share the joint dimension")
    sim_rows, real_rows = [sim_chain.q.copy()], [real_chain.q.copy()]
    for _ in range(steps):
        action = policy.act(real_chain.q)
        sim_chain = chain_step(sim_chain, action, dt)
        real_chain = chain_step(real_chain, sim_chain.q, dt)
        sim_rows.append(sim_chain.q.copy())
        real_rows.append(real_chain.q.copy())
    return _traces(sim_rows, real_rows)


def naive_control_loop(policy: PolicyInterface, real_chain: KinematicChain,
                       steps: int, dt: float) -> HybridTrace:
    """Baseline: the raw policy action is sent directly to the real chain.
    The `sim_q` trace holds the sent targets, so the deviation is the gap
    between where the policy believes the joints are and where they are."""
    sim_rows, real_rows = [real_chain.q.copy()], [real_chain.q.copy()]
    for _ in range(steps):
        action = np.asarray(policy.act(real_chain.q), dtype=float)
        real_chain = chain_step(real_chain, action, dt)
        sim_rows.append(action.copy())
        real_rows.append(real_chain.q.copy())
    return _traces(sim_rows, real_rows)


class WaypointPolicy(PolicyInterface):
    """Quasi-static waypoint follower: emits a seeded waypoint as the joint
    target, advancing every `hold` calls."""

    def __init__(self, n_joints: int, n_waypoints: int, hold: int, seed: int,
                 amplitude: float = 1.0):
        rng = np.random.default_rng(seed)
        self.waypoints = rng.uniform(-amplitude, amplitude,
                                     size=(n_waypoints, n_joints))
        self.hold = hold
        self._calls = 0

    def act(self, obs: np.ndarray) -> np.ndarray:
        idx = min(self._calls // self.hold, len(self.waypoints) - 1)
        self._calls += 1
        return self.waypoints[idx].copy()
