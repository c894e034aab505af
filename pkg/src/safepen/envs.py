"""Ground-truth LTI simulators, episode execution and metric aggregation.

Two flavors share one config type: continuous-time systems xdot = A x + B u
discretized exactly (matrix exponential) or by forward Euler, and
discrete-time systems x' = A x + B u + F d + const (building-automation
style, matrices supplied by the user).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError
from .objectives import Box, RewardConfig, SafeSetSpec

DISCRETIZATIONS = ("exact", "euler", "discrete")


@dataclass(frozen=True)
class LTIEnvConfig:
    A: np.ndarray  # (n, n)
    B: np.ndarray  # (n, m)
    dt: float
    horizon_steps: int
    action_clamp: np.ndarray  # (m, 2) lo/hi
    init_mean: np.ndarray  # (n,)
    init_cov: np.ndarray  # (n, n)
    discretization: str = "exact"
    process_noise_cov: np.ndarray | None = None
    const_term: np.ndarray | None = None  # added every step (discrete mode)
    disturbance_matrix: np.ndarray | None = None  # F, (n, k)
    disturbance: np.ndarray | None = None  # d, (k,)

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, float)))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, float)))
        object.__setattr__(self, "action_clamp", np.atleast_2d(np.asarray(self.action_clamp, float)))
        object.__setattr__(self, "init_mean", np.atleast_1d(np.asarray(self.init_mean, float)))
        object.__setattr__(self, "init_cov", np.atleast_2d(np.asarray(self.init_cov, float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ConfigError("A must be square")
        if self.B.shape[0] != n:
            raise ConfigError("B must have one row per state dimension")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.horizon_steps < 1:
            raise ConfigError("horizon_steps must be >= 1")
        if self.discretization not in DISCRETIZATIONS:
            raise ConfigError(f"discretization must be one of {DISCRETIZATIONS}")
        if self.action_clamp.shape != (self.B.shape[1], 2):
            raise ConfigError("action_clamp must be (m, 2)")
        if np.any(self.action_clamp[:, 0] >= self.action_clamp[:, 1]):
            raise ConfigError("action_clamp needs lo < hi")
        if self.init_mean.size != n or self.init_cov.shape != (n, n):
            raise ConfigError("init_mean/init_cov must match the state dimension")
        for name in ("process_noise_cov", "const_term", "disturbance_matrix", "disturbance"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, float))

    @property
    def n_state(self) -> int:
        return self.A.shape[0]

    @property
    def n_action(self) -> int:
        return self.B.shape[1]

    def replace(self, **kwargs) -> "LTIEnvConfig":
        fields = {
            "A": self.A,
            "B": self.B,
            "dt": self.dt,
            "horizon_steps": self.horizon_steps,
            "action_clamp": self.action_clamp,
            "init_mean": self.init_mean,
            "init_cov": self.init_cov,
            "discretization": self.discretization,
            "process_noise_cov": self.process_noise_cov,
            "const_term": self.const_term,
            "disturbance_matrix": self.disturbance_matrix,
            "disturbance": self.disturbance,
        }
        fields.update(kwargs)
        return LTIEnvConfig(**fields)


# Collision-avoidance scenario: two cars approach a junction at the origin;
# the controlled car accelerates or brakes. State (pos1, vel1, pos2, vel2).
COLLISION_FRICTION = 1.0
COLLISION_MASS = 1000.0
COLLISION_INIT_MEANS = {
    1: 10.0 * np.array([-5.0, 1.0, -5.0, 1.0]),
    2: 10.0 * np.array([-5.0, 1.0, -6.0, 1.0]),
    3: 10.0 * np.array([-5.0, 1.0, -7.0, 1.0]),
    4: 10.0 * np.array([-6.0, 1.0, -5.0, 1.0]),
    5: 10.0 * np.array([-6.0, 1.0, -7.0, 1.0]),
    6: 10.0 * np.array([-7.0, 1.0, -7.0, 1.0]),
}
COLLISION_HALF_WIDTH = 10.0


def make_collision_env(variant: int) -> LTIEnvConfig:
    """Two-car junction scenario for one of the six initial-state variants."""
    if variant not in COLLISION_INIT_MEANS:
        raise ValueError(f"variant must be 1..6, got {variant}")
    A = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, -COLLISION_FRICTION / COLLISION_MASS, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0],
        ]
    )
    B = np.array([[0.0], [1.0], [0.0], [0.0]])
    return LTIEnvConfig(
        A=A,
        B=B,
        dt=0.5,
        horizon_steps=50,
        action_clamp=np.array([[-2000.0, 2000.0]]),
        init_mean=COLLISION_INIT_MEANS[variant],
        init_cov=np.diag([1.0, 0.01, 1.0, 0.01]),
        discretization="exact",
    )


def collision_safe_set(half_width: float = COLLISION_HALF_WIDTH) -> SafeSetSpec:
    """Unsafe iff both cars are inside the junction strip simultaneously."""
    return SafeSetSpec(
        unsafe_boxes=(
            Box(
                dims=(0, 2),
                lower=np.array([-half_width, -half_width]),
                upper=np.array([half_width, half_width]),
            ),
        )
    )


def collision_reward(
    target_past_junction: float = 10.0, width: float = 25.0
) -> RewardConfig:
    """Exponential reward on the controlled car's position, centered past the
    junction exit."""
    return RewardConfig(
        target=np.array([COLLISION_HALF_WIDTH + target_past_junction]),
        width=width,
        dims=(0,),
    )


def discretize(cfg: LTIEnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """(Ad, Bd) of the one-step update for continuous-time configs."""
    n, m = cfg.n_state, cfg.n_action
    if cfg.discretization == "euler":
        return np.eye(n) + cfg.dt * cfg.A, cfg.dt * cfg.B
    if cfg.discretization == "exact":
        aug = np.zeros((n + m, n + m))
        aug[:n, :n] = cfg.A
        aug[:n, n:] = cfg.B
        M = scipy.linalg.expm(aug * cfg.dt)
        return M[:n, :n], M[:n, n:]
    raise ValueError("discrete-time configs use A and B directly")


def clamp_action(cfg: LTIEnvConfig, u: np.ndarray) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, float))
    return np.clip(u, cfg.action_clamp[:, 0], cfg.action_clamp[:, 1])


def lti_step(
    cfg: LTIEnvConfig,
    x: np.ndarray,
    u: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One environment step; the action is clamped before integration."""
    x = np.asarray(x, dtype=float)
    u = clamp_action(cfg, u)
    if cfg.discretization == "discrete":
        x_next = cfg.A @ x + cfg.B @ u
        if cfg.disturbance_matrix is not None and cfg.disturbance is not None:
            x_next = x_next + cfg.disturbance_matrix @ cfg.disturbance
        if cfg.const_term is not None:
            x_next = x_next + cfg.const_term
    else:
        Ad, Bd = discretize(cfg)
        x_next = Ad @ x + Bd @ u
    if cfg.process_noise_cov is not None and rng is not None:
        if np.any(cfg.process_noise_cov):
            x_next = x_next + rng.multivariate_normal(
                np.zeros(cfg.n_state), cfg.process_noise_cov
            )
    return x_next


class RandomPolicy:
    """Uniform random actions within the clamp range (bootstrap rollouts)."""

    def __init__(self, action_clamp: np.ndarray, seed: int):
        self.action_clamp = np.atleast_2d(np.asarray(action_clamp, float))
        self._rng = np.random.default_rng(seed)

    @property
    def n_action(self) -> int:
        return self.action_clamp.shape[0]

    def act(self, x: np.ndarray) -> np.ndarray:
        return self._rng.uniform(self.action_clamp[:, 0], self.action_clamp[:, 1])


@dataclass(frozen=True)
class EpisodeRecord:
    """One rollout on the simulator.

    states[t] is the state reached after t steps (states[0] is the sampled
    start); actions[t], rewards[t] and violations[t] describe step t+1.
    """

    states: np.ndarray  # (H+1, n)
    actions: np.ndarray  # (H, m)
    rewards: np.ndarray  # (H,)
    violations: np.ndarray  # (H,) bool
    seed: int
    aborted: bool = False

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    def transitions(self) -> tuple[np.ndarray, np.ndarray]:
        """(inputs, targets) rows: (x_t, u_t) -> x_{t+1} - x_t."""
        inputs = np.hstack([self.states[:-1], self.actions])
        targets = self.states[1:] - self.states[:-1]
        return inputs, targets


def point_reward(x: np.ndarray, reward: RewardConfig) -> float:
    d = np.asarray(x, float)[list(reward.dims)] - reward.target
    return float(np.exp(-float(d @ d) / reward.width))


def run_episode(
    env: LTIEnvConfig,
    policy,
    spec: SafeSetSpec,
    reward: RewardConfig,
    seed: int,
) -> EpisodeRecord:
    """Sample a start state and roll the deterministic policy for H steps."""
    rng = np.random.default_rng(seed)
    x = rng.multivariate_normal(env.init_mean, env.init_cov)
    H = env.horizon_steps
    states = [x]
    actions, rewards, violations = [], [], []
    aborted = False
    for _ in range(H):
        u = clamp_action(env, policy.act(x))
        x = lti_step(env, x, u, rng)
        actions.append(u)
        if not np.all(np.isfinite(x)):
            aborted = True
            break
        states.append(x)
        rewards.append(point_reward(x, reward))
        violations.append(spec.violates(x))
    return EpisodeRecord(
        states=np.asarray(states),
        actions=np.asarray(actions)[: len(states) - 1],
        rewards=np.asarray(rewards),
        violations=np.asarray(violations, dtype=bool),
        seed=seed,
        aborted=aborted,
    )


@dataclass(frozen=True)
class Metrics:
    collision_count: int
    collision_episodes: int
    avg_cost: float
    interactions: int


def aggregate_metrics(records) -> Metrics:
    """Campaign-level safety/performance counters.

    avg_cost follows the cost convention T - sum(rewards): lower is better
    and only reflects the performance component.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one episode record")
    collision_count = int(sum(int(r.violations.sum()) for r in records))
    collision_episodes = int(sum(bool(r.violations.any()) for r in records))
    costs = [r.n_steps - float(r.rewards.sum()) for r in records]
    return Metrics(
        collision_count=collision_count,
        collision_episodes=collision_episodes,
        avg_cost=float(np.mean(costs)),
        interactions=len(records),
    )


# ---------------------------------------------------------------------------
# Serialization.

_ENV_KEYS = {
    "A",
    "B",
    "dt",
    "horizon_steps",
    "action_clamp",
    "init_mean",
    "init_cov",
    "discretization",
    "process_noise_cov",
    "const_term",
    "disturbance_matrix",
    "disturbance",
}


def env_config_from_dict(raw: dict) -> LTIEnvConfig:
    unknown = set(raw) - _ENV_KEYS
    if unknown:
        raise ConfigError(f"unknown environment config keys: {sorted(unknown)}")
    missing = {"A", "B", "dt", "horizon_steps", "action_clamp", "init_mean", "init_cov"} - set(raw)
    if missing:
        raise ConfigError(f"missing environment config keys: {sorted(missing)}")
    try:
        return LTIEnvConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad environment config: {exc}") from exc


def load_env_config(path) -> LTIEnvConfig:
    """Read an environment description from a JSON file.

    Matrices are nested row-major arrays; scalars are plain JSON values.
    """
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("environment config must be a JSON object")
    return env_config_from_dict(raw)


def episode_to_csv(record: EpisodeRecord, path, header_comment: str | None = None) -> None:
    """Write one episode as CSV rows (step, x.., u.., reward, violation)."""
    n = record.states.shape[1]
    m = record.actions.shape[1]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["step"]
            + [f"x{i + 1}" for i in range(n)]
            + [f"u{i + 1}" for i in range(m)]
            + ["reward", "violation"]
        )
        for t in range(record.n_steps):
            writer.writerow(
                [t + 1]
                + [repr(float(v)) for v in record.states[t + 1]]
                + [repr(float(v)) for v in record.actions[t]]
                + [repr(float(record.rewards[t])), int(record.violations[t])]
            )


def episode_summary(record: EpisodeRecord) -> dict:
    return {
        "seed": int(record.seed),
        "steps": int(record.n_steps),
        "total_reward": float(record.rewards.sum()),
        "cost": float(record.n_steps - record.rewards.sum()),
        "violation_steps": int(record.violations.sum()),
        "violated": bool(record.violations.any()),
        "aborted": bool(record.aborted),
        "start_state": [float(v) for v in record.states[0]],
        "final_state": [float(v) for v in record.states[-1]],
    }
