"""The outer training loop: optimize, gate, deploy, retrain, adapt xi.

Policies are only ever run on the environment after the pre-deployment check
predicts an episode safety probability above the configured threshold (under
the gating strategies); rejected candidates re-enter optimization with a
larger safety weight instead of touching the system.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .envs import LTIEnvConfig, RandomPolicy, run_episode
from .errors import SafepenError
from .gp import GPDataset, TrainedGP, _input_scales, fit_hyperparams
from .moments import GaussianBelief
from .objectives import ObjectiveConfig, SafeSetSpec, rollout_objective
from .policies import (
    LinearPolicy,
    PolicyParams,
    RBFPolicy,
    build_policy,
    flatten_policy,
)


class Strategy(enum.Enum):
    PILCO = "PILCO"  # xi = 0, no gate
    PILCOPEN = "PILCOPen"  # fixed xi, no gate
    PENCHECK = "PenCheck"  # gate, xi only ever increases
    SAFEPEN = "SafePen"  # gate, xi adapted both ways

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        for s in cls:
            if s.value == name:
                return s
        raise ValueError(
            f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}"
        )

    @property
    def gated(self) -> bool:
        return self in (Strategy.PENCHECK, Strategy.SAFEPEN)


@dataclass(frozen=True)
class SafePenConfig:
    """Knobs of the outer loop (thresholds, xi adaptation, budgets)."""

    epsilon_safe: float = 0.9
    xi_init: float = 10.0
    xi_up_factor: float = 2.0
    xi_down_factor: float = 2.0
    upper_limit: float | None = None  # default: midpoint of (epsilon_safe, 1)
    maxiter: int = 50
    max_gate_retries: int = 20
    episode_budget: int = 15
    init_rollouts: int = 1
    strategy: Strategy = Strategy.SAFEPEN
    task_done_tol: float | None = None
    fit_restarts: int = 3
    fit_maxiter: int = 120
    refit_maxiter: int = 60

    def __post_init__(self):
        if isinstance(self.strategy, str):
            object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.upper_limit is None:
            object.__setattr__(self, "upper_limit", 0.5 * (1.0 + self.epsilon_safe))
        if not (0.0 < self.epsilon_safe < self.upper_limit < 1.0):
            raise ValueError("need 0 < epsilon_safe < upper_limit < 1")
        if self.xi_up_factor <= 1.0 or self.xi_down_factor <= 1.0:
            raise ValueError("xi factors must be > 1")
        if self.xi_init <= 0.0:
            raise ValueError("xi_init must be positive")
        if self.episode_budget < 1 or self.init_rollouts < 1:
            raise ValueError("need at least one episode and one initial rollout")


@dataclass
class TrainingState:
    """Everything the outer loop carries between cycles."""

    dataset: GPDataset
    model: TrainedGP
    policy: PolicyParams
    xi: float
    start: GaussianBelief
    history: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    interactions: int = 0
    stop_reason: str | None = None


def safety_gate(Q: float, xi: float, cfg: SafePenConfig) -> tuple[bool, float]:
    """Deployment decision and next xi.

    Q <= epsilon: reject, raise xi; Q in (epsilon, upper]: deploy, keep xi;
    Q > upper: deploy, lower xi (the policy is safer than it needs to be).
    """
    if not 0.0 <= Q <= 1.0:
        raise ValueError("Q must be a probability")
    if Q <= cfg.epsilon_safe:
        return False, xi * cfg.xi_up_factor
    if Q <= cfg.upper_limit:
        return True, xi
    return True, xi / cfg.xi_down_factor


def improve_policy(
    state: TrainingState,
    cfg: SafePenConfig,
    obj: ObjectiveConfig,
    objective_fn=None,
) -> PolicyParams:
    """Bounded quasi-Newton ascent on J from the current parameters.

    objective_fn may replace the rollout objective for testing; it must map
    theta to (J, dJ/dtheta). The best parameters seen are returned even if
    the optimizer terminates elsewhere.
    """
    layout = state.policy.layout
    theta0 = state.policy.theta

    if objective_fn is None:
        def objective_fn(theta):
            pol = build_policy(PolicyParams(theta, layout))
            res = rollout_objective(state.model, pol, state.start, obj, compute_grad=True)
            return res.J, res.dJ_dtheta

    best = {"theta": theta0.copy(), "J": -np.inf}

    def neg_objective(theta):
        # Line searches may probe parameters whose rollout breaks down;
        # penalize those points instead of aborting the whole ascent.
        try:
            J, dJ = objective_fn(theta)
        except (SafepenError, np.linalg.LinAlgError):
            return 1e12, np.zeros_like(theta)
        if np.isfinite(J) and J > best["J"]:
            best["J"] = J
            best["theta"] = theta.copy()
        if not np.isfinite(J):
            return 1e12, np.zeros_like(theta)
        return -J, -dJ

    try:
        J0, _ = objective_fn(theta0)
    except SafepenError as exc:
        raise SafepenError(
            f"objective failed at the current parameters: {exc} "
            f"(|theta|={np.linalg.norm(theta0):.3g}, N={state.dataset.n_points})"
        ) from exc
    if not np.isfinite(J0):
        raise SafepenError(
            f"objective not finite at the current parameters "
            f"(J={J0}, |theta|={np.linalg.norm(theta0):.3g}, "
            f"N={state.dataset.n_points})"
        )
    scipy.optimize.minimize(
        neg_objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": cfg.maxiter, "maxfun": 8 * cfg.maxiter},
    )
    if best["J"] < J0:
        return PolicyParams(theta0, layout)
    return PolicyParams(best["theta"], layout)


def default_rbf_policy(
    dataset: GPDataset,
    n_state: int,
    n_action: int,
    action_clamp: np.ndarray,
    units: int,
    rng: np.random.Generator,
) -> RBFPolicy:
    """Random RBF controller anchored to visited states.

    Centers are sampled from rows of the bootstrap data (plus jitter) so the
    controller has support where the system actually goes; weights start
    small relative to the action range.
    """
    states = dataset.inputs[:, :n_state]
    idx = rng.integers(0, states.shape[0], size=units)
    spread, _ = _input_scales(states)
    centers = states[idx] + 0.1 * spread * rng.normal(size=(units, n_state))
    scale = 0.1 * np.max(np.abs(action_clamp))
    weights = scale * rng.normal(size=(units, n_action))
    return RBFPolicy(centers=centers, weights=weights, length_scales=spread)


def initial_policy(
    kind: str,
    dataset: GPDataset,
    n_state: int,
    n_action: int,
    action_clamp: np.ndarray,
    units: int,
    rng: np.random.Generator,
):
    if kind == "rbf":
        return default_rbf_policy(dataset, n_state, n_action, action_clamp, units, rng)
    if kind == "linear":
        return LinearPolicy(
            gain=np.zeros((n_action, n_state)), offset=np.zeros(n_action)
        )
    raise ValueError(f"unknown policy kind {kind!r}")


def _dataset_from_episodes(episodes) -> GPDataset:
    ins, outs = zip(*(ep.transitions() for ep in episodes))
    return GPDataset(np.vstack(ins), np.vstack(outs))


def _predicted_task_error(res, obj: ObjectiveConfig) -> float:
    final = res.trajectory[-1].mean
    err = final[list(obj.reward.dims)] - obj.reward.target
    return float(np.mean(np.abs(err)))


def safepen_run(
    env: LTIEnvConfig,
    cfg: SafePenConfig,
    obj: ObjectiveConfig,
    seed: int,
    policy: PolicyParams | None = None,
    spec: SafeSetSpec | None = None,
    policy_kind: str = "rbf",
    policy_units: int = 20,
) -> TrainingState:
    """Run the full training loop on one environment.

    Bootstrap with random-action episodes, then cycle improve -> evaluate ->
    gate -> (deploy + retrain | re-optimize with larger xi) until the episode
    budget, the task-done check or the retry cap stops it. Deterministic for
    a fixed (seed, config) pair.
    """
    if spec is None:
        spec = obj.safe_set
    children = np.random.SeedSequence(seed).spawn(4)
    init_seeds = children[0].spawn(cfg.init_rollouts)
    fit_seed, policy_seed, episode_root = children[1], children[2], children[3]

    episodes = []
    for s in init_seeds:
        ep_seed = int(s.generate_state(1)[0] % (2**31))
        rollout_policy = RandomPolicy(env.action_clamp, seed=ep_seed)
        episodes.append(run_episode(env, rollout_policy, spec, obj.reward, seed=ep_seed))
    dataset = _dataset_from_episodes(episodes)

    fit_seed_int = int(fit_seed.generate_state(1)[0] % (2**31))
    model = fit_hyperparams(
        dataset, restarts=cfg.fit_restarts, seed=fit_seed_int, maxiter=cfg.fit_maxiter
    )

    if policy is None:
        prng = np.random.default_rng(policy_seed.generate_state(2))
        policy = flatten_policy(
            initial_policy(
                policy_kind,
                dataset,
                env.n_state,
                env.n_action,
                env.action_clamp,
                policy_units,
                prng,
            )
        )

    xi0 = 0.0 if cfg.strategy is Strategy.PILCO else cfg.xi_init
    state = TrainingState(
        dataset=dataset,
        model=model,
        policy=policy,
        xi=xi0,
        start=GaussianBelief(env.init_mean, env.init_cov),
        episodes=list(episodes),
    )

    episode_seeds = iter(
        int(s.generate_state(1)[0] % (2**31))
        for s in episode_root.spawn(cfg.episode_budget)
    )
    reject_streak = 0
    cycle = 0
    while state.interactions < cfg.episode_budget:
        cycle += 1
        state.policy = improve_policy(state, cfg, obj.with_xi(state.xi))
        candidate = build_policy(state.policy)
        res = rollout_objective(
            state.model, candidate, state.start, obj.with_xi(state.xi), compute_grad=False
        )
        Q, R = res.Q, res.R

        xi_before = state.xi
        if cfg.strategy.gated:
            deploy, new_xi = safety_gate(Q, state.xi, cfg)
            if cfg.strategy is Strategy.PENCHECK and new_xi < state.xi:
                new_xi = state.xi
        else:
            deploy, new_xi = True, state.xi

        record = {
            "cycle": cycle,
            "Q": float(Q),
            "R": float(R),
            "J": float(res.J),
            "xi_before": float(xi_before),
            "xi_after": float(new_xi),
            "deployed": bool(deploy),
            "collisions": None,
            "interactions": state.interactions,
            "task_done": False,
        }
        state.xi = new_xi

        if deploy:
            reject_streak = 0
            ep_seed = next(episode_seeds)
            episode = run_episode(env, candidate, spec, obj.reward, seed=ep_seed)
            state.episodes.append(episode)
            state.interactions += 1
            record["collisions"] = int(episode.violations.sum())
            record["interactions"] = state.interactions
            new_inputs, new_targets = episode.transitions()
            state.dataset = state.dataset.append(new_inputs, new_targets)
            state.model = fit_hyperparams(
                state.dataset,
                restarts=1,
                seed=fit_seed_int,
                init=list(state.model.hyperparams),
                maxiter=cfg.refit_maxiter,
            )
            if cfg.task_done_tol is not None:
                err = _predicted_task_error(res, obj)
                if err < cfg.task_done_tol:
                    record["task_done"] = True
                    state.history.append(record)
                    state.stop_reason = "task_done"
                    break
        else:
            reject_streak += 1
            if reject_streak >= cfg.max_gate_retries:
                state.history.append(record)
                state.stop_reason = "gate_retries_exhausted"
                break
        state.history.append(record)
    if state.stop_reason is None:
        state.stop_reason = "episode_budget"
    return state
