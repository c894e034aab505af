"""Experiment configs, seeded multi-run campaigns and result files.

A campaign executes `runs` independent training runs with seeds
seed_base..seed_base+runs-1, writes per-run histories and episode CSVs, and
reduces everything into one aggregate table. Runs are independent and may
execute in parallel worker processes.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .envs import (
    LTIEnvConfig,
    aggregate_metrics,
    episode_summary,
    episode_to_csv,
    load_env_config,
    make_collision_env,
)
from .errors import ConfigError
from .loop import SafePenConfig, Strategy, safepen_run
from .objectives import (
    Box,
    ExpPenalty,
    ObjectiveConfig,
    RewardConfig,
    SafeSetSpec,
    SurrogateKind,
)

_TOP_KEYS = {
    "strategy",
    "environment",
    "safepen",
    "objective",
    "policy",
    "runs",
    "seed_base",
    "out_dir",
    "workers",
}
_ENVIRONMENT_KEYS = {"builtin", "variant", "path", "overrides"}
_SAFEPEN_KEYS = {
    "epsilon_safe",
    "xi_init",
    "xi_up_factor",
    "xi_down_factor",
    "upper_limit",
    "maxiter",
    "max_gate_retries",
    "episode_budget",
    "init_rollouts",
    "task_done_tol",
    "fit_restarts",
    "fit_maxiter",
    "refit_maxiter",
}
_OBJECTIVE_KEYS = {"surrogate", "horizon", "reward", "unsafe_boxes", "exp_penalty"}
_REWARD_KEYS = {"target", "width", "dims"}
_BOX_KEYS = {"dims", "lower", "upper"}
_PENALTY_KEYS = {"center", "width", "weight", "dims"}
_POLICY_KEYS = {"kind", "units"}


def _require_keys(raw: dict, allowed: set, where: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: Strategy
    env: LTIEnvConfig
    safepen: SafePenConfig
    objective: ObjectiveConfig
    policy_kind: str
    policy_units: int
    runs: int
    seed_base: int
    out_dir: str
    workers: int
    config_hash: str


def _resolve_environment(raw: dict) -> LTIEnvConfig:
    _require_keys(raw, _ENVIRONMENT_KEYS, "environment")
    if ("builtin" in raw) == ("path" in raw):
        raise ConfigError("environment needs exactly one of 'builtin' or 'path'")
    if "path" in raw:
        env = load_env_config(raw["path"])
    else:
        if raw["builtin"] != "collision":
            raise ConfigError(f"unknown builtin environment {raw['builtin']!r}")
        env = make_collision_env(int(raw.get("variant", 1)))
    overrides = raw.get("overrides", {})
    if overrides:
        from .envs import _ENV_KEYS

        _require_keys(overrides, _ENV_KEYS, "environment.overrides")
        env = env.replace(**overrides)
    return env


def _resolve_objective(raw: dict, xi_init: float) -> ObjectiveConfig:
    _require_keys(raw, _OBJECTIVE_KEYS, "objective")
    missing = {"surrogate", "horizon", "reward", "unsafe_boxes"} - set(raw)
    if missing:
        raise ConfigError(f"missing objective keys: {sorted(missing)}")
    rew = raw["reward"]
    _require_keys(rew, _REWARD_KEYS, "objective.reward")
    reward = RewardConfig(
        target=np.asarray(rew["target"], float),
        width=float(rew["width"]),
        dims=tuple(rew["dims"]),
    )
    boxes = []
    for i, b in enumerate(raw["unsafe_boxes"]):
        _require_keys(b, _BOX_KEYS, f"objective.unsafe_boxes[{i}]")
        boxes.append(
            Box(dims=tuple(b["dims"]), lower=np.asarray(b["lower"], float),
                upper=np.asarray(b["upper"], float))
        )
    penalties = []
    for i, p in enumerate(raw.get("exp_penalty", [])):
        _require_keys(p, _PENALTY_KEYS, f"objective.exp_penalty[{i}]")
        penalties.append(
            ExpPenalty(
                center=np.asarray(p["center"], float),
                width=float(p["width"]),
                weight=float(p["weight"]),
                dims=tuple(p["dims"]),
            )
        )
    try:
        return ObjectiveConfig(
            xi=xi_init,
            surrogate=SurrogateKind.parse(raw["surrogate"]),
            horizon=int(raw["horizon"]),
            reward=reward,
            safe_set=SafeSetSpec(unsafe_boxes=tuple(boxes)),
            exp_penalty=tuple(penalties),
        )
    except ValueError as exc:
        raise ConfigError(f"bad objective config: {exc}") from exc


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping (unknown keys anywhere are an error)."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    _require_keys(raw, _TOP_KEYS, "config")
    missing = {"strategy", "environment", "safepen", "objective"} - set(raw)
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    try:
        strategy = Strategy.parse(raw["strategy"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    env = _resolve_environment(raw["environment"])
    _require_keys(raw["safepen"], _SAFEPEN_KEYS, "safepen")
    try:
        safepen = SafePenConfig(strategy=strategy, **raw["safepen"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad safepen config: {exc}") from exc
    objective = _resolve_objective(raw["objective"], xi_init=safepen.xi_init)
    policy_raw = raw.get("policy", {"kind": "rbf", "units": 20})
    _require_keys(policy_raw, _POLICY_KEYS, "policy")
    kind = policy_raw.get("kind", "rbf")
    if kind not in ("rbf", "linear"):
        raise ConfigError(f"policy kind must be 'rbf' or 'linear', got {kind!r}")
    runs = int(raw.get("runs", 1))
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    config_hash = hashlib.sha256(
        json.dumps(raw, sort_keys=True, default=str).encode()
    ).hexdigest()[:12]
    return ExperimentConfig(
        strategy=strategy,
        env=env,
        safepen=safepen,
        objective=objective,
        policy_kind=kind,
        policy_units=int(policy_raw.get("units", 20)),
        runs=runs,
        seed_base=int(raw.get("seed_base", 0)),
        out_dir=str(raw.get("out_dir", "results")),
        workers=int(raw.get("workers", 0)),
        config_hash=config_hash,
    )


def load_experiment_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return experiment_from_dict(raw)


def _run_one(cfg: ExperimentConfig, run_index: int) -> dict:
    """Execute one seeded run and return its JSON-serializable summary."""
    seed = cfg.seed_base + run_index
    state = safepen_run(
        cfg.env,
        cfg.safepen,
        cfg.objective,
        seed=seed,
        policy_kind=cfg.policy_kind,
        policy_units=cfg.policy_units,
    )
    deployed = state.episodes[cfg.safepen.init_rollouts :]
    rejected_cycles = sum(1 for rec in state.history if not rec["deployed"])
    summary = {
        "run": run_index,
        "seed": seed,
        "stop_reason": state.stop_reason,
        "interactions": state.interactions,
        "rejected_cycles": rejected_cycles,
        "final_xi": float(state.xi),
        "episodes": [episode_summary(ep) for ep in state.episodes],
        "history": state.history,
    }
    if deployed:
        m = aggregate_metrics(deployed)
        summary["collisions"] = m.collision_count
        summary["collision_episodes"] = m.collision_episodes
        summary["avg_cost"] = m.avg_cost
    else:
        summary["collisions"] = 0
        summary["collision_episodes"] = 0
        summary["avg_cost"] = None
    return summary, state


def _write_run_outputs(cfg: ExperimentConfig, out_dir: str, summary: dict, state) -> None:
    run_dir = os.path.join(out_dir, f"run_{summary['run']:03d}")
    os.makedirs(os.path.join(run_dir, "episodes"), exist_ok=True)
    header = {"config_hash": cfg.config_hash, "seed": summary["seed"]}
    with open(os.path.join(run_dir, "history.jsonl"), "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in summary["history"]:
            fh.write(json.dumps(rec) + "\n")
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump({**header, **summary}, fh, indent=2)
    for i, ep in enumerate(state.episodes):
        episode_to_csv(
            ep,
            os.path.join(run_dir, "episodes", f"ep_{i:02d}.csv"),
            header_comment=f"config_hash={cfg.config_hash} seed={summary['seed']} episode={i}",
        )


def run_campaign(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    runs: int | None = None,
    seed_base: int | None = None,
    workers: int | None = None,
) -> dict:
    """Run all seeds, write outputs, and return the aggregate summary."""
    if out_dir is None:
        out_dir = cfg.out_dir
    if runs is None:
        runs = cfg.runs
    if seed_base is not None and seed_base != cfg.seed_base:
        cfg = dataclasses.replace(cfg, seed_base=seed_base)
    if workers is None:
        workers = cfg.workers
    if workers <= 0:
        workers = min(os.cpu_count() or 1, runs)
    os.makedirs(out_dir, exist_ok=True)

    summaries = [None] * runs
    if workers > 1 and runs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_one, cfg, i): i for i in range(runs)}
            for fut in concurrent.futures.as_completed(futures):
                i = futures[fut]
                summary, state = fut.result()
                _write_run_outputs(cfg, out_dir, summary, state)
                summaries[i] = summary
    else:
        for i in range(runs):
            summary, state = _run_one(cfg, i)
            _write_run_outputs(cfg, out_dir, summary, state)
            summaries[i] = summary

    deployed_counts = [s["interactions"] for s in summaries]
    costs = [s["avg_cost"] for s in summaries if s["avg_cost"] is not None]
    aggregate = {
        "config_hash": cfg.config_hash,
        "strategy": cfg.strategy.value,
        "runs": runs,
        "seed_base": cfg.seed_base,
        "collisions": int(sum(s["collisions"] for s in summaries)),
        "collision_episodes": int(sum(s["collision_episodes"] for s in summaries)),
        "interactions": int(sum(deployed_counts)),
        "avg_cost": float(np.mean(costs)) if costs else None,
        "unsolved": int(
            sum(1 for s in summaries if s["stop_reason"] == "gate_retries_exhausted")
        ),
        "per_run": [
            {k: v for k, v in s.items() if k not in ("history", "episodes")}
            for s in summaries
        ],
    }
    with open(os.path.join(out_dir, "aggregate.json"), "w") as fh:
        json.dump(aggregate, fh, indent=2)
    return aggregate
