"""Verification suites: finite-difference gradients and Monte-Carlo moments.

Shared by the CLI (gradcheck / mmcheck commands) and the test suite. The
finite-difference and sampling oracles here deliberately avoid the analytic
code paths they validate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import (
    GPDataset,
    KernelHyperparams,
    build_trained_gp,
    log_marginal_likelihood_and_grad,
    predict_deterministic_batch,
)
from .moments import GaussianBelief
from .objectives import (
    Box,
    ObjectiveConfig,
    RewardConfig,
    SafeSetSpec,
    SurrogateKind,
    rollout_objective,
)
from .policies import (
    LinearPolicy,
    PolicyParams,
    RBFPolicy,
    build_policy,
    flatten_policy,
)

GRAD_TOL = 1e-4
GRAD_COORD_FLOOR = 1e-8
MM_MEAN_SE = 4.0
MM_COV_RTOL = 0.02
MM_COV_FLOOR = 0.01


def finite_difference_gradient(f, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    g = np.empty_like(x0)
    for i in range(x0.size):
        d = np.zeros_like(x0)
        d[i] = eps
        g[i] = (f(x0 + d) - f(x0 - d)) / (2.0 * eps)
    return g


def max_relative_error(
    analytic: np.ndarray, reference: np.ndarray, floor: float = GRAD_COORD_FLOOR
) -> float:
    """Max per-coordinate relative error, ignoring coordinates below floor."""
    analytic = np.asarray(analytic, float).ravel()
    reference = np.asarray(reference, float).ravel()
    mask = np.abs(reference) > floor
    if not mask.any():
        return float(np.max(np.abs(analytic - reference))) if analytic.size else 0.0
    return float(
        np.max(np.abs(analytic[mask] - reference[mask]) / np.abs(reference[mask]))
    )


def toy_dynamics_model(seed: int, n: int = 2, m: int = 1, n_points: int = 25):
    """Small seeded GP dynamics model on smooth synthetic transitions."""
    rng = np.random.default_rng(seed)
    q = n + m
    X = rng.uniform(-2.0, 2.0, size=(n_points, q))
    coeff = rng.normal(scale=0.15, size=(q, n))
    targets = np.tanh(X @ coeff) * 0.5 + 0.02 * rng.normal(size=(n_points, n))
    data = GPDataset(X, targets)
    hyps = [
        KernelHyperparams(
            signal_variance=float(rng.uniform(0.2, 0.8)),
            length_scales=rng.uniform(0.8, 2.5, size=q),
            noise_variance=float(rng.uniform(1e-4, 1e-3)),
        )
        for _ in range(n)
    ]
    return build_trained_gp(data, hyps)


def toy_policy(seed: int, kind: str, n: int = 2, m: int = 1):
    rng = np.random.default_rng(seed)
    if kind == "linear":
        return LinearPolicy(
            gain=rng.normal(scale=0.3, size=(m, n)), offset=rng.normal(scale=0.1, size=m)
        )
    return RBFPolicy(
        centers=rng.uniform(-1.0, 1.0, size=(4, n)),
        weights=rng.normal(scale=0.3, size=(4, m)),
        length_scales=rng.uniform(0.8, 1.5, size=n),
    )


def toy_objective(seed: int, surrogate: SurrogateKind, horizon: int) -> ObjectiveConfig:
    rng = np.random.default_rng(seed)
    reward = RewardConfig(target=np.array([1.0]), width=1.0, dims=(0,))
    spec = SafeSetSpec(
        unsafe_boxes=(
            Box(dims=(0, 1), lower=np.array([-2.5, -2.5]), upper=np.array([-0.4, -0.4])),
        )
    )
    return ObjectiveConfig(
        xi=float(rng.uniform(1.0, 5.0)),
        surrogate=surrogate,
        horizon=horizon,
        reward=reward,
        safe_set=spec,
    )


@dataclass
class CheckEntry:
    block: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.threshold

    def as_dict(self) -> dict:
        return {
            "block": self.block,
            "error": float(self.error),
            "threshold": float(self.threshold),
            "passed": self.passed,
        }


def gradcheck_objective_configs(n_configs: int = 20):
    """The seeded rollout-gradient configurations: both policy families,
    horizons 5 and 10, all four surrogates."""
    kinds = list(SurrogateKind)
    configs = []
    for i in range(n_configs):
        configs.append(
            {
                "seed": 1000 + i,
                "policy": "linear" if i % 2 == 0 else "rbf",
                "horizon": 5 if (i // 2) % 2 == 0 else 10,
                "surrogate": kinds[i % 4],
            }
        )
    return configs


def run_gradcheck(
    n_configs: int = 20, corrupt_scale: float = 0.0, eps: float = 1e-6
) -> list[CheckEntry]:
    """Full finite-difference suite: objective, policy pushforward, GP evidence.

    corrupt_scale deliberately scales the analytic objective gradients (test
    hook for the failure path); leave at 0.0 for real verification.
    """
    entries: list[CheckEntry] = []

    # Rollout objective gradients.
    for cfg in gradcheck_objective_configs(n_configs):
        seed = cfg["seed"]
        model = toy_dynamics_model(seed)
        policy = toy_policy(seed + 1, cfg["policy"])
        obj = toy_objective(seed + 2, cfg["surrogate"], cfg["horizon"])
        rng = np.random.default_rng(seed + 3)
        A = rng.normal(size=(2, 2))
        start = GaussianBelief(rng.normal(scale=0.5, size=2), 0.05 * A @ A.T + 0.02 * np.eye(2))
        params = flatten_policy(policy)
        res = rollout_objective(model, policy, start, obj, compute_grad=True)
        grad = res.dJ_dtheta * (1.0 + corrupt_scale)

        def J_of(theta):
            pol = build_policy(PolicyParams(theta, params.layout))
            return rollout_objective(model, pol, start, obj, compute_grad=False).J

        fd = finite_difference_gradient(J_of, params.theta, eps)
        entries.append(
            CheckEntry(
                block=(
                    f"objective[{cfg['policy']},T={cfg['horizon']},"
                    f"{cfg['surrogate'].value},seed={seed}]"
                ),
                error=max_relative_error(grad, fd),
                threshold=GRAD_TOL,
            )
        )

    # Policy pushforward parameter gradients (both families).
    from .policies import pushforward_with_derivs

    for kind in ("linear", "rbf"):
        rng = np.random.default_rng(77 + (kind == "rbf"))
        policy = toy_policy(int(rng.integers(1 << 30)), kind, n=3, m=2)
        mu = rng.normal(size=3)
        A = rng.normal(size=(3, 3))
        Sigma = 0.3 * A @ A.T
        pf = pushforward_with_derivs(policy, mu, Sigma)
        params = flatten_policy(policy)

        def mean_sum(theta):
            pol = build_policy(PolicyParams(theta, params.layout))
            v = pushforward_with_derivs(pol, mu, Sigma)
            return float(v.action_mean.sum() + v.action_cov.sum())

        fd = finite_difference_gradient(mean_sum, params.theta, eps)
        analytic = pf.dmu_dth.sum(axis=0) + pf.dSu_dth.sum(axis=(0, 1))
        entries.append(
            CheckEntry(
                block=f"pushforward[{kind}]",
                error=max_relative_error(analytic * (1.0 + corrupt_scale), fd),
                threshold=GRAD_TOL,
            )
        )

    # GP evidence gradients on random datasets.
    for seed in (5, 6):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, size=(10, 2))
        y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=10)
        data = GPDataset(X, y[:, None])
        h = KernelHyperparams(
            signal_variance=float(rng.uniform(0.5, 1.5)),
            length_scales=rng.uniform(0.5, 1.5, size=2),
            noise_variance=float(rng.uniform(0.005, 0.02)),
        )
        _, grad = log_marginal_likelihood_and_grad(data, h, 0)

        def lml_of(logv):
            hh = KernelHyperparams.from_log_vector(logv)
            val, _ = log_marginal_likelihood_and_grad(data, hh, 0)
            return val

        fd = finite_difference_gradient(lml_of, h.to_log_vector(), eps)
        entries.append(
            CheckEntry(
                block=f"gp-evidence[seed={seed}]",
                error=max_relative_error(grad * (1.0 + corrupt_scale), fd, floor=1e-10),
                threshold=1e-5,
            )
        )
    return entries


def toy_mm_model(seed: int):
    """Seeded toy GP for moment-matching fidelity checks (1-3 inputs, 1-2 outputs)."""
    rng = np.random.default_rng(seed)
    q = int(rng.integers(1, 4))
    D = int(rng.integers(1, 3))
    N = int(rng.integers(12, 30))
    X = rng.uniform(-2.0, 2.0, size=(N, q))
    coeff = rng.normal(scale=0.6, size=(q, D))
    targets = np.sin(X @ coeff) + 0.05 * rng.normal(size=(N, D))
    data = GPDataset(X, targets)
    hyps = [
        KernelHyperparams(
            signal_variance=float(rng.uniform(0.3, 1.2)),
            length_scales=rng.uniform(0.6, 1.8, size=q),
            noise_variance=float(rng.uniform(1e-3, 5e-3)),
        )
        for _ in range(D)
    ]
    model = build_trained_gp(data, hyps)
    mu = rng.uniform(-1.0, 1.0, size=q)
    A = rng.normal(size=(q, q))
    Sigma = 0.25 * A @ A.T + 0.05 * np.eye(q)
    return model, GaussianBelief(mu, Sigma)


def mc_moments(model, belief: GaussianBelief, n_samples: int, seed: int):
    """Monte-Carlo estimate of the moment-matched quantities.

    Samples inputs, evaluates the deterministic posterior per sample, and
    combines: mean of means; covariance of means plus the averaged latent
    variance on the diagonal; cross covariance of inputs with means. Returns
    the estimates plus the standard error of the mean.
    """
    rng = np.random.default_rng(seed)
    q = belief.dim
    D = model.output_dim
    chunk = 200_000
    remaining = n_samples
    s_mean = np.zeros(D)
    s_outer = np.zeros((D, D))
    s_var = np.zeros(D)
    s_x = np.zeros(q)
    s_x_outer = np.zeros((q, D))
    while remaining > 0:
        k = min(chunk, remaining)
        xs = rng.multivariate_normal(belief.mean, belief.cov, size=k)
        means, variances = predict_deterministic_batch(model, xs)
        s_mean += means.sum(axis=0)
        s_outer += means.T @ means
        s_var += variances.sum(axis=0)
        s_x += xs.sum(axis=0)
        s_x_outer += xs.T @ means
        remaining -= k
    mc_mean = s_mean / n_samples
    mc_cov = s_outer / n_samples - np.outer(mc_mean, mc_mean) + np.diag(s_var / n_samples)
    x_mean = s_x / n_samples
    mc_cross = s_x_outer / n_samples - np.outer(x_mean, mc_mean)
    # Standard error of the mean estimate per output dimension.
    var_of_mean = np.diag(mc_cov)
    se_mean = np.sqrt(np.maximum(var_of_mean, 0.0) / n_samples)
    return mc_mean, mc_cov, mc_cross, se_mean


def run_mmcheck(n_models: int = 5, n_samples: int = 1_000_000) -> list[CheckEntry]:
    """Moment matching vs Monte Carlo on seeded toy models."""
    from .moments import mm_predict

    entries: list[CheckEntry] = []
    for i in range(n_models):
        seed = 3000 + 17 * i
        model, belief = toy_mm_model(seed)
        pred = mm_predict(model, belief)
        mc_mean, mc_cov, mc_cross, se = mc_moments(model, belief, n_samples, seed + 1)

        mean_sigmas = float(np.max(np.abs(pred.delta_mean - mc_mean) / np.maximum(se, 1e-300)))
        entries.append(
            CheckEntry(block=f"mm-mean[seed={seed}]", error=mean_sigmas, threshold=MM_MEAN_SE)
        )
        mask = np.abs(mc_cov) > MM_COV_FLOOR
        if mask.any():
            rel = float(
                np.max(
                    np.abs(pred.delta_cov[mask] - mc_cov[mask]) / np.abs(mc_cov[mask])
                )
            )
        else:
            rel = 0.0
        entries.append(
            CheckEntry(block=f"mm-cov[seed={seed}]", error=rel, threshold=MM_COV_RTOL)
        )
        mask = np.abs(mc_cross) > MM_COV_FLOOR
        if mask.any():
            rel = float(
                np.max(
                    np.abs(pred.input_delta_cross_cov[mask] - mc_cross[mask])
                    / np.abs(mc_cross[mask])
                )
            )
        else:
            rel = 0.0
        entries.append(
            CheckEntry(block=f"mm-cross[seed={seed}]", error=rel, threshold=2 * MM_COV_RTOL)
        )
    return entries
