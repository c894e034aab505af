"""Expected return, safety probabilities and the combined training objective.

The objective is J = R + xi * Qhat over a moment-matched trajectory of
horizon T, where R sums closed-form expected exponential rewards and Qhat is
one of four surrogates of the episode safety probability Q = prod_t q_t.
Gradients dJ/dtheta are accumulated forward through the rollout by carrying
d(mean_t)/dtheta and d(cov_t)/dtheta through every step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
from scipy.stats import norm

from ._mm_engine import predict_moments
from .errors import PropagationError
from .gp import TrainedGP
from .moments import GaussianBelief, action_cov_invertible, clamp_psd, model_arrays
from .policies import Policy, flatten_policy, pushforward_with_derivs

LOG_Q_FLOOR = 1e-300


@dataclass(frozen=True)
class RewardConfig:
    """Exponential reward exp(-|x_J - target|^2 / width) on state dims J."""

    target: np.ndarray  # (len(dims),)
    width: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, float)))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.dims:
            raise ValueError("reward needs at least one state dimension")
        if self.width <= 0:
            raise ValueError("reward width must be positive")
        if self.target.size != len(self.dims):
            raise ValueError("target must list one value per reward dimension")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box over a subset of state dimensions."""

    dims: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, float)))
        if not self.dims:
            raise ValueError("box needs at least one constrained dimension")
        if self.lower.size != len(self.dims) or self.upper.size != len(self.dims):
            raise ValueError("bounds must list one value per constrained dimension")
        if np.any(self.lower >= self.upper):
            raise ValueError("box intervals need lower < upper")

    def intersect(self, other: "Box") -> "Box | None":
        """Intersection box, or None when empty."""
        dims = sorted(set(self.dims) | set(other.dims))
        lo, hi = [], []
        mine = dict(zip(self.dims, zip(self.lower, self.upper)))
        theirs = dict(zip(other.dims, zip(other.lower, other.upper)))
        for d in dims:
            l1, u1 = mine.get(d, (-np.inf, np.inf))
            l2, u2 = theirs.get(d, (-np.inf, np.inf))
            l, u = max(l1, l2), min(u1, u2)
            if l >= u:
                return None
            lo.append(l)
            hi.append(u)
        return Box(dims=tuple(dims), lower=np.array(lo), upper=np.array(hi))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def half_widths(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x: np.ndarray) -> bool:
        sub = np.asarray(x, float)[list(self.dims)]
        return bool(np.all(sub >= self.lower) and np.all(sub <= self.upper))


@dataclass(frozen=True)
class SafeSetSpec:
    """Safe set = complement of the union of unsafe boxes."""

    unsafe_boxes: tuple

    def __post_init__(self):
        object.__setattr__(self, "unsafe_boxes", tuple(self.unsafe_boxes))

    def violates(self, x: np.ndarray) -> bool:
        return any(b.contains(x) for b in self.unsafe_boxes)


class SurrogateKind(enum.Enum):
    PROB = "Prob"
    EXP = "Exp"
    LOG = "Log"
    PROB_ADD = "ProbAdd"

    @classmethod
    def parse(cls, name: str) -> "SurrogateKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise ValueError(f"unknown surrogate {name!r}; expected one of "
                         f"{[k.value for k in cls]}")


@dataclass(frozen=True)
class ExpPenalty:
    """One smooth penalty bump E[exp(-|x_J - center|^2 / width)] with a weight."""

    center: np.ndarray
    width: float
    weight: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, float)))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.width <= 0 or self.weight < 0:
            raise ValueError("penalty width must be positive and weight non-negative")


@dataclass(frozen=True)
class ObjectiveConfig:
    xi: float
    surrogate: SurrogateKind
    horizon: int
    reward: RewardConfig
    safe_set: SafeSetSpec
    exp_penalty: tuple = field(default=())

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if self.surrogate is SurrogateKind.EXP and not self.exp_penalty:
            object.__setattr__(
                self,
                "exp_penalty",
                tuple(default_exp_penalty(b) for b in self.safe_set.unsafe_boxes),
            )

    def with_xi(self, xi: float) -> "ObjectiveConfig":
        return ObjectiveConfig(
            xi=xi,
            surrogate=self.surrogate,
            horizon=self.horizon,
            reward=self.reward,
            safe_set=self.safe_set,
            exp_penalty=self.exp_penalty,
        )


def default_exp_penalty(box: Box) -> ExpPenalty:
    """Penalty bump matched to an unsafe box: centered on it, width = mean
    half-width squared, unit weight (the overall scale lives in xi)."""
    hw = float(np.mean(box.half_widths()))
    return ExpPenalty(center=box.center(), width=hw**2, weight=1.0, dims=box.dims)


# ---------------------------------------------------------------------------
# Gaussian integrals of exponential bumps (rewards and Exp penalties).


def _exp_integral(
    mu: np.ndarray,
    Sigma: np.ndarray,
    dims: tuple,
    target: np.ndarray,
    width: float,
    want_grad: bool = False,
):
    """E[exp(-|x_J - target|^2 / width)] under N(mu, Sigma), restricted to J.

    Returns (value, dval/dmu, dval/dSigma) with gradients on the full state
    dimension (zeros outside J) when want_grad.
    """
    J = list(dims)
    k = len(J)
    muJ = mu[J]
    SJ = Sigma[np.ix_(J, J)]
    d = muJ - target
    M = SJ + 0.5 * width * np.eye(k)
    Minv_d = np.linalg.solve(M, d)
    # |I + 2 S / width| = |M| / (width/2)^k
    sign, logdetM = np.linalg.slogdet(M)
    if sign <= 0:
        raise PropagationError("reward integral hit a non-PSD covariance")
    logval = -0.5 * (logdetM - k * np.log(0.5 * width)) - 0.5 * float(d @ Minv_d)
    val = float(np.exp(logval))
    if not want_grad:
        return val, None, None
    n = mu.size
    dmu = np.zeros(n)
    dS = np.zeros((n, n))
    Minv = np.linalg.inv(M)
    dmu_J = -val * Minv_d
    dS_J = val * (-0.5 * Minv + 0.5 * np.outer(Minv_d, Minv_d))
    dmu[J] = dmu_J
    dS[np.ix_(J, J)] = dS_J
    return val, dmu, dS


def expected_exp_reward(belief: GaussianBelief, cfg: RewardConfig) -> float:
    """Closed-form expected exponential reward at one Gaussian state belief."""
    val, _, _ = _exp_integral(belief.mean, belief.cov, cfg.dims, cfg.target, cfg.width)
    return val


# ---------------------------------------------------------------------------
# Safety probabilities.


def _box_prob_marginal(mu, Sigma, box: Box, want_grad: bool = False):
    """P(x in box) as the product of per-dimension marginal probabilities."""
    n = mu.size
    factors = np.empty(len(box.dims))
    dmu = np.zeros(n) if want_grad else None
    dS = np.zeros((n, n)) if want_grad else None
    per_dim_grads = []
    for idx, j in enumerate(box.dims):
        s2 = Sigma[j, j]
        l, u = box.lower[idx], box.upper[idx]
        if s2 <= 0.0:
            factors[idx] = 1.0 if l <= mu[j] <= u else 0.0
            per_dim_grads.append((0.0, 0.0))
            continue
        s = np.sqrt(s2)
        zu = (u - mu[j]) / s
        zl = (l - mu[j]) / s
        factors[idx] = norm.cdf(zu) - norm.cdf(zl)
        if want_grad:
            pu, pl = norm.pdf(zu), norm.pdf(zl)
            dmu_j = (pl - pu) / s
            ds2_j = (pl * zl - pu * zu) / (2.0 * s2)
            per_dim_grads.append((dmu_j, ds2_j))
    p = float(np.prod(factors))
    if not want_grad:
        return p, None, None
    for idx, j in enumerate(box.dims):
        rest = float(np.prod(np.delete(factors, idx)))
        dmu_j, ds2_j = per_dim_grads[idx]
        dmu[j] += rest * dmu_j
        dS[j, j] += rest * ds2_j
    return p, dmu, dS


def _box_prob_exact(mu, Sigma, box: Box) -> float:
    """P(x in box) by adaptive numerical integration of the joint density.

    Supports one or two constrained dimensions; raises ValueError above that.
    """
    if len(box.dims) == 1:
        p, _, _ = _box_prob_marginal(mu, Sigma, box)
        return p
    if len(box.dims) > 2:
        raise ValueError("exact box probabilities support at most 2 constrained dims")
    j1, j2 = box.dims
    m1, m2 = mu[j1], mu[j2]
    s1 = np.sqrt(max(Sigma[j1, j1], 0.0))
    s2 = np.sqrt(max(Sigma[j2, j2], 0.0))
    if s1 == 0.0 or s2 == 0.0:
        p, _, _ = _box_prob_marginal(mu, Sigma, box)
        return p
    rho = float(np.clip(Sigma[j1, j2] / (s1 * s2), -1.0, 1.0))
    l1, u1 = box.lower[0], box.upper[0]
    l2, u2 = box.lower[1], box.upper[1]
    sc = s2 * np.sqrt(max(1.0 - rho**2, 1e-14))

    def integrand(x):
        mc = m2 + rho * s2 / s1 * (x - m1)
        return (
            norm.pdf(x, loc=m1, scale=s1)
            * (norm.cdf((u2 - mc) / sc) - norm.cdf((l2 - mc) / sc))
        )

    val, _ = scipy.integrate.quad(integrand, l1, u1, epsabs=1e-12, epsrel=1e-10, limit=200)
    return float(min(max(val, 0.0), 1.0))


def _unsafe_prob(mu, Sigma, spec: SafeSetSpec, mode: str, want_grad: bool = False):
    """P(x in union of unsafe boxes): inclusion-exclusion for <= 2 boxes,
    union bound above that."""
    boxes = spec.unsafe_boxes
    n = mu.size
    if not boxes:
        return 0.0, (np.zeros(n) if want_grad else None), (
            np.zeros((n, n)) if want_grad else None
        )

    def one(box, sign=1.0):
        if mode == "exact":
            if want_grad:
                raise ValueError("gradients are only available in marginal mode")
            try:
                return sign * _box_prob_exact(mu, Sigma, box), None, None
            except ValueError:
                p, _, _ = _box_prob_marginal(mu, Sigma, box)
                return sign * p, None, None
        p, dmu, dS = _box_prob_marginal(mu, Sigma, box, want_grad)
        if want_grad:
            return sign * p, sign * dmu, sign * dS
        return sign * p, None, None

    terms = []
    if len(boxes) <= 2:
        for b in boxes:
            terms.append(one(b))
        if len(boxes) == 2:
            inter = boxes[0].intersect(boxes[1])
            if inter is not None:
                terms.append(one(inter, sign=-1.0))
        total = sum(t[0] for t in terms)
        clamped = min(max(total, 0.0), 1.0)
        if not want_grad:
            return clamped, None, None
        if total != clamped:
            return clamped, np.zeros(n), np.zeros((n, n))
        return (
            clamped,
            sum(t[1] for t in terms),
            sum(t[2] for t in terms),
        )
    # Union bound: conservative (overestimates risk).
    for b in boxes:
        terms.append(one(b))
    total = sum(t[0] for t in terms)
    if total >= 1.0:
        return 1.0, (np.zeros(n) if want_grad else None), (
            np.zeros((n, n)) if want_grad else None
        )
    if not want_grad:
        return total, None, None
    return total, sum(t[1] for t in terms), sum(t[2] for t in terms)


def step_safety_prob(
    belief: GaussianBelief, spec: SafeSetSpec, mode: str = "marginal"
) -> float:
    """q = P(x in safe set) for one Gaussian belief.

    mode="marginal" treats constrained dimensions independently (the
    differentiable default); mode="exact" integrates the joint density for
    boxes with at most two constrained dimensions.
    """
    if mode not in ("marginal", "exact"):
        raise ValueError("mode must be 'marginal' or 'exact'")
    p, _, _ = _unsafe_prob(belief.mean, belief.cov, spec, mode)
    return float(min(max(1.0 - p, 0.0), 1.0))


def step_safety_prob_grad(belief: GaussianBelief, spec: SafeSetSpec):
    """q with gradients w.r.t. the belief mean and covariance (marginal mode)."""
    p, dmu, dS = _unsafe_prob(belief.mean, belief.cov, spec, "marginal", want_grad=True)
    return float(min(max(1.0 - p, 0.0), 1.0)), -dmu, -dS


def episode_safety_prob(trajectory, spec: SafeSetSpec, mode: str = "marginal") -> float:
    """Q = product of per-step safety probabilities along a trajectory."""
    traj = list(trajectory)
    if not traj:
        raise ValueError("trajectory must be non-empty")
    q = 1.0
    for belief in traj:
        q *= step_safety_prob(belief, spec, mode)
    return q


def surrogate_loss(
    trajectory, spec: SafeSetSpec, kind: SurrogateKind, cfg: ObjectiveConfig
) -> float:
    """Optimizer-facing replacement for Q; never used for the safety gate."""
    traj = list(trajectory)
    qs = np.array([step_safety_prob(b, spec) for b in traj])
    if kind is SurrogateKind.PROB:
        return float(np.prod(qs))
    if kind is SurrogateKind.PROB_ADD:
        return float(np.sum(qs))
    if kind is SurrogateKind.LOG:
        return float(np.sum(np.log(np.maximum(qs, LOG_Q_FLOOR))))
    if kind is SurrogateKind.EXP:
        total = 0.0
        for belief in traj:
            for pen in cfg.exp_penalty:
                val, _, _ = _exp_integral(
                    belief.mean, belief.cov, pen.dims, pen.center, pen.width
                )
                total -= pen.weight * val
        return total
    raise ValueError(f"unhandled surrogate {kind}")


# ---------------------------------------------------------------------------
# Rollout of the full objective with forward gradient accumulation.


@dataclass
class RolloutResult:
    J: float
    R: float
    Q: float
    dJ_dtheta: np.ndarray | None
    surrogate_value: float
    trajectory: list
    step_safety: np.ndarray  # (T,)
    step_rewards: np.ndarray  # (T,)


def rollout_objective(
    model: TrainedGP,
    policy: Policy,
    start: GaussianBelief,
    cfg: ObjectiveConfig,
    compute_grad: bool = True,
) -> RolloutResult:
    """Roll the belief T steps through policy + model and score it.

    Per step: policy pushforward -> joint (x, u) belief -> moment-matched GP
    prediction -> belief update; accumulates R, the surrogate Qhat and the
    true Q, with dJ/dtheta carried forward when compute_grad.
    """
    n = start.dim
    if model.output_dim != n:
        raise ValueError("model must predict one delta per state dimension")
    if policy.n_state != n:
        raise ValueError("policy input dim does not match the state")
    m = policy.n_action
    arr = model_arrays(model)
    p = flatten_policy(policy).layout.size if compute_grad else 0

    mu = start.mean.copy()
    S = start.cov.copy()
    Tmu = np.zeros((n, p)) if compute_grad else None
    TS = np.zeros((n, n, p)) if compute_grad else None

    R = 0.0
    dR = np.zeros(p) if compute_grad else None
    qs = np.empty(cfg.horizon)
    rewards = np.empty(cfg.horizon)
    dqs = [] if compute_grad else None
    pen_total = 0.0
    dpen = np.zeros(p) if compute_grad else None
    trajectory = []

    for t in range(cfg.horizon):
        try:
            pf = pushforward_with_derivs(policy, mu, S)
            C = S @ pf.V  # (n, m) cov[x, u]
            mu_bar = np.concatenate([mu, pf.action_mean])
            S_bar = np.empty((n + m, n + m))
            S_bar[:n, :n] = S
            S_bar[:n, n:] = C
            S_bar[n:, :n] = C.T
            S_bar[n:, n:] = pf.action_cov

            vals, jac, _ = predict_moments(arr, mu_bar, S_bar, want_jac=compute_grad)
            full_cross = S_bar @ vals.V  # (n+m, n) cov[xbar, delta]
            use_eq10 = m > 0 and action_cov_invertible(pf.action_cov)
            if use_eq10:
                Kmat = np.linalg.solve(pf.action_cov, full_cross[n:, :])  # (m, n)
                cross = C @ Kmat
            else:
                cross = full_cross[:n, :]

            if compute_grad:
                # Total theta-derivatives of the policy outputs at this step.
                dmu_u = (
                    pf.dmu_dth
                    + pf.dmu_dmu @ Tmu
                    + np.tensordot(pf.dmu_dS, TS, axes=2)
                )  # (m, p)
                dSu = (
                    pf.dSu_dth
                    + np.einsum("abk,kp->abp", pf.dSu_dmu, Tmu, optimize=True)
                    + np.tensordot(pf.dSu_dS, TS, axes=2)
                )  # (m, m, p)
                dVp = (
                    pf.dV_dth
                    + np.einsum("nmk,kp->nmp", pf.dV_dmu, Tmu, optimize=True)
                    + np.tensordot(pf.dV_dS, TS, axes=2)
                )  # (n, m, p)
                dC = np.einsum("nkp,km->nmp", TS, pf.V, optimize=True) + np.einsum(
                    "nk,kmp->nmp", S, dVp, optimize=True
                )
                dmu_bar = np.vstack([Tmu, dmu_u])  # (n+m, p)
                dS_bar = np.empty((n + m, n + m, p))
                dS_bar[:n, :n] = TS
                dS_bar[:n, n:] = dC
                dS_bar[n:, :n] = dC.transpose(1, 0, 2)
                dS_bar[n:, n:] = dSu

                dDelta = jac.dmean_dmu @ dmu_bar + np.tensordot(
                    jac.dmean_dS, dS_bar, axes=2
                )  # (n, p)
                dScov = np.einsum(
                    "abk,kp->abp", jac.dcov_dmu, dmu_bar, optimize=True
                ) + np.tensordot(jac.dcov_dS, dS_bar, axes=2)  # (n, n, p)
                dVg = np.einsum(
                    "qdk,kp->qdp", jac.dV_dmu, dmu_bar, optimize=True
                ) + np.tensordot(jac.dV_dS, dS_bar, axes=2)  # (n+m, n, p)
                dfull_cross = np.einsum(
                    "qkp,kd->qdp", dS_bar, vals.V, optimize=True
                ) + np.einsum("qk,kdp->qdp", S_bar, dVg, optimize=True)
                if use_eq10:
                    # K = Su^-1 M  =>  dK = Su^-1 (dM - dSu K)
                    dM = dfull_cross[n:, :, :]  # (m, n, p)
                    rhs = dM - np.einsum("abp,bd->adp", dSu, Kmat, optimize=True)
                    dK = np.einsum(
                        "ab,bdp->adp",
                        np.linalg.inv(pf.action_cov),
                        rhs,
                        optimize=True,
                    )
                    dcross = np.einsum(
                        "nmp,md->ndp", dC, Kmat, optimize=True
                    ) + np.einsum("nm,mdp->ndp", C, dK, optimize=True)
                else:
                    dcross = dfull_cross[:n, :, :]

                Tmu = Tmu + dDelta
                TS = TS + dScov + dcross + dcross.transpose(1, 0, 2)

            mu = mu + vals.mean
            S = clamp_psd(S + vals.cov + cross + cross.T, step=t + 1)
        except PropagationError as exc:
            raise PropagationError(str(exc), step=t + 1) from exc

        belief = GaussianBelief(mu, S)
        trajectory.append(belief)

        r_val, dr_dmu, dr_dS = _exp_integral(
            mu, S, cfg.reward.dims, cfg.reward.target, cfg.reward.width,
            want_grad=compute_grad,
        )
        rewards[t] = r_val
        R += r_val
        if compute_grad:
            dR += dr_dmu @ Tmu + np.tensordot(dr_dS, TS, axes=2)

        if compute_grad:
            q_val, dq_dmu, dq_dS = step_safety_prob_grad(belief, cfg.safe_set)
            dqs.append(dq_dmu @ Tmu + np.tensordot(dq_dS, TS, axes=2))
        else:
            q_val = step_safety_prob(belief, cfg.safe_set)
        qs[t] = q_val

        if cfg.surrogate is SurrogateKind.EXP:
            for pen in cfg.exp_penalty:
                val, dv_dmu, dv_dS = _exp_integral(
                    mu, S, pen.dims, pen.center, pen.width, want_grad=compute_grad
                )
                pen_total -= pen.weight * val
                if compute_grad:
                    dpen -= pen.weight * (
                        dv_dmu @ Tmu + np.tensordot(dv_dS, TS, axes=2)
                    )

    Q = float(np.prod(qs))
    dQhat = None
    if cfg.surrogate is SurrogateKind.PROB:
        Qhat = Q
        if compute_grad:
            # Product rule via prefix/suffix products (robust to q_t = 0).
            prefix = np.concatenate([[1.0], np.cumprod(qs)[:-1]])
            suffix = np.concatenate([np.cumprod(qs[::-1])[:-1][::-1], [1.0]])
            dQhat = sum(
                prefix[t] * suffix[t] * dqs[t] for t in range(cfg.horizon)
            )
    elif cfg.surrogate is SurrogateKind.PROB_ADD:
        Qhat = float(np.sum(qs))
        if compute_grad:
            dQhat = sum(dqs)
    elif cfg.surrogate is SurrogateKind.LOG:
        Qhat = float(np.sum(np.log(np.maximum(qs, LOG_Q_FLOOR))))
        if compute_grad:
            dQhat = sum(dqs[t] / max(qs[t], LOG_Q_FLOOR) for t in range(cfg.horizon))
    elif cfg.surrogate is SurrogateKind.EXP:
        Qhat = pen_total
        if compute_grad:
            dQhat = dpen
    else:
        raise ValueError(f"unhandled surrogate {cfg.surrogate}")

    J = R + cfg.xi * Qhat
    dJ = dR + cfg.xi * dQhat if compute_grad else None
    return RolloutResult(
        J=float(J),
        R=float(R),
        Q=Q,
        dJ_dtheta=dJ,
        surrogate_value=float(Qhat),
        trajectory=trajectory,
        step_safety=qs,
        step_rewards=rewards,
    )


def rollout_objective_and_gradient(
    model: TrainedGP, policy: Policy, start: GaussianBelief, cfg: ObjectiveConfig
) -> tuple[float, float, float, np.ndarray]:
    """(J, R, Q, dJ/dtheta) for the current policy parameters.

    Q is always the true factorized episode safety probability, independent
    of the surrogate driving J.
    """
    res = rollout_objective(model, policy, start, cfg, compute_grad=True)
    return res.J, res.R, res.Q, res.dJ_dtheta
