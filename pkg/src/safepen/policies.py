"""Deterministic controllers with moment-matched Gaussian pushforwards.

Two families: affine state feedback and a normalized RBF network. Both push a
Gaussian state belief to action moments (mean, covariance, state-action
cross covariance) with analytic derivatives w.r.t. the belief and the flat
parameter vector.

The RBF pushforward goes through the deterministic-GP-mean machinery: the
network weights are pre-normalized by the activation total at the state mean,
after which the unnormalized form is moment matched exactly. At zero state
covariance this reproduces the normalized network's action; for uncertain
states it is an approximation (normalization frozen at the mean).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mm_engine import MMArrays, predict_moments
from .moments import GaussianBelief

RBF_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class LinearPolicy:
    """u = gain @ x + offset."""

    gain: np.ndarray  # (m, n)
    offset: np.ndarray  # (m,)

    def __post_init__(self):
        object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, float)))
        object.__setattr__(self, "offset", np.atleast_1d(np.asarray(self.offset, float)))
        if self.gain.shape[0] != self.offset.size:
            raise ValueError("gain rows must match offset length")
        if not (np.all(np.isfinite(self.gain)) and np.all(np.isfinite(self.offset))):
            raise ValueError("policy parameters must be finite")

    @property
    def n_state(self) -> int:
        return self.gain.shape[1]

    @property
    def n_action(self) -> int:
        return self.gain.shape[0]

    def act(self, x: np.ndarray) -> np.ndarray:
        return self.gain @ np.asarray(x, float) + self.offset


@dataclass(frozen=True)
class RBFPolicy:
    """Normalized RBF network controller.

    u(x) = sum_b weights[b] phi_b(x) / (sum_b phi_b(x) + guard), with
    phi_b(x) = exp(-1/2 (x - centers[b])' diag(length_scales^-2) (x - centers[b])).
    Length scales are shared across units.
    """

    centers: np.ndarray  # (B, n)
    weights: np.ndarray  # (B, m)
    length_scales: np.ndarray  # (n,)

    def __post_init__(self):
        object.__setattr__(self, "centers", np.atleast_2d(np.asarray(self.centers, float)))
        object.__setattr__(self, "weights", np.atleast_2d(np.asarray(self.weights, float)))
        object.__setattr__(
            self, "length_scales", np.atleast_1d(np.asarray(self.length_scales, float))
        )
        if self.centers.shape[0] < 1:
            raise ValueError("need at least one RBF unit")
        if self.weights.shape[0] != self.centers.shape[0]:
            raise ValueError("weights and centers must have one row per unit")
        if self.length_scales.size != self.centers.shape[1]:
            raise ValueError("length scales must match the state dimension")
        if np.any(self.length_scales <= 0):
            raise ValueError("length scales must be positive")

    @property
    def n_state(self) -> int:
        return self.centers.shape[1]

    @property
    def n_action(self) -> int:
        return self.weights.shape[1]

    @property
    def n_units(self) -> int:
        return self.centers.shape[0]

    def activations(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, float) - self.centers) / self.length_scales
        return np.exp(-0.5 * np.sum(z**2, axis=1))

    def act(self, x: np.ndarray) -> np.ndarray:
        phi = self.activations(x)
        return self.weights.T @ phi / (phi.sum() + RBF_NORM_GUARD)


Policy = LinearPolicy | RBFPolicy


@dataclass(frozen=True)
class PolicyLayout:
    """Mapping from named policy fields to slices of the flat vector.

    RBF length scales are stored in log space inside theta so unconstrained
    optimizers cannot push them negative.
    """

    kind: str
    n_state: int
    n_action: int
    n_units: int
    slices: dict
    size: int


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    layout: PolicyLayout

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.layout.size,):
            raise ValueError("theta does not match layout size")
        object.__setattr__(self, "theta", theta)


def flatten_policy(policy: Policy) -> PolicyParams:
    if isinstance(policy, LinearPolicy):
        m, n = policy.gain.shape
        layout = PolicyLayout(
            kind="linear",
            n_state=n,
            n_action=m,
            n_units=0,
            slices={"gain": slice(0, m * n), "offset": slice(m * n, m * n + m)},
            size=m * n + m,
        )
        theta = np.concatenate([policy.gain.ravel(), policy.offset])
        return PolicyParams(theta, layout)
    if isinstance(policy, RBFPolicy):
        B, n = policy.centers.shape
        m = policy.n_action
        sl_c = slice(0, B * n)
        sl_w = slice(B * n, B * n + B * m)
        sl_l = slice(B * n + B * m, B * n + B * m + n)
        layout = PolicyLayout(
            kind="rbf",
            n_state=n,
            n_action=m,
            n_units=B,
            slices={"centers": sl_c, "weights": sl_w, "log_length_scales": sl_l},
            size=B * n + B * m + n,
        )
        theta = np.concatenate(
            [policy.centers.ravel(), policy.weights.ravel(), np.log(policy.length_scales)]
        )
        return PolicyParams(theta, layout)
    raise TypeError(f"unknown policy type {type(policy)!r}")


def build_policy(params: PolicyParams) -> Policy:
    lay = params.layout
    th = params.theta
    if lay.kind == "linear":
        gain = th[lay.slices["gain"]].reshape(lay.n_action, lay.n_state)
        offset = th[lay.slices["offset"]]
        return LinearPolicy(gain=gain, offset=offset)
    if lay.kind == "rbf":
        centers = th[lay.slices["centers"]].reshape(lay.n_units, lay.n_state)
        weights = th[lay.slices["weights"]].reshape(lay.n_units, lay.n_action)
        ls = np.exp(th[lay.slices["log_length_scales"]])
        return RBFPolicy(centers=centers, weights=weights, length_scales=ls)
    raise ValueError(f"unknown layout kind {lay.kind!r}")


@dataclass
class PushforwardDerivs:
    """Action moments with derivatives w.r.t. state moments and theta.

    V is the cross-covariance premultiplier: cov[x, u] = Sigma @ V. Sigma
    derivatives are entrywise; contract them against symmetric perturbations.
    """

    action_mean: np.ndarray  # (m,)
    action_cov: np.ndarray  # (m, m)
    V: np.ndarray  # (n, m)
    dmu_dmu: np.ndarray  # (m, n)
    dmu_dS: np.ndarray  # (m, n, n)
    dmu_dth: np.ndarray  # (m, p)
    dSu_dmu: np.ndarray  # (m, m, n)
    dSu_dS: np.ndarray  # (m, m, n, n)
    dSu_dth: np.ndarray  # (m, m, p)
    dV_dmu: np.ndarray  # (n, m, n)
    dV_dS: np.ndarray  # (n, m, n, n)
    dV_dth: np.ndarray  # (n, m, p)


def _linear_pushforward_derivs(
    policy: LinearPolicy, mu: np.ndarray, Sigma: np.ndarray
) -> PushforwardDerivs:
    W, b = policy.gain, policy.offset
    m, n = W.shape
    p = m * n + m
    mu_u = W @ mu + b
    Su = W @ Sigma @ W.T
    V = W.T.copy()

    dmu_dmu = W.copy()
    dmu_dS = np.zeros((m, n, n))
    dmu_dth = np.zeros((m, p))
    SW = Sigma @ W.T  # (n, m)
    WS = W @ Sigma  # (m, n)
    dSu_dmu = np.zeros((m, m, n))
    dSu_dS = np.einsum("ak,bl->abkl", W, W)
    dSu_dth = np.zeros((m, m, p))
    dV_dmu = np.zeros((n, m, n))
    dV_dS = np.zeros((n, m, n, n))
    dV_dth = np.zeros((n, m, p))
    for i in range(m):
        for j in range(n):
            t = i * n + j
            dmu_dth[i, t] = mu[j]
            # d(W Sigma W')_ab / dW_ij = delta_ai (Sigma W')_jb + delta_bi (W Sigma)_aj
            dSu_dth[i, :, t] += SW[j, :]
            dSu_dth[:, i, t] += WS[:, j]
            dV_dth[j, i, t] = 1.0
    for i in range(m):
        dmu_dth[i, m * n + i] = 1.0
    return PushforwardDerivs(
        action_mean=mu_u,
        action_cov=Su,
        V=V,
        dmu_dmu=dmu_dmu,
        dmu_dS=dmu_dS,
        dmu_dth=dmu_dth,
        dSu_dmu=dSu_dmu,
        dSu_dS=dSu_dS,
        dSu_dth=dSu_dth,
        dV_dmu=dV_dmu,
        dV_dS=dV_dS,
        dV_dth=dV_dth,
    )


def _rbf_pushforward_derivs(
    policy: RBFPolicy, mu: np.ndarray, Sigma: np.ndarray
) -> PushforwardDerivs:
    B, n = policy.centers.shape
    m = policy.n_action
    p = B * n + B * m + n
    lam_row = policy.length_scales**2  # (n,)
    lam = np.tile(lam_row, (m, 1))

    # Pre-normalization: beta = weights / s with s = sum_b phi_b(mu) + guard.
    diff = mu - policy.centers  # (B, n) mu - c_b
    phi = np.exp(-0.5 * np.sum(diff**2 / lam_row, axis=1))  # (B,)
    s = float(phi.sum()) + RBF_NORM_GUARD
    beta = policy.weights / s  # (B, m)

    # s-channel gradients.
    ds_dmu = -(phi[:, None] * diff / lam_row).sum(axis=0)  # (n,)
    ds_dc = phi[:, None] * diff / lam_row  # (B, n)
    ds_dlam = 0.5 * (phi[:, None] * diff**2 / lam_row**2).sum(axis=0)  # (n,)

    arr = MMArrays(X=policy.centers, beta=beta, sf2=np.ones(m), lam=lam, iK=None)
    vals, jac, pjac = predict_moments(arr, mu, Sigma, want_jac=True, want_param_jac=True)

    # Derivatives through the beta channel: beta[i, e] = w[i, e] / s, so
    # d(out)/ds = sum dout/dbeta * (-w / s^2). Engine convention: mean_e and
    # V[:, e] depend on beta[:, e] only; cov is dense over columns.
    wb = policy.weights  # (B, m)
    dmean_ds = -np.einsum("ei,ie->e", pjac.dmean_dbeta, wb) / s**2  # (m,)
    dcov_ds = -np.einsum("abif,if->ab", pjac.dcov_dbeta, wb) / s**2  # (m, m)
    dV_ds = -np.einsum("rei,ie->re", pjac.dV_dbeta, wb) / s**2  # (n, m)

    # --- mean block
    dmu_dmu = jac.dmean_dmu + np.outer(dmean_ds, ds_dmu)  # (m, n)
    dmu_dS = jac.dmean_dS
    dmu_dth = np.zeros((m, p))
    # centers: engine channel + s channel
    dmu_dth[:, : B * n] = (
        pjac.dmean_dX + dmean_ds[:, None, None] * ds_dc[None, :, :]
    ).reshape(m, B * n)
    # weights: dbeta/dw = 1/s on matching (unit, action) entry
    dmu_dw = np.zeros((m, B, m))
    for e in range(m):
        dmu_dw[e, :, e] = pjac.dmean_dbeta[e] / s
    dmu_dth[:, B * n : B * n + B * m] = dmu_dw.reshape(m, B * m)
    # log length scales: engine lam channel (shared across outputs) + s channel
    dmu_dlam = pjac.dmean_dlam + np.outer(dmean_ds, ds_dlam)  # (m, n)
    dmu_dth[:, B * n + B * m :] = dmu_dlam * (2.0 * lam_row)[None, :]

    # --- covariance block
    dSu_dmu = jac.dcov_dmu + dcov_ds[:, :, None] * ds_dmu[None, None, :]
    dSu_dS = jac.dcov_dS
    dSu_dth = np.zeros((m, m, p))
    dSu_dth[:, :, : B * n] = (
        pjac.dcov_dX + dcov_ds[:, :, None, None] * ds_dc[None, None, :, :]
    ).reshape(m, m, B * n)
    dSu_dw = pjac.dcov_dbeta / s  # (m, m, B, m)
    dSu_dth[:, :, B * n : B * n + B * m] = dSu_dw.reshape(m, m, B * m)
    # lam shared: sum the per-output channels
    dSu_dlam = pjac.dcov_dlam.sum(axis=2) + dcov_ds[:, :, None] * ds_dlam[None, None, :]
    dSu_dth[:, :, B * n + B * m :] = dSu_dlam * (2.0 * lam_row)[None, None, :]

    # --- V block
    dV_dmu = jac.dV_dmu + dV_ds[:, :, None] * ds_dmu[None, None, :]
    dV_dS = jac.dV_dS
    dV_dth = np.zeros((n, m, p))
    dV_dth[:, :, : B * n] = (
        pjac.dV_dX + dV_ds[:, :, None, None] * ds_dc[None, None, :, :]
    ).reshape(n, m, B * n)
    dV_dw = np.zeros((n, m, B, m))
    for e in range(m):
        dV_dw[:, e, :, e] = pjac.dV_dbeta[:, e, :] / s
    dV_dth[:, :, B * n : B * n + B * m] = dV_dw.reshape(n, m, B * m)
    dV_dlam = pjac.dV_dlam + dV_ds[:, :, None] * ds_dlam[None, None, :]
    dV_dth[:, :, B * n + B * m :] = dV_dlam * (2.0 * lam_row)[None, None, :]

    return PushforwardDerivs(
        action_mean=vals.mean,
        action_cov=vals.cov,
        V=vals.V,
        dmu_dmu=dmu_dmu,
        dmu_dS=dmu_dS,
        dmu_dth=dmu_dth,
        dSu_dmu=dSu_dmu,
        dSu_dS=dSu_dS,
        dSu_dth=dSu_dth,
        dV_dmu=dV_dmu,
        dV_dS=dV_dS,
        dV_dth=dV_dth,
    )


def pushforward_with_derivs(
    policy: Policy, mu: np.ndarray, Sigma: np.ndarray
) -> PushforwardDerivs:
    """Action moments + full derivative blocks at a raw (mean, cov) input."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if mu.size != policy.n_state:
        raise ValueError(
            f"state dim {mu.size} does not match policy input dim {policy.n_state}"
        )
    if isinstance(policy, LinearPolicy):
        return _linear_pushforward_derivs(policy, mu, Sigma)
    return _rbf_pushforward_derivs(policy, mu, Sigma)


def policy_pushforward(
    policy: Policy, state: GaussianBelief
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moment-matched action distribution for a Gaussian state.

    Returns (action_mean, action_cov, state_action_cross_cov); the linear
    family is exact, the RBF family moment matches the pre-normalized network.
    """
    if isinstance(policy, LinearPolicy):
        mu_u = policy.gain @ state.mean + policy.offset
        Su = policy.gain @ state.cov @ policy.gain.T
        cross = state.cov @ policy.gain.T
        return mu_u, Su, cross
    pf = pushforward_with_derivs(policy, state.mean, state.cov)
    return pf.action_mean, pf.action_cov, state.cov @ pf.V


def pushforward_param_gradients(policy: Policy, state: GaussianBelief) -> PushforwardDerivs:
    """Derivative blocks of the pushforward moments.

    The returned bundle holds d(action_mean)/d(theta, state mean, state cov)
    and likewise for the action covariance and the cross-covariance
    premultiplier V (cov[x, u] = state.cov @ V).
    """
    return pushforward_with_derivs(policy, state.mean, state.cov)
