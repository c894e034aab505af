"""Gaussian state beliefs and moment-matched one-step propagation.

Implements GP prediction under Gaussian-distributed inputs (mean, covariance
and input-output covariance) and the one-step belief update that chains those
predictions into multi-step probabilistic trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mm_engine import MMArrays, predict_moments
from .errors import PropagationError
from .gp import TrainedGP

SYM_TOL = 1e-10
EIG_TOL = 1e-9


def clamp_psd(S: np.ndarray, tol: float = EIG_TOL, step: int | None = None) -> np.ndarray:
    """Symmetrize and floor tiny negative eigenvalues at zero.

    Eigenvalues below -tol are treated as a genuine error rather than noise
    and raise PropagationError.
    """
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    if w.min() < -tol * max(1.0, float(np.abs(w).max())):
        raise PropagationError(
            f"covariance has eigenvalue {w.min():.3e} beyond clamp tolerance", step=step
        )
    if w.min() < 0.0:
        S = (Q * np.maximum(w, 0.0)) @ Q.T
        S = 0.5 * (S + S.T)
    return S


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian state belief N(mean, cov) at one step of a trajectory."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError("mean must be a vector and cov a matching square matrix")
        asym = float(np.max(np.abs(cov - cov.T))) if cov.size else 0.0
        if asym > SYM_TOL * max(1.0, float(np.max(np.abs(cov)))):
            raise ValueError(f"covariance asymmetric beyond tolerance ({asym:.3e})")
        cov = clamp_psd(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def certain(cls, mean: np.ndarray) -> "GaussianBelief":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.zeros((mean.size, mean.size)))


@dataclass(frozen=True)
class JointBelief:
    """State belief together with the policy's action moments.

    cross_cov is cov[x, u], shape (n, m).
    """

    state: GaussianBelief
    action_mean: np.ndarray
    action_cov: np.ndarray
    cross_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "action_mean", np.asarray(self.action_mean, float))
        object.__setattr__(self, "action_cov", np.atleast_2d(np.asarray(self.action_cov, float)))
        object.__setattr__(self, "cross_cov", np.atleast_2d(np.asarray(self.cross_cov, float)))
        n, m = self.state.dim, self.action_mean.size
        if self.action_cov.shape != (m, m) or self.cross_cov.shape != (n, m):
            raise ValueError("inconsistent joint-belief shapes")

    @property
    def input_mean(self) -> np.ndarray:
        return np.concatenate([self.state.mean, self.action_mean])

    @property
    def input_cov(self) -> np.ndarray:
        n, m = self.state.dim, self.action_mean.size
        S = np.empty((n + m, n + m))
        S[:n, :n] = self.state.cov
        S[:n, n:] = self.cross_cov
        S[n:, :n] = self.cross_cov.T
        S[n:, n:] = self.action_cov
        return S

    def input_belief(self) -> GaussianBelief:
        return GaussianBelief(self.input_mean, clamp_psd(self.input_cov))


@dataclass(frozen=True)
class MMPrediction:
    """Moment-matched one-step GP prediction under a Gaussian input."""

    delta_mean: np.ndarray  # (D,)
    delta_cov: np.ndarray  # (D, D)
    input_delta_cross_cov: np.ndarray  # (n+m, D)


def model_arrays(model: TrainedGP) -> MMArrays:
    """Pack a TrainedGP into the moment-matching array bundle."""
    D = model.output_dim
    iK = np.stack([model.gram_inverse(d) for d in range(D)])
    return MMArrays(
        X=model.dataset.inputs,
        beta=model.beta,
        sf2=np.array([h.signal_variance for h in model.hyperparams]),
        lam=np.stack([h.length_scales**2 for h in model.hyperparams]),
        iK=iK,
    )


def _check_input(model: TrainedGP, belief: GaussianBelief) -> None:
    if belief.dim != model.input_dim:
        raise ValueError(
            f"belief dim {belief.dim} does not match model input dim {model.input_dim}"
        )


def mm_mean(model: TrainedGP, input_belief: GaussianBelief) -> tuple[np.ndarray, np.ndarray]:
    """Predicted delta mean under a Gaussian input; also returns the mean
    weights w (one row per target dimension)."""
    _check_input(model, input_belief)
    vals, _, _ = predict_moments(model_arrays(model), input_belief.mean, input_belief.cov)
    return vals.mean, vals.weights


def mm_cov(
    model: TrainedGP, input_belief: GaussianBelief, delta_mean: np.ndarray
) -> np.ndarray:
    """Predicted delta covariance (moment matched, symmetrized, PSD-clamped)."""
    _check_input(model, input_belief)
    vals, _, _ = predict_moments(model_arrays(model), input_belief.mean, input_belief.cov)
    if not np.allclose(vals.mean, delta_mean, atol=1e-8):
        raise ValueError("delta_mean does not correspond to this input belief")
    return clamp_psd(vals.cov)


def mm_input_output_cov(
    model: TrainedGP, input_belief: GaussianBelief, weights: np.ndarray
) -> np.ndarray:
    """Covariance between the Gaussian input and the predicted delta, (n+m, D)."""
    _check_input(model, input_belief)
    vals, _, _ = predict_moments(model_arrays(model), input_belief.mean, input_belief.cov)
    if not np.allclose(vals.weights, weights, atol=1e-8):
        raise ValueError("weights do not correspond to this input belief")
    return input_belief.cov @ vals.V


def mm_predict(model: TrainedGP, input_belief: GaussianBelief) -> MMPrediction:
    """All three moment-matched quantities in one pass."""
    _check_input(model, input_belief)
    vals, _, _ = predict_moments(model_arrays(model), input_belief.mean, input_belief.cov)
    return MMPrediction(
        delta_mean=vals.mean,
        delta_cov=clamp_psd(vals.cov),
        input_delta_cross_cov=input_belief.cov @ vals.V,
    )


# Relative eigenvalue threshold below which the action covariance counts as
# singular and the state-delta cross covariance is read directly from the
# joint prediction instead of going through Sigma_u^-1.
SIGMA_U_SINGULAR_RTOL = 1e-10


def action_cov_invertible(action_cov: np.ndarray, rtol: float = SIGMA_U_SINGULAR_RTOL) -> bool:
    w = np.linalg.eigvalsh(0.5 * (action_cov + action_cov.T))
    return bool(w.min() > rtol * max(float(w.max()), 1e-300))


def propagate_step(
    prev: GaussianBelief,
    joint: JointBelief,
    mm: MMPrediction,
    step: int | None = None,
) -> GaussianBelief:
    """One-step belief update x_t = x_{t-1} + delta.

    mean_t = mean_{t-1} + delta_mean;
    cov_t = cov_{t-1} + delta_cov + cov[x, delta] + cov[x, delta]'.

    cov[x, delta] is cov[x,u] Sigma_u^-1 cov[u,delta] when the action
    covariance is invertible, and the state-block rows of the joint
    input-delta covariance otherwise.
    """
    n = prev.dim
    D = mm.delta_mean.size
    if D != n:
        raise PropagationError("delta dimension must equal state dimension", step=step)
    mean_t = prev.mean + mm.delta_mean
    if joint.action_mean.size and action_cov_invertible(joint.action_cov):
        cov_u_delta = mm.input_delta_cross_cov[n:, :]  # (m, D)
        cross = joint.cross_cov @ np.linalg.solve(joint.action_cov, cov_u_delta)
    else:
        cross = mm.input_delta_cross_cov[:n, :]
    cov_t = prev.cov + mm.delta_cov + cross + cross.T
    cov_t = clamp_psd(cov_t, step=step)
    return GaussianBelief(mean_t, cov_t)
