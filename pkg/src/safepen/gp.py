"""Squared-exponential GP regression on state-action pairs.

One independent GP per target dimension, ARD length scales, hyperparameters
fitted by maximizing the log marginal likelihood in log space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import IllConditionedError

# Jitter ladder: start at JITTER_START * mean(diag K), double until
# JITTER_MAX * mean(diag K), then give up.
JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class KernelHyperparams:
    """SE-kernel hyperparameters for one target dimension.

    Attributes:
        signal_variance: kernel amplitude sigma_s^2.
        length_scales: per-input-dimension length scales l_i; the kernel's
            scale matrix is diag(l_i^2).
        noise_variance: observation noise sigma_n^2, added on the Gram
            diagonal only.
    """

    signal_variance: float
    length_scales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(
            self, "length_scales", np.asarray(self.length_scales, dtype=float)
        )
        if self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("variances must be strictly positive")
        if self.length_scales.ndim != 1 or np.any(self.length_scales <= 0):
            raise ValueError("length_scales must be a positive vector")

    @property
    def input_dim(self) -> int:
        return self.length_scales.size

    def to_log_vector(self) -> np.ndarray:
        """Pack as (log sigma_s^2, log l_1..log l_q, log sigma_n^2)."""
        return np.concatenate(
            [
                [np.log(self.signal_variance)],
                np.log(self.length_scales),
                [np.log(self.noise_variance)],
            ]
        )

    @classmethod
    def from_log_vector(cls, v: np.ndarray) -> "KernelHyperparams":
        v = np.asarray(v, dtype=float)
        return cls(
            signal_variance=float(np.exp(v[0])),
            length_scales=np.exp(v[1:-1]),
            noise_variance=float(np.exp(v[-1])),
        )


@dataclass(frozen=True)
class GPDataset:
    """Regression data: rows of state-action inputs and state-delta targets."""

    inputs: np.ndarray  # (N, n+m)
    targets: np.ndarray  # (N, D)

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.atleast_2d(np.asarray(self.inputs, float)))
        object.__setattr__(self, "targets", np.atleast_2d(np.asarray(self.targets, float)))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def target_dim(self) -> int:
        return self.targets.shape[1]

    def append(self, inputs: np.ndarray, targets: np.ndarray) -> "GPDataset":
        return GPDataset(
            np.vstack([self.inputs, np.atleast_2d(inputs)]),
            np.vstack([self.targets, np.atleast_2d(targets)]),
        )

    def to_csv(self, path, n_state: int) -> None:
        """Write as CSV with header x1..xn, u1..um, dx1..dxD."""
        n_action = self.input_dim - n_state
        if n_action < 0:
            raise ValueError("n_state exceeds input dimension")
        header = (
            [f"x{i + 1}" for i in range(n_state)]
            + [f"u{i + 1}" for i in range(n_action)]
            + [f"dx{i + 1}" for i in range(self.target_dim)]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row_in, row_out in zip(self.inputs, self.targets):
                writer.writerow(
                    [repr(float(v)) for v in np.concatenate([row_in, row_out])]
                )

    @classmethod
    def from_csv(cls, path) -> tuple["GPDataset", int]:
        """Read a dataset written by :meth:`to_csv`; returns (dataset, n_state)."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        n_state = sum(1 for name in header if name.startswith("x"))
        n_action = sum(1 for name in header if name.startswith("u"))
        n_target = sum(1 for name in header if name.startswith("dx"))
        if n_state + n_action + n_target != len(header):
            raise ValueError(f"unrecognized CSV header: {header}")
        data = np.asarray(rows, dtype=float)
        n_in = n_state + n_action
        return cls(data[:, :n_in], data[:, n_in:]), n_state


def kernel_eval(
    x1: np.ndarray, x2: np.ndarray, h: KernelHyperparams, same_point: bool = False
) -> float:
    """SE kernel value sigma_s^2 exp(-1/2 (x1-x2)' diag(l^-2) (x1-x2)).

    Noise variance is added iff ``same_point`` (the Kronecker-delta term that
    lives on the Gram diagonal).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.size != h.input_dim:
        raise ValueError(
            f"input dims {x1.shape}/{x2.shape} do not match length scales ({h.input_dim})"
        )
    z = (x1 - x2) / h.length_scales
    val = h.signal_variance * np.exp(-0.5 * float(z @ z))
    if same_point:
        val += h.noise_variance
    return float(val)


def _se_gram(X: np.ndarray, h: KernelHyperparams) -> np.ndarray:
    """Noise-free SE Gram matrix of the training inputs."""
    Z = X / h.length_scales
    sq = np.sum(Z**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    np.maximum(d2, 0.0, out=d2)
    return h.signal_variance * np.exp(-0.5 * d2)


def _kernel_vector(X: np.ndarray, x_star: np.ndarray, h: KernelHyperparams) -> np.ndarray:
    Z = (X - x_star) / h.length_scales
    return h.signal_variance * np.exp(-0.5 * np.sum(Z**2, axis=1))


def _chol_with_jitter(K_noisy: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky of K + sigma_n^2 I, escalating jitter on failure.

    Returns (lower factor, jitter used). Raises IllConditionedError once the
    jitter ladder is exhausted.
    """
    scale = float(np.mean(np.diag(K_noisy)))
    jitter = 0.0
    step = JITTER_START * scale
    while True:
        try:
            L = scipy.linalg.cholesky(
                K_noisy + jitter * np.eye(K_noisy.shape[0]), lower=True
            )
            return L, jitter
        except scipy.linalg.LinAlgError:
            jitter = step if jitter == 0.0 else 2.0 * jitter
            if jitter > JITTER_MAX * scale:
                raise IllConditionedError(
                    "Gram matrix not factorizable within the jitter ladder; "
                    "dataset is ill-conditioned"
                ) from None


@dataclass(frozen=True)
class TrainedGP:
    """Independent per-output-dimension SE GPs with precomputed solves.

    beta[:, d] = (K_d + sigma_n_d^2 I)^(-1) y_d; chol_factors[d] is the lower
    Cholesky factor of the noisy Gram matrix for dimension d and
    gram_inverses[d] its explicit inverse (needed by moment matching).
    """

    dataset: GPDataset
    hyperparams: tuple[KernelHyperparams, ...]
    beta: np.ndarray  # (N, D)
    chol_factors: tuple[np.ndarray, ...]
    gram_inverses: tuple[np.ndarray, ...]
    fit_info: dict = field(default_factory=dict, compare=False)

    @property
    def input_dim(self) -> int:
        return self.dataset.input_dim

    @property
    def output_dim(self) -> int:
        return self.dataset.target_dim

    def gram_inverse(self, d: int) -> np.ndarray:
        """(K_d + sigma_n_d^2 I)^(-1), precomputed."""
        return self.gram_inverses[d]


def build_trained_gp(
    data: GPDataset, hyperparams: list[KernelHyperparams], fit_info: dict | None = None
) -> TrainedGP:
    """Assemble a TrainedGP from fixed hyperparameters (no optimization)."""
    if len(hyperparams) != data.target_dim:
        raise ValueError("need one hyperparameter set per target dimension")
    beta = np.empty((data.n_points, data.target_dim))
    factors = []
    inverses = []
    eye = np.eye(data.n_points)
    for d, h in enumerate(hyperparams):
        if h.input_dim != data.input_dim:
            raise ValueError("hyperparameter length scales do not match input dim")
        K = _se_gram(data.inputs, h) + h.noise_variance * eye
        L, _ = _chol_with_jitter(K)
        beta[:, d] = scipy.linalg.cho_solve((L, True), data.targets[:, d])
        factors.append(L)
        inverses.append(scipy.linalg.cho_solve((L, True), eye))
    return TrainedGP(
        dataset=data,
        hyperparams=tuple(hyperparams),
        beta=beta,
        chol_factors=tuple(factors),
        gram_inverses=tuple(inverses),
        fit_info=fit_info or {},
    )


def log_marginal_likelihood_and_grad(
    data: GPDataset, h: KernelHyperparams, d: int
) -> tuple[float, np.ndarray]:
    """GP log evidence for target column d and its gradient.

    The gradient is taken with respect to the log hyperparameters, ordered as
    (log sigma_s^2, log l_1..log l_q, log sigma_n^2).
    """
    X = data.inputs
    y = data.targets[:, d]
    N = data.n_points
    K_se = _se_gram(X, h)
    K = K_se + h.noise_variance * np.eye(N)
    L, jitter = _chol_with_jitter(K)
    alpha = scipy.linalg.cho_solve((L, True), y)
    lml = (
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * N * np.log(2.0 * np.pi)
    )
    # dlml/dtheta_j = 1/2 tr((alpha alpha' - K^-1) dK/dtheta_j)
    Kinv = scipy.linalg.cho_solve((L, True), np.eye(N))
    A = np.outer(alpha, alpha) - Kinv
    grad = np.empty(h.input_dim + 2)
    grad[0] = 0.5 * float(np.sum(A * K_se))  # dK/dlog sigma_s^2 = K_se
    for k in range(h.input_dim):
        diff2 = (X[:, k, None] - X[None, :, k]) ** 2 / h.length_scales[k] ** 2
        grad[1 + k] = 0.5 * float(np.sum(A * (K_se * diff2)))
    grad[-1] = 0.5 * h.noise_variance * float(np.trace(A))
    del jitter
    return lml, grad


def _input_scales(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column length-scale seeds and a mask of degenerate columns.

    Columns that are (numerically) constant carry no information about their
    length scale; they start ARD-pruned at a large multiple of the informative
    scales so downstream scale matrices stay well conditioned.
    """
    ls = np.std(X, axis=0)
    col_scale = np.maximum(np.max(np.abs(X), axis=0), 1.0)
    degenerate = ls <= 1e-9 * col_scale
    base = float(ls[~degenerate].max()) if bool((~degenerate).any()) else 1.0
    ls = ls.copy()
    ls[degenerate] = 100.0 * max(base, 1.0)
    return ls, degenerate


def _heuristic_init(data: GPDataset, d: int) -> KernelHyperparams:
    X = data.inputs
    y = data.targets[:, d]
    ls, _ = _input_scales(X)
    # A zero-mean prior has to cover any constant offset in the targets, so
    # seed the signal variance with the raw second moment, not just the var.
    sf2 = max(float(np.mean(y**2)), 1e-12)
    return KernelHyperparams(
        signal_variance=sf2, length_scales=ls, noise_variance=max(0.01 * sf2, 1e-12)
    )


# Bounds of the noise-to-signal ratio sigma_n^2 / sigma_s^2 during fitting.
# The lower bound caps the signal-to-noise ratio at 1000 (noise-free data
# would otherwise drive the Gram condition number off a cliff); the upper
# bound still allows essentially-all-noise explanations.
NOISE_RATIO_MIN = 1e-6
NOISE_RATIO_MAX = 1e12


def _pack_ratio(h: KernelHyperparams) -> np.ndarray:
    """(log sigma_s^2, log ls.., log ratio) with ratio = sigma_n^2/sigma_s^2."""
    return np.concatenate(
        [
            [np.log(h.signal_variance)],
            np.log(h.length_scales),
            [np.log(h.noise_variance / h.signal_variance)],
        ]
    )


def _unpack_ratio(v: np.ndarray) -> KernelHyperparams:
    sf2 = float(np.exp(v[0]))
    return KernelHyperparams(
        signal_variance=sf2,
        length_scales=np.exp(v[1:-1]),
        noise_variance=float(np.exp(v[-1]) * sf2),
    )


def _fit_one_dimension(
    data: GPDataset,
    d: int,
    restarts: int,
    rng: np.random.Generator,
    init: KernelHyperparams | None,
    maxiter: int,
) -> tuple[KernelHyperparams, dict]:
    """Maximize evidence for one target column from several starts."""

    def objective(v):
        h = _unpack_ratio(v)
        try:
            lml, grad = log_marginal_likelihood_and_grad(data, h, d)
        except IllConditionedError:
            return 1e12, np.zeros_like(v)
        if not np.isfinite(lml):
            return 1e12, np.zeros_like(v)
        # Chain rule to the ratio parametrization: sigma_n^2 = ratio*sigma_s^2
        # makes the log-signal channel pick up the noise channel too.
        g = np.empty_like(grad)
        g[0] = grad[0] + grad[-1]
        g[1:-1] = grad[1:-1]
        g[-1] = grad[-1]
        return -lml, -g

    base = init if init is not None else _heuristic_init(data, d)
    starts = [_pack_ratio(base)]
    for _ in range(max(0, restarts - 1)):
        # Log-uniform scatter around the heuristic point.
        starts.append(_pack_ratio(base) + rng.uniform(-2.0, 2.0, size=base.input_dim + 2))

    # Length scales are kept within a broad band around the data spread;
    # collapsed or exploded scales wreck the conditioning of every
    # downstream solve without buying meaningful extra evidence. The signal
    # variance gets a huge but finite band so exp() cannot underflow when
    # the evidence optimum sits at "no signal".
    ls_seed, _ = _input_scales(data.inputs)
    scale2 = max(float(np.mean(data.targets[:, d] ** 2)), 1e-6)
    bounds = (
        [(np.log(1e-30 * scale2), np.log(1e30 * scale2))]
        + [(np.log(1e-3 * s), np.log(1e4 * s)) for s in ls_seed]
        + [(np.log(NOISE_RATIO_MIN), np.log(NOISE_RATIO_MAX))]
    )

    best = None
    for idx, x0 in enumerate(starts):
        x0 = np.clip(x0, [b[0] if b[0] is not None else -np.inf for b in bounds],
                     [b[1] if b[1] is not None else np.inf for b in bounds])
        res = scipy.optimize.minimize(
            objective,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": maxiter},
        )
        x_final, f_final = res.x, res.fun
        if not np.isfinite(f_final) or f_final >= 1e12:
            # Line search broke down; polish the start with plain gradient
            # descent before giving up on this restart.
            x_final, f_final = _gradient_descent_fallback(objective, x0)
        if best is None or f_final < best[1]:
            best = (x_final, f_final, idx)
    h = _unpack_ratio(best[0])
    return h, {"restart": best[2], "neg_evidence": float(best[1])}


def _gradient_descent_fallback(objective, x0, steps: int = 200, lr: float = 1e-2):
    x = np.asarray(x0, dtype=float).copy()
    f, g = objective(x)
    for _ in range(steps):
        x_new = x - lr * g
        f_new, g_new = objective(x_new)
        if f_new < f:
            x, f, g = x_new, f_new, g_new
            lr *= 1.2
        else:
            lr *= 0.5
            if lr < 1e-10:
                break
    return x, f


def fit_hyperparams(
    data: GPDataset,
    restarts: int = 3,
    seed: int = 0,
    init: list[KernelHyperparams] | None = None,
    maxiter: int = 150,
) -> TrainedGP:
    """Fit one independent GP per target dimension by evidence maximization.

    Args:
        data: training set with at least two rows.
        restarts: number of optimizer starts per dimension (the first is the
            data-driven heuristic or ``init``; the rest are log-uniform
            perturbations of it).
        seed: seeds the restart scatter; fits are deterministic given it.
        init: optional warm-start hyperparameters, one per target dimension.
        maxiter: L-BFGS-B iteration cap per start.
    """
    if data.n_points < 2:
        raise ValueError("need at least two data points to fit a GP")
    rng = np.random.default_rng(seed)
    hyps: list[KernelHyperparams] = []
    info: dict = {"restart_used": [], "neg_evidence": []}
    for d in range(data.target_dim):
        h, meta = _fit_one_dimension(
            data, d, restarts, rng, init[d] if init is not None else None, maxiter
        )
        hyps.append(h)
        info["restart_used"].append(meta["restart"])
        info["neg_evidence"].append(meta["neg_evidence"])
    return build_trained_gp(data, hyps, fit_info=info)


def predict_deterministic(
    model: TrainedGP, x_star: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of each target dimension at a point.

    Variance is the latent predictive variance
    k** - k*' (K + sigma_n^2 I)^(-1) k*, clamped at zero.
    """
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape != (model.input_dim,):
        raise ValueError(
            f"x_star has shape {x_star.shape}, expected ({model.input_dim},)"
        )
    D = model.output_dim
    mean = np.empty(D)
    var = np.empty(D)
    for d in range(D):
        h = model.hyperparams[d]
        k_star = _kernel_vector(model.dataset.inputs, x_star, h)
        mean[d] = float(k_star @ model.beta[:, d])
        sol = scipy.linalg.cho_solve((model.chol_factors[d], True), k_star)
        var[d] = max(h.signal_variance - float(k_star @ sol), 0.0)
    return mean, var


def predict_deterministic_batch(
    model: TrainedGP, X_star: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`predict_deterministic` over rows of X_star."""
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    M, D = X_star.shape[0], model.output_dim
    mean = np.empty((M, D))
    var = np.empty((M, D))
    X = model.dataset.inputs
    for d in range(D):
        h = model.hyperparams[d]
        Z = X / h.length_scales
        Zs = X_star / h.length_scales
        d2 = (
            np.sum(Zs**2, axis=1)[:, None]
            + np.sum(Z**2, axis=1)[None, :]
            - 2.0 * Zs @ Z.T
        )
        np.maximum(d2, 0.0, out=d2)
        Ks = h.signal_variance * np.exp(-0.5 * d2)  # (M, N)
        mean[:, d] = Ks @ model.beta[:, d]
        sol = scipy.linalg.cho_solve((model.chol_factors[d], True), Ks.T)
        var[:, d] = np.maximum(h.signal_variance - np.sum(Ks.T * sol, axis=0), 0.0)
    return mean, var
