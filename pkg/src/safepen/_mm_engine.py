"""Moment matching of an SE-kernel regression map under Gaussian inputs.

Shared computational core with two callers: the GP dynamics model (full
posterior, with the expected-model-variance term on the diagonal) and the
RBF controller (a deterministic map, algebraically the mean of a GP, which
additionally needs derivatives w.r.t. its own parameters).

Shapes: N = number of basis/training points, q = input dim, D = output dim.

Value path per output dimension d (weights of the predicted mean):

    w_i = sf2 |Sigma Lam^-1 + I|^(-1/2) exp(-1/2 v_i' (Sigma+Lam)^-1 v_i)
    v_i = X_i - mu,   mean_d = sum_i beta_id w_i
    V[:, d] = sum_i beta_id w_i (Sigma+Lam)^-1 v_i      (cross-cov = Sigma V)

and per output pair (a, b) (second moments):

    logW_ij = log k_a(X_i, mu) + log k_b(X_j, mu) - 1/2 log|R|
              + 1/2 z_ij' (R^-1 Sigma) z_ij
    z_ij = Lam_a^-1 v_i + Lam_b^-1 v_j,    R = Sigma (Lam_a^-1 + Lam_b^-1) + I
    E[out_a out_b] = beta_a' W beta_b
    cov_ab = E[out_a out_b] - mean_a mean_b
             (+ sf2_a - tr(iK_a W) on the diagonal for posterior maps)

Derivatives w.r.t. mu and Sigma never materialize (N, N, q) tensors: every
contraction against a weight matrix G_ij reduces to row/column sums plus a
few (N, q) x (q, q) products, keeping the gradient pass O(N^2 q) like the
value pass. Parameter derivatives (X, beta, lam) are only needed for the
small controller map and do materialize (N, N, q) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLengthScaleError


@dataclass(frozen=True)
class MMArrays:
    """Inputs of the moment-matched map.

    Attributes:
        X: basis points, (N, q).
        beta: output coefficients, (N, D).
        sf2: signal variances, (D,).
        lam: squared length scales (Lambda diagonals), (D, q).
        iK: per-output inverses of the noisy Gram matrix, (D, N, N); None for
            deterministic maps (no model-uncertainty term on the diagonal).
    """

    X: np.ndarray
    beta: np.ndarray
    sf2: np.ndarray
    lam: np.ndarray
    iK: np.ndarray | None


@dataclass
class MMValues:
    mean: np.ndarray  # (D,)
    cov: np.ndarray  # (D, D)
    V: np.ndarray  # (q, D); cross-covariance with the input is Sigma @ V
    weights: np.ndarray  # (D, N) mean weights w_di


@dataclass
class MMJac:
    """Derivatives w.r.t. the input mean and covariance (entrywise in Sigma)."""

    dmean_dmu: np.ndarray  # (D, q)
    dmean_dS: np.ndarray  # (D, q, q)
    dcov_dmu: np.ndarray  # (D, D, q)
    dcov_dS: np.ndarray  # (D, D, q, q)
    dV_dmu: np.ndarray  # (q, D, q)
    dV_dS: np.ndarray  # (q, D, q, q)


@dataclass
class MMParamJac:
    """Derivatives w.r.t. the map's own parameters (deterministic maps only).

    lam channels are per output dimension: dmean_dlam[d] is d mean_d/d lam[d].
    dcov_dlam[a, b, e] is d cov_ab / d lam[e] (nonzero only for e in {a, b},
    with both channels already summed when a == b).
    """

    dmean_dX: np.ndarray  # (D, N, q)
    dmean_dbeta: np.ndarray  # (D, N)   w.r.t. beta[:, d]
    dmean_dlam: np.ndarray  # (D, q)
    dcov_dX: np.ndarray  # (D, D, N, q)
    dcov_dbeta: np.ndarray  # (D, D, N, D)
    dcov_dlam: np.ndarray  # (D, D, D, q)
    dV_dX: np.ndarray  # (q, D, N, q)
    dV_dbeta: np.ndarray  # (q, D, N)  w.r.t. beta[:, d]
    dV_dlam: np.ndarray  # (q, D, q)   w.r.t. lam[d]


def _solve_or_raise(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateLengthScaleError(
            "singular scale matrix in moment matching"
        ) from exc


def predict_moments(
    arr: MMArrays,
    mu: np.ndarray,
    Sigma: np.ndarray,
    want_jac: bool = False,
    want_param_jac: bool = False,
) -> tuple[MMValues, MMJac | None, MMParamJac | None]:
    """Moment-matched mean/cov/input-cross term with optional Jacobians."""
    X, beta, sf2, lam = arr.X, arr.beta, arr.sf2, arr.lam
    N, q = X.shape
    D = beta.shape[1]
    if want_param_jac and arr.iK is not None:
        raise ValueError("parameter Jacobians are only supported for deterministic maps")
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)

    VX = X - mu  # (N, q) v_i
    Linv = 1.0 / lam  # (D, q)

    mean = np.empty(D)
    V = np.empty((q, D))
    weights = np.empty((D, N))
    P = np.empty((D, q, q))  # (Sigma + Lam_d)^-1
    U = np.empty((D, N, q))  # u_i = P_d v_i
    cvec = np.empty((D, N))  # beta_id * w_i
    logk = np.empty((D, N))  # log k_d(X_i, mu), noise-free

    for d in range(D):
        Md = Sigma + np.diag(lam[d])
        sign, logdetM = np.linalg.slogdet(Md)
        if sign <= 0:
            raise DegenerateLengthScaleError("Sigma + Lambda not positive definite")
        Pd = _solve_or_raise(Md, np.eye(q))
        P[d] = 0.5 * (Pd + Pd.T)
        U[d] = VX @ P[d]
        quad = np.sum(U[d] * VX, axis=1)  # v' P v
        halflog = 0.5 * (logdetM - np.sum(np.log(lam[d])))
        weights[d] = sf2[d] * np.exp(-0.5 * quad - halflog)
        cvec[d] = beta[:, d] * weights[d]
        mean[d] = float(np.sum(cvec[d]))
        V[:, d] = U[d].T @ cvec[d]
        logk[d] = np.log(sf2[d]) - 0.5 * np.sum(VX**2 * Linv[d], axis=1)

    jac = None
    if want_jac:
        jac = MMJac(
            dmean_dmu=np.empty((D, q)),
            dmean_dS=np.empty((D, q, q)),
            dcov_dmu=np.zeros((D, D, q)),
            dcov_dS=np.zeros((D, D, q, q)),
            dV_dmu=np.empty((q, D, q)),
            dV_dS=np.empty((q, D, q, q)),
        )
        for d in range(D):
            csum = mean[d]
            cU = cvec[d][:, None] * U[d]  # (N, q) rows c_i u_i
            UcU = U[d].T @ cU  # (q, q) = sum_i c_i u_i u_i'
            jac.dmean_dmu[d] = V[:, d]
            jac.dmean_dS[d] = -0.5 * csum * P[d] + 0.5 * UcU
            jac.dV_dmu[:, d, :] = UcU - csum * P[d]
            # T3[r, k, l] = sum_i c_i u_ir u_ik u_il
            T3 = np.einsum("ir,ik,il->rkl", cU, U[d], U[d], optimize=True)
            # P is stored symmetrized, so d(P v)/dSigma_kl follows the
            # symmetrized rule -1/2 (P e_k u_l' + P e_l u_k').
            jac.dV_dS[:, d, :, :] = (
                -0.5 * P[d][None, :, :] * V[:, d][:, None, None]
                + 0.5 * T3
                - 0.5 * P[d][:, :, None] * V[None, None, :, d]
                - 0.5 * P[d][:, None, :] * V[None, :, None, d]
            )

    pjac = None
    if want_param_jac:
        pjac = MMParamJac(
            dmean_dX=np.empty((D, N, q)),
            dmean_dbeta=weights.copy(),
            dmean_dlam=np.empty((D, q)),
            dcov_dX=np.zeros((D, D, N, q)),
            dcov_dbeta=np.zeros((D, D, N, D)),
            dcov_dlam=np.zeros((D, D, D, q)),
            dV_dX=np.empty((q, D, N, q)),
            dV_dbeta=np.empty((q, D, N)),
            dV_dlam=np.empty((q, D, q)),
        )
        for d in range(D):
            # dlogw_i/dLam_k = -1/2 (P_kk - 1/Lam_k) + 1/2 u_ik^2
            dlogw_dlam = -0.5 * (np.diag(P[d]) - Linv[d])[None, :] + 0.5 * U[d] ** 2
            pjac.dmean_dX[d] = -cvec[d][:, None] * U[d]
            pjac.dmean_dlam[d] = cvec[d] @ dlogw_dlam
            # dV_r/dX_ik = -c_i u_ik u_ir + c_i P_kr
            pjac.dV_dX[:, d, :, :] = np.einsum(
                "i,ik,ir->rik", -cvec[d], U[d], U[d], optimize=True
            ) + np.einsum("i,kr->rik", cvec[d], P[d], optimize=True)
            pjac.dV_dbeta[:, d, :] = (weights[d][:, None] * U[d]).T
            # dV_r/dLam_k = sum_i c_i (dlogw_ik u_ir - P_rk u_ik)
            pjac.dV_dlam[:, d, :] = U[d].T @ (
                cvec[d][:, None] * dlogw_dlam
            ) - np.einsum("rk,ik,i->rk", P[d], U[d], cvec[d], optimize=True)

    # Second moments per output pair.
    cov = np.empty((D, D))
    for a in range(D):
        for b in range(a, D):
            lam_bar = Linv[a] + Linv[b]  # (q,)
            Rm = Sigma * lam_bar[None, :] + np.eye(q)
            sign, logdetR = np.linalg.slogdet(Rm)
            if sign <= 0:
                raise DegenerateLengthScaleError("singular R matrix in covariance step")
            Y = _solve_or_raise(Rm, Sigma)
            Y = 0.5 * (Y + Y.T)
            A = VX * Linv[a][None, :]  # rows a_i = Lam_a^-1 v_i
            B = VX * Linv[b][None, :]
            AY = A @ Y
            qa = np.sum(AY * A, axis=1)
            qb = np.sum((B @ Y) * B, axis=1)
            logW = (
                (logk[a] + 0.5 * qa)[:, None]
                + (logk[b] + 0.5 * qb)[None, :]
                - 0.5 * logdetR
                + AY @ B.T
            )
            # Mathematically logW <= log(sf2_a sf2_b); a large excess means the
            # R solve has lost all precision (scales collapsed vs. the input
            # covariance), so fail loudly rather than overflow.
            if float(np.max(logW)) > np.log(sf2[a]) + np.log(sf2[b]) + 50.0:
                raise DegenerateLengthScaleError(
                    "second-moment weights numerically degenerate "
                    "(length scales too small for the input covariance)"
                )
            W = np.exp(logW)
            E_ab = float(beta[:, a] @ W @ beta[:, b])
            cov_ab = E_ab - mean[a] * mean[b]
            if a == b and arr.iK is not None:
                cov_ab += sf2[a] - float(np.sum(arr.iK[a] * W))
            cov[a, b] = cov_ab
            cov[b, a] = cov_ab

            if not (want_jac or want_param_jac):
                continue

            Rinv = np.linalg.inv(Rm)
            G = (beta[:, a][:, None] * beta[:, b][None, :]) * W

            if want_jac:
                dE_dmu, dE_dS = _pair_grad_mu_S(G, A, B, Y, Rinv, lam_bar)
                dcov_dmu = dE_dmu - mean[b] * jac.dmean_dmu[a] - mean[a] * jac.dmean_dmu[b]
                dcov_dS = dE_dS - mean[b] * jac.dmean_dS[a] - mean[a] * jac.dmean_dS[b]
                if a == b and arr.iK is not None:
                    Gt = arr.iK[a] * W
                    dtr_dmu, dtr_dS = _pair_grad_mu_S(Gt, A, B, Y, Rinv, lam_bar)
                    dcov_dmu = dcov_dmu - dtr_dmu
                    dcov_dS = dcov_dS - dtr_dS
                jac.dcov_dmu[a, b] = dcov_dmu
                jac.dcov_dS[a, b] = dcov_dS
                if a != b:
                    jac.dcov_dmu[b, a] = dcov_dmu
                    jac.dcov_dS[b, a] = dcov_dS

            if want_param_jac:
                dE_dX, dE_dla, dE_dlb = _pair_grad_params(
                    G, A, B, VX, Y, Linv[a], Linv[b]
                )
                dcov_dX = (
                    dE_dX - mean[b] * pjac.dmean_dX[a] - mean[a] * pjac.dmean_dX[b]
                )
                dcov_db = np.zeros((N, D))
                dcov_db[:, a] += W @ beta[:, b] - mean[b] * weights[a]
                dcov_db[:, b] += W.T @ beta[:, a] - mean[a] * weights[b]
                dcov_dlam = np.zeros((D, q))
                # chain d/dLinv -> d/dlam with dLinv/dlam = -1/lam^2
                dcov_dlam[a] += dE_dla * (-(Linv[a] ** 2)) - mean[b] * pjac.dmean_dlam[a]
                dcov_dlam[b] += dE_dlb * (-(Linv[b] ** 2)) - mean[a] * pjac.dmean_dlam[b]
                pjac.dcov_dX[a, b] = dcov_dX
                pjac.dcov_dbeta[a, b] = dcov_db
                pjac.dcov_dlam[a, b] = dcov_dlam
                if a != b:
                    pjac.dcov_dX[b, a] = dcov_dX
                    pjac.dcov_dbeta[b, a] = dcov_db
                    pjac.dcov_dlam[b, a] = dcov_dlam

    cov = 0.5 * (cov + cov.T)
    return MMValues(mean=mean, cov=cov, V=V, weights=weights), jac, pjac


def _pair_grad_mu_S(G, A, B, Y, Rinv, lam_bar):
    """d(sum_ij G_ij')/d(mu, Sigma) treating G = (weights * W) as the product
    whose log-derivative is dlogW.

    Returns (dmu (q,), dS (q, q)). Uses only row/column sums of G.
    """
    r = G.sum(axis=1)  # (N,)
    c = G.sum(axis=0)  # (N,)
    S_G = float(r.sum())
    # dlogW/dmu = z - lam_bar * (Y z): contract with G via z_ij = a_i + b_j.
    zsum = A.T @ r + B.T @ c  # (q,)
    dmu = zsum - lam_bar * (Y @ zsum)
    # dlogW/dSigma_kl = -1/2 (Rinv' * lam_bar)_kl + 1/2 s_k s_l,
    # with s = (I - lam_bar*Y) z; expand s_ij = at_i + bt_j.
    At = A - (A @ Y) * lam_bar[None, :]
    Bt = B - (B @ Y) * lam_bar[None, :]
    crossT = At.T @ G @ Bt  # (q, q)
    dS = 0.5 * (
        At.T @ (r[:, None] * At) + Bt.T @ (c[:, None] * Bt) + crossT + crossT.T
    ) - 0.5 * S_G * (Rinv.T * lam_bar[None, :])
    return dmu, dS


def _pair_grad_params(G, A, B, VX, Y, Linv_a, Linv_b):
    """Parameter-channel gradients of sum_ij G_ij for small maps.

    Returns (dX (N, q), dLinv_a (q,), dLinv_b (q,)). Materializes the
    (N, N, q) z tensor, so callers should keep N modest.
    """
    Z = A[:, None, :] + B[None, :, :]  # (N, N, q) z_ij
    YZ = Z @ Y  # (N, N, q), rows (Y z)'
    r = G.sum(axis=1)
    c = G.sum(axis=0)
    S_G = float(r.sum())
    # dlogW/dv_i (i as row) = -a_i + Linv_a * (Yz); dv_i/dX_i = I.
    GYZ_row = np.einsum("ij,ijk->ik", G, YZ, optimize=True)  # (N, q)
    GYZ_col = np.einsum("ij,ijk->jk", G, YZ, optimize=True)  # (N, q)
    dX = (
        -r[:, None] * A
        + GYZ_row * Linv_a[None, :]
        - c[:, None] * B
        + GYZ_col * Linv_b[None, :]
    )
    # dlogW/dLinv_a,k = -1/2 v_ik^2 - 1/2 Y_kk - 1/2 (Yz)_k^2 + (Yz)_k v_ik
    GYZ2 = np.einsum("ij,ijk->k", G, YZ**2, optimize=True)
    dla = (
        -0.5 * (r @ VX**2)
        - 0.5 * S_G * np.diag(Y)
        - 0.5 * GYZ2
        + np.einsum("ij,ijk,ik->k", G, YZ, VX, optimize=True)
    )
    dlb = (
        -0.5 * (c @ VX**2)
        - 0.5 * S_G * np.diag(Y)
        - 0.5 * GYZ2
        + np.einsum("ij,ijk,jk->k", G, YZ, VX, optimize=True)
    )
    return dX, dla, dlb
