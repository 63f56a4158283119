"""Gaussian error propagation and Kalman filter steps (EKF and UKF)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import CovarianceNotPSD, InnovationCovSingular
from .geometry import wrap_angle

JITTER = 1e-9


@dataclass(frozen=True, eq=False)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float).reshape(mean.size, mean.size)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @classmethod
    def trusted(cls, mean: np.ndarray, cov: np.ndarray) -> "GaussianState":
        """Wrap arrays that are already float, shaped and symmetric, without copying."""
        g = object.__new__(cls)
        object.__setattr__(g, "mean", mean)
        object.__setattr__(g, "cov", cov)
        return g

    @property
    def dim(self) -> int:
        return self.mean.size

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True, eq=False)
class SigmaPointSet:
    points: np.ndarray          # (2n+1, n), row 0 is the mean
    mean_weights: np.ndarray
    cov_weights: np.ndarray


# ---------------------------------------------------------------------------
# direct, linearized and sampled propagation

def propagate_linear(g: GaussianState, A, b=None) -> GaussianState:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    mean = A @ g.mean
    if b is not None:
        mean = mean + np.asarray(b, dtype=float)
    return GaussianState(mean, A @ g.cov @ A.T)


def propagate_jacobian(g: GaussianState, f, J) -> GaussianState:
    """First-order propagation: mean through ``f``, covariance through ``J``."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    return GaussianState(np.atleast_1d(f(g.mean)), J @ g.cov @ J.T)


def sigma_points(g: GaussianState, alpha=0.5, beta=2.0, kappa=0.0) -> SigmaPointSet:
    """Scaled unscented transform points and weights."""
    n = g.dim
    lam = alpha * alpha * (n + kappa) - n
    L = _sqrt_psd((n + lam) * g.cov)
    points = np.empty((2 * n + 1, n))
    points[0] = g.mean
    points[1:n + 1] = g.mean + L.T
    points[n + 1:] = g.mean - L.T
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - alpha * alpha + beta
    return SigmaPointSet(points, wm, wc)


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; one symmetrize-and-jitter repair, then give up."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    C = 0.5 * (C + C.T) + JITTER * np.eye(C.shape[0])
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise CovarianceNotPSD("covariance is not positive semi-definite") from exc


def weighted_mean(points: np.ndarray, wm: np.ndarray, angle_dims=()) -> np.ndarray:
    mean = wm @ points
    for d in angle_dims:
        mean[d] = np.arctan2(wm @ np.sin(points[:, d]), wm @ np.cos(points[:, d]))
    return mean


def residuals(points: np.ndarray, mean: np.ndarray, angle_dims=()) -> np.ndarray:
    res = points - mean
    for d in angle_dims:
        res[:, d] = wrap_angle(res[:, d])
    return res


def unscented_transform(sp: SigmaPointSet, f, angle_dims=()):
    """Push sigma points through ``f`` (vectorized over rows).

    Returns the output Gaussian plus the transformed points and residuals.
    """
    y = np.atleast_2d(f(sp.points))
    if y.shape[0] != sp.points.shape[0]:
        y = y.T
    mean = weighted_mean(y, sp.mean_weights, angle_dims)
    res = residuals(y, mean, angle_dims)
    cov = (res * sp.cov_weights[:, None]).T @ res
    return GaussianState(mean, cov), y, res


def propagate_sampled(g: GaussianState, f, angle_dims=(), alpha=1.0, beta=2.0,
                      kappa=None) -> GaussianState:
    """Sampling-based propagation of ``g`` through a nonlinear map ``f``."""
    if kappa is None:
        kappa = max(3.0 - g.dim, 0.0)
    out, _, _ = unscented_transform(sigma_points(g, alpha, beta, kappa), f, angle_dims)
    return out


# ---------------------------------------------------------------------------
# filters

def ekf_predict(g: GaussianState, f, F, Q) -> GaussianState:
    out = propagate_jacobian(g, f, F)
    return GaussianState(out.mean, out.cov + Q)


def ekf_update(g: GaussianState, h, H, z, R) -> GaussianState:
    """EKF measurement update with the Joseph-form covariance."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    y = np.atleast_1d(np.asarray(z, dtype=float) - h(g.mean))
    PHt = g.cov @ H.T
    S = H @ PHt + R
    K = _gain(PHt, S)
    IKH = np.eye(g.dim) - K @ H
    cov = IKH @ g.cov @ IKH.T + K @ R @ K.T
    return GaussianState(g.mean + K @ y, cov)


def _gain(cross: np.ndarray, S: np.ndarray) -> np.ndarray:
    """cross @ inv(S) for symmetric positive-definite S."""
    S = 0.5 * (S + S.T)
    try:
        c = linalg.cho_factor(S, check_finite=False)
    except linalg.LinAlgError as exc:
        raise InnovationCovSingular("innovation covariance is singular") from exc
    if np.min(np.abs(np.diag(c[0]))) < 1e-12 * max(1.0, np.sqrt(np.max(np.abs(np.diag(S))))):
        raise InnovationCovSingular("innovation covariance is singular")
    return linalg.cho_solve(c, cross.T, check_finite=False).T


def ukf_predict(g: GaussianState, f, Q, angle_dims=(), alpha=0.5, beta=2.0,
                kappa=0.0) -> GaussianState:
    sp = sigma_points(g, alpha, beta, kappa)
    out, _, _ = unscented_transform(sp, f, angle_dims)
    return GaussianState(out.mean, out.cov + Q)


def ukf_update(g: GaussianState, h, z, R, angle_dims=(), z_angle_dims=(),
               alpha=0.5, beta=2.0, kappa=0.0) -> GaussianState:
    """Unscented measurement update.

    ``h`` maps an ``(k, n)`` array of states to ``(k, m)`` measurements.
    """
    sp = sigma_points(g, alpha, beta, kappa)
    pred, _, zres = unscented_transform(sp, h, z_angle_dims)
    S = pred.cov + np.atleast_2d(R)
    xres = residuals(sp.points, g.mean, angle_dims)
    cross = (xres * sp.cov_weights[:, None]).T @ zres
    K = _gain(cross, S)
    innov = np.atleast_1d(np.asarray(z, dtype=float) - pred.mean)
    for d in z_angle_dims:
        innov[d] = wrap_angle(innov[d])
    mean = g.mean + K @ innov
    for d in angle_dims:
        mean[d] = wrap_angle(mean[d])
    cov = g.cov - K @ S @ K.T
    return GaussianState(mean, cov)


# ---------------------------------------------------------------------------
# batched UKF: every array carries a leading track axis

def sigma_points_batch(means, covs, alpha=0.5, beta=2.0, kappa=0.0):
    """Sigma points ``(T, 2n+1, n)`` and shared weights for ``T`` Gaussians.

    Raises CovarianceNotPSD if any covariance lacks a Cholesky factor; callers
    fall back to the per-state path, which applies the jitter repair.
    """
    T, n = means.shape
    lam = alpha * alpha * (n + kappa) - n
    try:
        L = np.linalg.cholesky((n + lam) * covs)
    except np.linalg.LinAlgError as exc:
        raise CovarianceNotPSD("batched Cholesky failed") from exc
    Lt = np.swapaxes(L, 1, 2)
    pts = np.empty((T, 2 * n + 1, n))
    pts[:, 0] = means
    pts[:, 1:n + 1] = means[:, None, :] + Lt
    pts[:, n + 1:] = means[:, None, :] - Lt
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - alpha * alpha + beta
    return pts, wm, wc


def _batch_moments(y, wm, wc, angle_dims=()):
    mean = wm @ y
    for d in angle_dims:
        mean[:, d] = np.arctan2(np.sin(y[..., d]) @ wm, np.cos(y[..., d]) @ wm)
    res = y - mean[:, None, :]
    for d in angle_dims:
        res[..., d] = wrap_angle(res[..., d])
    cov = np.swapaxes(res * wc[:, None], 1, 2) @ res
    return mean, res, cov


def ukf_predict_batch(means, covs, f, Q, angle_dims=(), alpha=0.5, beta=2.0, kappa=0.0):
    """Batched ``ukf_predict``; ``f`` maps ``(T, k, n)`` to ``(T, k, n)``."""
    pts, wm, wc = sigma_points_batch(means, covs, alpha, beta, kappa)
    mean, _, cov = _batch_moments(f(pts), wm, wc, angle_dims)
    cov = cov + Q
    return mean, 0.5 * (cov + np.swapaxes(cov, 1, 2))


def ukf_update_batch(means, covs, h, z, R, angle_dims=(), alpha=0.5, beta=2.0, kappa=0.0,
                     mask=None):
    """Batched ``ukf_update`` for measurements without angular components.

    ``mask`` (T, m) selects the measurement components each state actually
    observes. Unobserved components get an identity block in the innovation
    covariance and zero cross covariance, which makes the result identical to
    updating with the observed components alone.
    """
    pts, wm, wc = sigma_points_batch(means, covs, alpha, beta, kappa)
    zmean, zres, S = _batch_moments(h(pts), wm, wc)
    S = S + R
    xres = pts - means[:, None, :]
    for d in angle_dims:
        xres[..., d] = wrap_angle(xres[..., d])
    cross = np.swapaxes(xres * wc[:, None], 1, 2) @ zres
    innov = z - zmean
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        both = mask[:, :, None] & mask[:, None, :]
        S = np.where(both, S, np.eye(S.shape[-1]))
        cross = np.where(mask[:, None, :], cross, 0.0)
        innov = np.where(mask, innov, 0.0)
    try:
        np.linalg.cholesky(S)
        K = np.swapaxes(np.linalg.solve(S, np.swapaxes(cross, 1, 2)), 1, 2)
    except np.linalg.LinAlgError as exc:
        raise InnovationCovSingular("batched innovation covariance is singular") from exc
    mean = means + (K @ innov[..., None])[..., 0]
    for d in angle_dims:
        mean[:, d] = wrap_angle(mean[:, d])
    cov = covs - K @ S @ np.swapaxes(K, 1, 2)
    return mean, 0.5 * (cov + np.swapaxes(cov, 1, 2))


def nees(g: GaussianState, truth, angle_dims=()) -> float:
    """Normalized estimation error squared of ``truth`` under ``g``."""
    e = np.asarray(truth, dtype=float) - g.mean
    for d in angle_dims:
        e[d] = wrap_angle(e[d])
    return float(e @ np.linalg.solve(g.cov, e))
