"""Promotion of an image-space track to a 3D world-space state.

Two fully visible detections of the same vehicle fix its heading (from the
ground displacement of their back-projected centers). With the heading held
fixed, the box center, shape and speed enter every edge constraint linearly,
which gives a small least-squares problem regularized by the class shape
prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .detection import Detection, ShapePrior
from .dynamics import DIM_3D, OMEGA, PHI, VEL
from .errors import DegenerateMotion, NonPositiveShape, SingularSystem
from .estimation import GaussianState, propagate_linear, propagate_sampled
from .geometry import (
    CORNER_SIGNS,
    CameraModel,
    OrientedBox3D,
    back_project_to_height,
    box_corners,
    project_box_outline,
)

# unknowns: (cx, cy, length, width, height, v) at the time of the first detection
THETA_DIM = 6
SHAPE_SELECTOR = np.zeros((3, THETA_DIM))
SHAPE_SELECTOR[:, 2:5] = np.eye(3)


@dataclass(frozen=True)
class InitPair:
    det_a: Detection
    det_b: Detection
    prior: ShapePrior
    detection_sigma: float = 2.0

    def __post_init__(self):
        if not (self.det_a.fully_valid and self.det_b.fully_valid):
            raise ValueError("initialization needs two fully valid detections")
        if self.tau <= 0:
            raise ValueError("detections must be strictly ordered in time")

    @property
    def tau(self) -> float:
        return self.det_b.timestamp - self.det_a.timestamp


def _ground_displacement(cam: CameraModel, samples: np.ndarray) -> np.ndarray:
    """Rows of (ua, va, ub, vb, h) -> rows of (dx, dy)."""
    out = np.empty((samples.shape[0], 2))
    for k, (ua, va, ub, vb, h) in enumerate(samples):
        pa = back_project_to_height(cam, (ua, va), 0.5 * h)
        pb = back_project_to_height(cam, (ub, vb), 0.5 * h)
        out[k] = pb[:2] - pa[:2]
    return out


def estimate_orientation(cam: CameraModel, pair: InitPair, return_displacement=False):
    """Heading and speed from the displacement of the two box centers.

    Pixel noise on the centers and the prior height variance are propagated by
    sigma-point sampling. Returns a Gaussian over ``(phi, v)``.
    """
    ca = pair.det_a.box.center
    cb = pair.det_b.box.center
    # a center coordinate is the mean of two independent edges
    var_c = 0.5 * pair.detection_sigma ** 2
    inputs = GaussianState(
        np.array([ca[0], ca[1], cb[0], cb[1], pair.prior.mean_height]),
        np.diag([var_c] * 4 + [pair.prior.covariance[2, 2]]),
    )
    disp = propagate_sampled(inputs, lambda s: _ground_displacement(cam, s))
    delta = _ground_displacement(cam, inputs.mean[None, :])[0]
    dist = float(np.hypot(*delta))
    pos_sigma = math.sqrt(max(np.linalg.eigvalsh(disp.cov)[-1], 0.0))
    if dist < 3.0 * pos_sigma or dist == 0.0:
        raise DegenerateMotion(
            f"ground displacement {dist:.3f} m below 3 sigma ({pos_sigma:.3f} m)")
    tau = pair.tau
    # (dx, dy) -> (phi, v), linearized at the displacement mean
    J = np.array([
        [-delta[1] / dist ** 2, delta[0] / dist ** 2],
        [delta[0] / (dist * tau), delta[1] / (dist * tau)],
    ])
    out = GaussianState(np.array([math.atan2(delta[1], delta[0]), dist / tau]),
                        J @ disp.cov @ J.T)
    if return_displacement:
        return out, GaussianState(delta, disp.cov)
    return out


def prior_boxes(cam: CameraModel, pair: InitPair, phi: float):
    """Prior-shape boxes standing at the back-projected detection centers."""
    h = pair.prior.mean_height
    boxes = []
    for det in (pair.det_a, pair.det_b):
        c = back_project_to_height(cam, det.box.center, 0.5 * h)
        boxes.append(OrientedBox3D(tuple(c), tuple(pair.prior.mean_shape), phi))
    return boxes


def active_corners(cam: CameraModel, pair: InitPair, phi: float):
    """Active corner indices (t, l, b, r) and their CCS depths for both prior boxes."""
    result = []
    for box in prior_boxes(cam, pair, phi):
        _, idx = project_box_outline(cam, box)
        corners = box_corners(box)
        depths = cam.to_ccs(corners[list(idx)])[:, 2]
        result.append((idx, depths))
    return result


def corner_affine_map(phi: float, signs, tau_v: float = 0.0):
    """WCS position of one box corner as ``A @ theta``.

    ``tau_v`` is the elapsed time for the second detection, whose center is
    displaced by ``tau * v`` along the heading.
    """
    c, s = math.cos(phi), math.sin(phi)
    sl, sw, sh = signs
    A = np.zeros((3, THETA_DIM))
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    A[0, 2], A[1, 2] = 0.5 * sl * c, 0.5 * sl * s
    A[0, 3], A[1, 3] = -0.5 * sw * s, 0.5 * sw * c
    A[2, 4] = 0.5 * (1.0 + sh)
    A[0, 5], A[1, 5] = tau_v * c, tau_v * s
    return A


def build_ls_system(cam: CameraModel, pair: InitPair, phi: float, corners=None):
    """Linear edge constraints ``M @ theta = b`` for both detections.

    Each edge contributes ``(K_row - pixel * K_2) @ x_ccs(corner) = 0`` where
    the corner is the edge's active corner; rows are scaled by that corner's
    depth in the prior box so residuals read as pixels.
    """
    if corners is None:
        corners = active_corners(cam, pair, phi)
    M = np.zeros((8, THETA_DIM))
    b = np.zeros(8)
    row = 0
    for (det, tau), (idx, depths) in zip(((pair.det_a, 0.0), (pair.det_b, pair.tau)), corners):
        pixels = det.box.as_array()
        for e in range(4):
            k_row = cam.K[1] if e in (0, 2) else cam.K[0]
            g = k_row - pixels[e] * cam.K[2]
            A = corner_affine_map(phi, CORNER_SIGNS[idx[e]], tau)
            scale = 1.0 / depths[e]
            gw = g @ cam.R_wc
            M[row] = scale * (gw @ A)
            b[row] = -scale * (g @ cam.t_wc)
            row += 1
    return M, b


def solve_regularized(M, b, prior: ShapePrior, detection_sigma: float) -> GaussianState:
    """Minimize the sigma-weighted edge residuals plus the shape prior term.

    Solved through the normal equations; the returned covariance is the inverse
    of the combined information matrix.
    """
    M = np.asarray(M, dtype=float)
    b = np.asarray(b, dtype=float)
    w_det = 1.0 / detection_sigma ** 2
    prior_info = np.linalg.inv(prior.covariance)
    S = SHAPE_SELECTOR
    info = w_det * M.T @ M + S.T @ prior_info @ S
    rhs = w_det * M.T @ b + S.T @ prior_info @ prior.mean_shape
    try:
        c = linalg.cho_factor(info, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystem("information matrix is singular") from exc
    if np.linalg.cond(info) > 1e15:
        raise SingularSystem("information matrix is numerically singular")
    theta = linalg.cho_solve(c, rhs, check_finite=False)
    cov = linalg.cho_solve(c, np.eye(THETA_DIM), check_finite=False)
    sol = GaussianState(theta, cov)
    if np.any(theta[2:5] <= 0):
        raise NonPositiveShape(f"solved shape {theta[2:5]} not positive", solution=sol)
    return sol


def objective(theta, M, b, prior: ShapePrior, detection_sigma: float) -> float:
    r = M @ theta - b
    d = theta[2:5] - prior.mean_shape
    return float(r @ r / detection_sigma ** 2 + d @ np.linalg.solve(prior.covariance, d))


def initialize_3d(cam: CameraModel, pair: InitPair, omega_sigma: float = 0.3,
                  orientation: GaussianState | None = None) -> GaussianState:
    """3D state Gaussian at the time of ``pair.det_b``."""
    if orientation is None:
        orientation = estimate_orientation(cam, pair)
    phi = float(orientation.mean[0])
    M, b = build_ls_system(cam, pair, phi)
    try:
        sol = solve_regularized(M, b, pair.prior, pair.detection_sigma)
    except NonPositiveShape as exc:
        theta = exc.solution.mean.copy()
        theta[2:5] = pair.prior.mean_shape
        cov = exc.solution.cov.copy()
        cov[2:5, :] = 0.0
        cov[:, 2:5] = 0.0
        cov[2:5, 2:5] = pair.prior.covariance
        sol = GaussianState(theta, cov)
    # move the center to the second detection: c_b = c_a + tau * v * heading
    tau = pair.tau
    A = np.eye(THETA_DIM)
    A[0, 5] = tau * math.cos(phi)
    A[1, 5] = tau * math.sin(phi)
    moved = propagate_linear(sol, A)
    mean = np.zeros(DIM_3D)
    cov = np.zeros((DIM_3D, DIM_3D))
    keep = [0, 1, 2, 3, 4, VEL]
    mean[keep] = moved.mean
    cov[np.ix_(keep, keep)] = moved.cov
    mean[PHI] = phi
    cov[PHI, PHI] = orientation.cov[0, 0]
    mean[OMEGA] = 0.0
    cov[OMEGA, OMEGA] = omega_sigma ** 2
    return GaussianState(mean, cov)
