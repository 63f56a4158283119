"""State layouts, motion models and observation models of both tracking stages.

States are plain float arrays so the filters can push whole sigma-point sets
(shape ``(k, n)``) through the models in one call. ``State2D``/``State3D``
are named views for readability at API boundaries.

2D stage (image space, 10 dims)::

    [cx, cy, sw, sh, vx, vy, dsw, dsh, ax, ay]

3D stage (world space, 8 dims)::

    [cx, cy, length, width, height, phi, v, omega]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, NoValidEdges, PointBehindCamera
from .geometry import (
    CORNER_SIGNS,
    MIN_DEPTH,
    Box2D,
    CameraModel,
    OrientedBox3D,
    outline_from_pixels,
    project_box_outline,
    wrap_angle,
)

DIM_2D = 10
DIM_3D = 8

C2, S2, V2, DS2, A2 = slice(0, 2), slice(2, 4), slice(4, 6), slice(6, 8), slice(8, 10)
C3, S3 = slice(0, 2), slice(2, 5)
PHI, VEL, OMEGA = 5, 6, 7

SMALL_OMEGA = 1e-6

# observe_2d is this selector applied to the state
H_2D = np.zeros((4, DIM_2D))
H_2D[:, :4] = np.eye(4)
H_2D.setflags(write=False)


@dataclass(frozen=True)
class State2D:
    c: tuple[float, float]
    s: tuple[float, float]
    v: tuple[float, float] = (0.0, 0.0)
    ds: tuple[float, float] = (0.0, 0.0)
    a: tuple[float, float] = (0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([*self.c, *self.s, *self.v, *self.ds, *self.a], dtype=float)

    @classmethod
    def from_array(cls, x) -> "State2D":
        x = [float(e) for e in x]
        return cls(tuple(x[0:2]), tuple(x[2:4]), tuple(x[4:6]), tuple(x[6:8]), tuple(x[8:10]))


@dataclass(frozen=True)
class State3D:
    c: tuple[float, float]
    s: tuple[float, float, float]
    phi: float
    v: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([*self.c, *self.s, self.phi, self.v, self.omega], dtype=float)

    @classmethod
    def from_array(cls, x) -> "State3D":
        x = [float(e) for e in x]
        return cls(tuple(x[0:2]), tuple(x[2:5]), x[5], x[6], x[7])

    def box(self) -> OrientedBox3D:
        return box_from_state3d(self.as_array())


# ---------------------------------------------------------------------------
# 2D stage

def transition_2d(x, tau: float) -> np.ndarray:
    """Accelerated translation plus exponential scale change over ``tau`` seconds."""
    x = np.asarray(x, dtype=float)
    out = x.copy()
    v, a = x[..., V2], x[..., A2]
    out[..., C2] = x[..., C2] + v * tau + 0.5 * a * tau * tau
    out[..., S2] = x[..., S2] * np.exp(x[..., DS2] * tau)
    out[..., V2] = v + a * tau
    return out


def transition_2d_jacobian(x, tau: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    F = np.eye(DIM_2D)
    i2 = np.eye(2)
    F[C2, V2] = tau * i2
    F[C2, A2] = 0.5 * tau * tau * i2
    F[V2, A2] = tau * i2
    growth = np.exp(x[DS2] * tau)
    F[S2, S2] = np.diag(growth)
    F[S2, DS2] = np.diag(x[S2] * tau * growth)
    return F


def observe_2d(x) -> np.ndarray:
    """Box center and size ``(cx, cy, sw, sh)``."""
    return np.asarray(x, dtype=float)[..., :4].copy()


def box_from_cs(c, s) -> Box2D:
    cx, cy = float(c[0]), float(c[1])
    w, h = float(s[0]), float(s[1])
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"non-positive size {(w, h)}")
    return Box2D(cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w)


def cs_from_box(box: Box2D):
    w, h = box.r - box.l, box.b - box.t
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"box {box} has zero area")
    return (np.array([0.5 * (box.l + box.r), 0.5 * (box.t + box.b)]), np.array([w, h]))


# ---------------------------------------------------------------------------
# 3D stage

def transition_3d(x, tau: float) -> np.ndarray:
    """Coordinated turn: constant speed and turn rate along a circular arc.

    Heading ``phi`` is measured counterclockwise from the WCS x axis and the
    vehicle moves along ``(cos phi, sin phi)``. For ``|omega| < 1e-6`` the arc
    is replaced by its chord at the midpoint heading.
    """
    x = np.asarray(x, dtype=float)
    out = x.copy()
    phi, v, w = x[..., PHI], x[..., VEL], x[..., OMEGA]
    phi_end = phi + w * tau
    small = np.abs(w) < SMALL_OMEGA
    if small.any():
        safe_w = np.where(small, 1.0, w)
        mid = phi + 0.5 * w * tau
        dx = np.where(small, v * tau * np.cos(mid), v / safe_w * (np.sin(phi_end) - np.sin(phi)))
        dy = np.where(small, v * tau * np.sin(mid), v / safe_w * (np.cos(phi) - np.cos(phi_end)))
    else:
        k = v / w
        dx = k * (np.sin(phi_end) - np.sin(phi))
        dy = k * (np.cos(phi) - np.cos(phi_end))
    out[..., 0] += dx
    out[..., 1] += dy
    out[..., PHI] = wrap_angle(phi_end)
    return out


def box_from_state3d(x) -> OrientedBox3D:
    x = np.asarray(x, dtype=float)
    return OrientedBox3D((x[0], x[1], 0.5 * x[4]), tuple(x[S3]), x[PHI])


def state_corners(x) -> np.ndarray:
    """WCS corners of the box described by state(s) ``x``: (..., 8, 3)."""
    x = np.asarray(x, dtype=float)
    half = 0.5 * x[..., None, S3] * CORNER_SIGNS          # (..., 8, 3) in VCS
    c, s = np.cos(x[..., PHI])[..., None], np.sin(x[..., PHI])[..., None]
    out = np.empty(half.shape)
    out[..., 0] = c * half[..., 0] - s * half[..., 1] + x[..., 0, None]
    out[..., 1] = s * half[..., 0] + c * half[..., 1] + x[..., 1, None]
    out[..., 2] = half[..., 2] + 0.5 * x[..., 4, None]
    return out


def _corner_uv(cam: CameraModel, x):
    """Pixel coordinates ``u, v`` of the corners of state(s) ``x``.

    Both outputs have shape (8, N) with the leading state dims flattened to
    N. Every corner's homogeneous pixel and depth is linear in the features
    ``(cx, cy, h/2, 1, c*l/2, s*l/2, c*w/2, s*w/2)``, so one product with the
    camera's constant (32, 8) corner matrix projects the whole batch.
    """
    xt = np.asarray(x, dtype=float).reshape(-1, DIM_3D).T
    c, s = np.cos(xt[PHI]), np.sin(xt[PHI])
    hl, hw = 0.5 * xt[2], 0.5 * xt[3]
    feats = np.stack([xt[0], xt[1], 0.5 * xt[4], np.ones_like(c),
                      c * hl, s * hl, c * hw, s * hw])
    p = (cam.corner_matrix @ feats).reshape(8, 4, -1)
    if np.any(p[:, 3] <= MIN_DEPTH):
        raise PointBehindCamera("box corner at or behind the image plane")
    return p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]


def observe_3d_batch(cam: CameraModel, x):
    """Vectorized outline projection for states of shape (..., 8).

    Returns the (..., 4) outlines (t, l, b, r) and the active corner indices.
    """
    lead = np.shape(x)[:-1]
    u, v = _corner_uv(cam, x)
    px = np.stack([u.T, v.T], -1).reshape(*lead, 8, 2)
    return outline_from_pixels(px)


def outline_3d(cam: CameraModel, x) -> np.ndarray:
    """Outline (t, l, b, r) only, for states of shape (..., 8)."""
    lead = np.shape(x)[:-1]
    u, v = _corner_uv(cam, x)
    out = np.stack([v.min(0), u.min(0), v.max(0), u.max(0)], -1)
    return out.reshape(*lead, 4)


def observe_3d(cam: CameraModel, x):
    """Projected outline ``(t, l, b, r)`` of the state's box and its active corners."""
    box, active = project_box_outline(cam, box_from_state3d(x))
    return box.as_array(), active


def observe_3d_masked(cam: CameraModel, x, edge_valid) -> np.ndarray:
    """Outline components of the valid edges only, in (t, l, b, r) order."""
    mask = np.asarray(edge_valid, dtype=bool)
    if not mask.any():
        raise NoValidEdges("all four edges are invalid")
    tlbr, _ = observe_3d(cam, x)
    return tlbr[mask]


# ---------------------------------------------------------------------------
# process noise

def process_noise_2d(x, tau: float, q_jerk: float = 50.0, q_scale: float = 0.1) -> np.ndarray:
    """Discretized white noise on the acceleration and log-scale-rate derivatives.

    The scale block is integrated along the mean trajectory (``x`` is the
    state at the start of the interval), which makes repeated short
    predictions agree exactly with one long one.
    """
    x = np.asarray(x, dtype=float)
    t2, t3 = tau * tau, tau ** 3
    Q = np.zeros((DIM_2D, DIM_2D))
    blk = q_jerk * np.array([
        [tau ** 5 / 20.0, tau ** 4 / 8.0, t3 / 6.0],
        [tau ** 4 / 8.0, t3 / 3.0, t2 / 2.0],
        [t3 / 6.0, t2 / 2.0, tau],
    ])
    for axis in range(2):
        idx = [0 + axis, 4 + axis, 8 + axis]
        Q[np.ix_(idx, idx)] = blk
        s_end = x[2 + axis] * np.exp(x[6 + axis] * tau)
        i_s, i_ds = 2 + axis, 6 + axis
        Q[i_s, i_s] = q_scale * s_end * s_end * t3 / 3.0
        Q[i_s, i_ds] = Q[i_ds, i_s] = q_scale * s_end * t2 / 2.0
        Q[i_ds, i_ds] = q_scale * tau
    return Q


def process_noise_3d(tau: float, q_v: float = 2.0, q_omega: float = 2.0,
                     q_shape: float = 1e-4) -> np.ndarray:
    """Random-walk noise on shape, speed and turn rate, proportional to ``tau``."""
    diag = np.zeros(DIM_3D)
    diag[S3] = q_shape
    diag[VEL] = q_v
    diag[OMEGA] = q_omega
    return np.diag(diag * tau)
