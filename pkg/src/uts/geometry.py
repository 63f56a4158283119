"""Camera model, coordinate transforms and box geometry.

Conventions
-----------
World (WCS): right-handed, z is the street-plane normal, the street is z = 0.
Camera (CCS): x right, y down, z along the optical axis.
Image (ICS): origin top-left, u to the right, v downward, so ``top`` is the
smallest v of a box.

The extrinsic matrix ``P`` maps homogeneous CCS points to WCS,
``x_wcs = P @ [x_ccs, 1]``. Its inverse is cached on construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InputError,
    IntersectionBehindCamera,
    PointBehindCamera,
    RayParallelToPlane,
)

MIN_DEPTH = 1e-9

# Corner i has sign pattern (sigma_l, sigma_w, sigma_h) taken from the bits of
# i (most significant first), bit 0 -> -1 and bit 1 -> +1.
CORNER_SIGNS = np.array(
    [[1 if (i >> k) & 1 else -1 for k in (2, 1, 0)] for i in range(8)],
    dtype=float,
)

EDGES = ("t", "l", "b", "r")


def wrap_angle(a):
    """Wrap angle(s) to the half-open interval (-pi, pi]."""
    w = -(np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi) - np.pi)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rot_z(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box given by its top, left, bottom and right edges."""

    t: float
    l: float
    b: float
    r: float

    def __post_init__(self):
        # any inf or nan makes the sum non-finite
        if not math.isfinite(self.t + self.l + self.b + self.r):
            raise ValueError(f"non-finite box {(self.t, self.l, self.b, self.r)}")
        if self.t > self.b or self.l > self.r:
            raise ValueError(f"inverted box {(self.t, self.l, self.b, self.r)}")

    @classmethod
    def from_array(cls, a) -> "Box2D":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.l, self.b, self.r])

    @property
    def width(self) -> float:
        return self.r - self.l

    @property
    def height(self) -> float:
        return self.b - self.t

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.l + self.r), 0.5 * (self.t + self.b)


# Matches nothing: zero area, so its IoU with any box is 0.
EMPTY_BOX = Box2D(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class OrientedBox3D:
    """Vehicle box in the WCS: center, (length, width, height) and yaw about z."""

    center: tuple[float, float, float]
    shape: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        center = tuple(float(x) for x in self.center)
        shape = tuple(float(x) for x in self.shape)
        if len(center) != 3 or len(shape) != 3:
            raise ValueError("center and shape must have three components")
        if not all(s > 0 for s in shape):
            raise ValueError(f"shape must be positive, got {shape}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def on_ground(cls, x: float, y: float, shape, yaw: float) -> "OrientedBox3D":
        """Box resting on the street plane (center height = half the box height)."""
        return cls((x, y, 0.5 * shape[2]), shape, yaw)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Calibrated pinhole camera.

    Parameters
    ----------
    K : (3, 3) intrinsic matrix in pixels, ``K[2, 2] == 1``.
    P : (3, 4) extrinsic matrix mapping homogeneous CCS points to WCS meters.
    image_size : (width, height) in pixels.
    """

    K: np.ndarray
    P: np.ndarray
    image_size: tuple[int, int] = (960, 600)
    K_inv: np.ndarray = field(init=False, repr=False)
    R_wc: np.ndarray = field(init=False, repr=False)
    t_wc: np.ndarray = field(init=False, repr=False)
    # (32, 8) map from box features to corner pixels and depths, see dynamics
    corner_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = np.array(self.K, dtype=float).reshape(3, 3)
        P = np.array(self.P, dtype=float).reshape(3, 4)
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise ValueError("K[2][2] must be 1")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("K is singular")
        R = P[:, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotational part of P is not a proper rotation")
        K.setflags(write=False)
        P.setflags(write=False)
        R_wc = R.T.copy()
        t_wc = -R_wc @ P[:, 3]
        K_inv = np.linalg.inv(K)
        corner_matrix = _corner_matrix(K @ R_wc, K @ t_wc, R_wc[2], t_wc[2])
        for a in (R_wc, t_wc, K_inv, corner_matrix):
            a.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        object.__setattr__(self, "K_inv", K_inv)
        object.__setattr__(self, "R_wc", R_wc)
        object.__setattr__(self, "t_wc", t_wc)
        object.__setattr__(self, "corner_matrix", corner_matrix)

    @property
    def position(self) -> np.ndarray:
        """Optical center in WCS."""
        return self.P[:, 3]

    @classmethod
    def looking_at(cls, position, target, focal: float,
                   image_size=(960, 600), principal_point=None) -> "CameraModel":
        """Zero-skew camera at ``position`` whose optical axis passes through
        ``target`` (both WCS). Image rows stay parallel to the street plane."""
        position = np.asarray(position, dtype=float)
        fwd = np.asarray(target, dtype=float) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        if np.linalg.norm(right) < 1e-9:
            right = np.array([1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        P = np.column_stack([right, down, fwd, position])
        w, h = image_size
        cx, cy = principal_point if principal_point is not None else (w / 2.0, h / 2.0)
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        return cls(K, P, image_size)

    @classmethod
    def from_json(cls, path) -> "CameraModel":
        try:
            data = json.loads(Path(path).read_text())
            return cls(np.reshape(data["K"], (3, 3)), np.reshape(data["P"], (3, 4)),
                       tuple(data["image_size"]))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise InputError(f"cannot load calibration {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "K": [float(x) for x in self.K.ravel()],
            "P": [float(x) for x in self.P.ravel()],
            "image_size": list(self.image_size),
        }

    def to_ccs(self, x_wcs) -> np.ndarray:
        """WCS -> CCS for points stacked along the last axis."""
        return np.asarray(x_wcs, dtype=float) @ self.R_wc.T + self.t_wc

    def to_wcs(self, x_ccs) -> np.ndarray:
        return np.asarray(x_ccs, dtype=float) @ self.P[:, :3].T + self.P[:, 3]


def _corner_matrix(KR, Kt, r_depth, t_depth) -> np.ndarray:
    """Rows (corner k, output r) mapping box features to homogeneous pixels and depth.

    Features are ``(cx, cy, h/2, 1, c*l/2, s*l/2, c*w/2, s*w/2)`` with
    ``c, s`` the cosine and sine of the yaw; outputs per corner are the three
    homogeneous pixel coordinates followed by the CCS depth.
    """
    rows = np.vstack([KR, r_depth])
    offs = np.append(Kt, t_depth)
    m0, m1, m2 = rows[:, 0], rows[:, 1], rows[:, 2]
    A = np.zeros((8, 4, 8))
    for k, (sl, sw, sh) in enumerate(CORNER_SIGNS):
        A[k, :, 0] = m0
        A[k, :, 1] = m1
        A[k, :, 2] = m2 * (1.0 + sh)
        A[k, :, 3] = offs
        # length axis (c, s), width axis (-s, c)
        A[k, :, 4] = sl * m0
        A[k, :, 5] = sl * m1
        A[k, :, 6] = sw * m1
        A[k, :, 7] = -sw * m0
    return A.reshape(32, 8)


def project_points(cam: CameraModel, x_wcs) -> np.ndarray:
    """Project WCS points of shape (..., 3) to pixels of shape (..., 2)."""
    x_ccs = cam.to_ccs(x_wcs)
    if np.any(x_ccs[..., 2] <= MIN_DEPTH):
        raise PointBehindCamera("point at or behind the image plane")
    p = x_ccs @ cam.K.T
    return p[..., :2] / p[..., 2:3]


def project_point(cam: CameraModel, x_wcs) -> np.ndarray:
    """Pixel (u, v) of a single WCS point."""
    return project_points(cam, np.asarray(x_wcs, dtype=float).reshape(3))


def back_project_to_height(cam: CameraModel, pixel, z0: float) -> np.ndarray:
    """Intersect the viewing ray of ``pixel`` with the horizontal plane z = z0."""
    ray_ccs = cam.K_inv @ np.array([pixel[0], pixel[1], 1.0])
    d = cam.P[:, :3] @ ray_ccs
    if abs(d[2]) < 1e-12:
        raise RayParallelToPlane(f"viewing ray of {tuple(pixel)} is parallel to z={z0}")
    lam = (z0 - cam.P[2, 3]) / d[2]
    if lam * ray_ccs[2] <= MIN_DEPTH:
        raise IntersectionBehindCamera(f"ray of {tuple(pixel)} meets z={z0} behind the camera")
    x = cam.P[:, 3] + lam * d
    x[2] = z0
    return x


def corner_offsets(shape, yaw) -> np.ndarray:
    """WCS offsets of the 8 corners from the center, shape (8, 3)."""
    half = 0.5 * np.asarray(shape, dtype=float)
    return (CORNER_SIGNS * half) @ rot_z(yaw).T


def box_corners(box: OrientedBox3D) -> np.ndarray:
    return corner_offsets(box.shape, box.yaw) + np.asarray(box.center)


def outline_from_pixels(px: np.ndarray):
    """Axis-aligned frame of projected corners.

    ``px`` has shape (..., 8, 2). Returns the (..., 4) array (t, l, b, r) and
    the (..., 4) indices of the extremum corners (lowest index on ties).
    """
    u, v = px[..., 0], px[..., 1]
    idx = np.stack(
        [np.argmin(v, -1), np.argmin(u, -1), np.argmax(v, -1), np.argmax(u, -1)], -1
    )
    tlbr = np.stack([v.min(-1), u.min(-1), v.max(-1), u.max(-1)], -1)
    return tlbr, idx


def project_box_outline(cam: CameraModel, box: OrientedBox3D):
    """Projected 2D frame of a 3D box and the active corner per edge (t, l, b, r)."""
    px = project_points(cam, box_corners(box))
    tlbr, idx = outline_from_pixels(px)
    return Box2D.from_array(tlbr), tuple(int(i) for i in idx)
