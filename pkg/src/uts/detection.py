"""Detection ingestion, class shape priors and per-edge validity."""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import Box2D

logger = logging.getLogger(__name__)


class ObjectClass(str, enum.Enum):
    CAR = "CAR"
    TRUCK = "TRUCK"
    BUS = "BUS"
    OTHER = "OTHER"


VEHICLE_CLASSES = (ObjectClass.CAR, ObjectClass.TRUCK, ObjectClass.BUS)
ALL_VALID = (True, True, True, True)


@dataclass(frozen=True)
class Detection:
    box: Box2D
    class_label: ObjectClass
    score: float = 1.0
    edge_valid: tuple[bool, bool, bool, bool] = ALL_VALID
    timestamp: float = 0.0
    frame: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")

    @property
    def fully_valid(self) -> bool:
        return all(self.edge_valid)

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(
            box=Box2D(float(rec["t"]), float(rec["l"]), float(rec["b"]), float(rec["r"])),
            class_label=ObjectClass(rec["class"]),
            score=float(rec.get("score", 1.0)),
            timestamp=float(rec["time"]),
            frame=int(rec["frame"]),
        )

    def to_record(self) -> dict:
        return {
            "frame": self.frame,
            "time": self.timestamp,
            "t": self.box.t,
            "l": self.box.l,
            "b": self.box.b,
            "r": self.box.r,
            "class": self.class_label.value,
            "score": self.score,
        }


@dataclass(frozen=True, eq=False)
class ShapePrior:
    """Gaussian prior over (length, width, height) in meters."""

    mean_shape: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=float).reshape(3)
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if np.any(mean <= 0):
            raise ValueError("prior mean shape must be positive")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("prior covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise ValueError("prior covariance must be positive definite")
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def from_std(cls, mean, std) -> "ShapePrior":
        return cls(np.asarray(mean, dtype=float), np.diag(np.square(std)))

    @property
    def mean_height(self) -> float:
        return float(self.mean_shape[2])


_DEFAULT_PRIORS = {
    ObjectClass.CAR: ((4.5, 1.8, 1.5), (0.5, 0.2, 0.2)),
    ObjectClass.TRUCK: ((7.0, 2.5, 3.0), (1.5, 0.3, 0.5)),
    ObjectClass.BUS: ((12.0, 2.5, 3.2), (1.0, 0.3, 0.3)),
}


def default_priors(overrides_path=None) -> dict[ObjectClass, ShapePrior]:
    """Per-class shape priors; entries in the optional JSON file replace defaults."""
    priors = {c: ShapePrior.from_std(m, s) for c, (m, s) in _DEFAULT_PRIORS.items()}
    if overrides_path is not None:
        priors.update(load_prior_overrides(overrides_path))
    return priors


def load_prior_overrides(path) -> dict[ObjectClass, ShapePrior]:
    try:
        data = json.loads(Path(path).read_text())
        return {
            ObjectClass(name): ShapePrior(np.asarray(entry["mean"], dtype=float),
                                          np.reshape(entry["cov"], (3, 3)))
            for name, entry in data.items()
        }
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"cannot load priors {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# polygons

def points_in_polygon(pts, poly) -> np.ndarray:
    """Even-odd rule for many points at once; boundary points count as inside."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    poly = np.asarray(poly, dtype=float)
    x, y = pts[:, 0:1], pts[:, 1:2]                       # (N, 1) against (V,) edges
    x1, y1 = poly[:, 0], poly[:, 1]
    nxt = np.r_[1:len(poly), 0]
    x2, y2 = x1[nxt], y1[nxt]
    dx, dy = x2 - x1, y2 - y1
    cross = dx * (y - y1) - dy * (x - x1)
    tol = 1e-9 * np.maximum(1.0, np.abs(dx) + np.abs(dy))
    on_edge = ((np.abs(cross) <= tol)
               & (x >= np.minimum(x1, x2) - 1e-12) & (x <= np.maximum(x1, x2) + 1e-12)
               & (y >= np.minimum(y1, y2) - 1e-12) & (y <= np.maximum(y1, y2) + 1e-12))
    straddle = (y1 > y) != (y2 > y)
    # the edge crosses the rightward ray iff the point is left of the upward edge
    right_of_point = np.where(dy > 0, cross > 0, cross < 0)
    crossings = np.count_nonzero(straddle & right_of_point, axis=1)
    return on_edge.any(axis=1) | (crossings % 2 == 1)


def point_in_polygon(pt, poly) -> bool:
    """Even-odd rule; points on the boundary count as inside."""
    return bool(points_in_polygon([pt], poly)[0])


def segment_inside_fraction(p0, p1, poly) -> float:
    """Fraction of the segment p0-p1 lying inside (or on) a simple polygon."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    if not d.any():
        return 1.0 if point_in_polygon(p0, poly) else 0.0
    poly = np.asarray(poly, dtype=float)
    e = np.roll(poly, -1, axis=0) - poly
    w = poly - p0
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    ok = np.abs(denom) >= 1e-15
    safe = np.where(ok, denom, 1.0)
    s = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / safe
    u = (w[:, 0] * d[1] - w[:, 1] * d[0]) / safe
    hit = ok & (s > 0.0) & (s < 1.0) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    # collinear overlaps are caught by the midpoint test of each piece
    params = np.unique(np.concatenate([[0.0, 1.0], s[hit]]))
    mids = p0 + 0.5 * (params[:-1] + params[1:])[:, None] * d
    inside = points_in_polygon(mids, poly)
    return float(np.sum(np.diff(params)[inside]))


@dataclass(frozen=True)
class SceneMask:
    """Detection area and static occluder polygons, all in pixels."""

    detection_area: tuple
    occluder_regions: tuple = ()

    def __post_init__(self):
        area = tuple(tuple(map(float, p)) for p in self.detection_area)
        occ = tuple(tuple(tuple(map(float, p)) for p in poly) for poly in self.occluder_regions)
        for poly in (area, *occ):
            if len(poly) < 3:
                raise ValueError("polygons need at least 3 vertices")
        object.__setattr__(self, "detection_area", area)
        object.__setattr__(self, "occluder_regions", occ)
        object.__setattr__(self, "_occluder_bounds", tuple(
            (min(p[0] for p in poly), min(p[1] for p in poly),
             max(p[0] for p in poly), max(p[1] for p in poly)) for poly in occ))

    @classmethod
    def full_image(cls, image_size) -> "SceneMask":
        w, h = image_size
        return cls(((0, 0), (w, 0), (w, h), (0, h)))

    @classmethod
    def from_json(cls, path) -> "SceneMask":
        try:
            data = json.loads(Path(path).read_text())
            return cls(data["detection_area"], data.get("occluders", []))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise InputError(f"cannot load mask {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "detection_area": [list(p) for p in self.detection_area],
            "occluders": [[list(p) for p in poly] for poly in self.occluder_regions],
        }

    def in_detection_area(self, pt) -> bool:
        return point_in_polygon(pt, self.detection_area)


def filter_detections(raw, mask: SceneMask) -> list[Detection]:
    """Keep vehicle detections whose box center lies in the detection area."""
    dets = [d for d in raw if d.class_label in VEHICLE_CLASSES]
    if not dets:
        return []
    centers = [d.box.center for d in dets]
    keep = points_in_polygon(centers, mask.detection_area)
    return [d for d, k in zip(dets, keep) if k]


def edge_segments(box: Box2D):
    """End points of the (t, l, b, r) edges."""
    return (
        ((box.l, box.t), (box.r, box.t)),
        ((box.l, box.t), (box.l, box.b)),
        ((box.l, box.b), (box.r, box.b)),
        ((box.r, box.t), (box.r, box.b)),
    )


def mark_edge_validity(det: Detection, mask: SceneMask, image_size,
                       border_px: float = 10.0) -> Detection:
    """Flag edges near the image border or mostly covered by an occluder.

    Validity is recomputed from scratch, so the call is idempotent.
    """
    return mark_edge_validity_all([det], mask, image_size, border_px)[0]


def mark_edge_validity_all(dets, mask: SceneMask, image_size,
                           border_px: float = 10.0) -> list[Detection]:
    """``mark_edge_validity`` for a whole frame, vectorized over detections."""
    if not dets:
        return []
    w, h = image_size
    tlbr = np.array([(d.box.t, d.box.l, d.box.b, d.box.r) for d in dets])
    t, l, b, r = tlbr.T
    valid = np.stack([t, l, h - b, w - r], axis=1) >= border_px
    # edge bounding boxes: (N, 4 edges) each for x0, x1, y0, y1
    ex0 = np.stack([l, l, l, r], axis=1)
    ex1 = np.stack([r, l, r, r], axis=1)
    ey0 = np.stack([t, t, b, t], axis=1)
    ey1 = np.stack([t, b, b, b], axis=1)
    for poly, (px0, py0, px1, py1) in zip(mask.occluder_regions, mask._occluder_bounds):
        near = valid & (ex1 >= px0) & (ex0 <= px1) & (ey1 >= py0) & (ey0 <= py1)
        for i, k in zip(*np.nonzero(near)):
            p0, p1 = edge_segments(dets[i].box)[k]
            if segment_inside_fraction(p0, p1, poly) > 0.5:
                valid[i, k] = False
    out = []
    for det, row in zip(dets, valid.tolist()):
        flags = tuple(row)
        out.append(det if flags == det.edge_valid else replace(det, edge_valid=flags))
    return out


def read_detections(path):
    """Parse a detections JSON Lines file.

    Returns the detections grouped per frame as ``{frame: (time, [Detection])}``
    and the number of lines that failed to parse.
    """
    frames: dict[int, tuple[float, list[Detection]]] = {}
    bad = 0
    try:
        fh = open(path)
    except OSError as exc:
        raise InputError(f"cannot open detections {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                det = Detection.from_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("%s:%d: skipping malformed detection (%s)", path, lineno, exc)
                bad += 1
                continue
            time, dets = frames.setdefault(det.frame, (det.timestamp, []))
            dets.append(det)
    return frames, bad
