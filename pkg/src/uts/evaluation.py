"""3D-IoU matching of tracker output against ground truth, CLEAR-MOT metrics."""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .association import SENTINEL_COST, assign
from .errors import EmptyGroundTruth, InputError, UTSError
from .geometry import CameraModel, OrientedBox3D, project_point

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.25, 0.1)


# ---------------------------------------------------------------------------
# geometry

def footprint(box: OrientedBox3D) -> np.ndarray:
    """Counterclockwise ground rectangle of a box, shape (4, 2)."""
    l, w, _ = box.shape
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = np.asarray(poly)[:, 0], np.asarray(poly)[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clipper) -> list:
    """Clip a polygon by a convex counterclockwise polygon, one half-plane per edge."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        for i, cur in enumerate(inp):
            prev = inp[i - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Volume IoU of two boxes sharing the vertical axis direction."""
    inter_poly = clip_convex(footprint(a), footprint(b))
    area = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    if area < 1e-12:
        return 0.0
    za0, za1 = a.center[2] - a.shape[2] / 2, a.center[2] + a.shape[2] / 2
    zb0, zb1 = b.center[2] - b.shape[2] / 2, b.center[2] + b.shape[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    inter = area * dz
    union = float(np.prod(a.shape)) + float(np.prod(b.shape)) - inter
    return float(min(1.0, max(0.0, inter / union)))


# ---------------------------------------------------------------------------
# matching and metrics

@dataclass
class FrameMatching:
    frame: int
    matches: list            # (track_id, truth_id, iou)
    false_positives: list    # track ids
    false_negatives: list    # truth ids
    truth_ids: list


def match_frame(tracks, truths, iou_threshold: float, frame: int = 0) -> FrameMatching:
    """Max-total-IoU assignment of ``(id, box)`` tracks to ``(id, box)`` truths.

    Pairs below ``iou_threshold`` are never matched.
    """
    tracks = list(tracks)
    truths = list(truths)
    iou = np.zeros((len(tracks), len(truths)))
    for i, (_, tb) in enumerate(tracks):
        for j, (_, gb) in enumerate(truths):
            iou[i, j] = iou_3d(tb, gb)
    cost = np.where(iou >= iou_threshold, 1.0 - iou, SENTINEL_COST)
    pairs = assign(cost)
    matched_t = {i for i, _ in pairs}
    matched_g = {j for _, j in pairs}
    return FrameMatching(
        frame=frame,
        matches=[(tracks[i][0], truths[j][0], float(iou[i, j])) for i, j in pairs],
        false_positives=[tracks[i][0] for i in range(len(tracks)) if i not in matched_t],
        false_negatives=[truths[j][0] for j in range(len(truths)) if j not in matched_g],
        truth_ids=[g[0] for g in truths],
    )


@dataclass
class EvalReport:
    iou_threshold: float
    mota: float
    mostly_tracked: float
    partly_tracked: float
    mostly_lost: float
    false_positives: int
    false_negatives: int
    id_switches: int
    num_truth_boxes: int
    num_truth_tracks: int
    coverage: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["coverage"] = {str(k): v for k, v in sorted(self.coverage.items())}
        return d


MT_FRACTION = 0.8
ML_FRACTION = 0.2


def compute_metrics(frames, iou_threshold: float = float("nan")) -> EvalReport:
    """CLEAR-MOT accuracy and MT/PT/ML over a sequence of frame matchings."""
    frames = sorted(frames, key=lambda f: f.frame)
    fp = sum(len(f.false_positives) for f in frames)
    fn = sum(len(f.false_negatives) for f in frames)
    n_gt = sum(len(f.truth_ids) for f in frames)
    if n_gt == 0:
        raise EmptyGroundTruth("no ground-truth boxes to evaluate against")
    present = defaultdict(int)
    matched = defaultdict(int)
    idsw = 0
    prev_frame_match: dict = {}
    for f in frames:
        cur = {}
        for trk_id, gt_id, _ in f.matches:
            cur[gt_id] = trk_id
            matched[gt_id] += 1
            # only a match in the directly preceding frame can produce a switch
            if gt_id in prev_frame_match and prev_frame_match[gt_id] != trk_id:
                idsw += 1
        for gt_id in f.truth_ids:
            present[gt_id] += 1
        prev_frame_match = cur
    coverage = {g: matched[g] / present[g] for g in present}
    n_tracks = len(coverage)
    mt = sum(1 for c in coverage.values() if c > MT_FRACTION)
    ml = sum(1 for c in coverage.values() if c < ML_FRACTION)
    pt = n_tracks - mt - ml
    return EvalReport(
        iou_threshold=iou_threshold,
        mota=1.0 - (fp + fn + idsw) / n_gt,
        mostly_tracked=mt / n_tracks,
        partly_tracked=pt / n_tracks,
        mostly_lost=ml / n_tracks,
        false_positives=fp,
        false_negatives=fn,
        id_switches=idsw,
        num_truth_boxes=n_gt,
        num_truth_tracks=n_tracks,
        coverage=coverage,
    )


def evaluate(tracks_by_frame, truth_by_frame, iou_threshold: float) -> EvalReport:
    """``*_by_frame`` map frame -> list of ``(id, OrientedBox3D)``."""
    frames = sorted(set(tracks_by_frame) | set(truth_by_frame))
    matchings = [
        match_frame(tracks_by_frame.get(k, []), truth_by_frame.get(k, []), iou_threshold, k)
        for k in frames
    ]
    return compute_metrics(matchings, iou_threshold)


def threshold_sweep(tracks_by_frame, truth_by_frame, thresholds=DEFAULT_THRESHOLDS):
    return [evaluate(tracks_by_frame, truth_by_frame, t) for t in thresholds]


def format_table(reports) -> str:
    lines = [
        "    IOU |          |   Mostly |   Partly |   Mostly",
        " thresh |     MOTA |  Tracked |  Tracked |     Lost",
        "--------+----------+----------+----------+---------",
    ]
    for r in reports:
        lines.append(f"{r.iou_threshold:7.2f} | {r.mota:8.6f} | {r.mostly_tracked:8.6f} | "
                     f"{r.partly_tracked:8.6f} | {r.mostly_lost:8.6f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# files

def _box_from_json(center, shape, yaw) -> OrientedBox3D:
    return OrientedBox3D(tuple(center), tuple(shape), float(yaw))


def load_truth(path):
    out = defaultdict(list)
    try:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    r = json.loads(line)
                    out[int(r["frame"])].append(
                        (int(r["id"]), _box_from_json(r["center"], r["shape"], r["yaw"])))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"cannot read truth {path}: {exc}") from exc
    return dict(out)


def load_tracks(path):
    """3D-stage track boxes per frame; 2D-stage records carry no box and are skipped."""
    out = defaultdict(list)
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                b = r.get("box3d")
                if b is None:
                    continue
                out[int(r["frame"])].append(
                    (int(r["track_id"]), _box_from_json(b["center"], b["shape"], b["yaw"])))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"cannot read tracks {path}: {exc}") from exc
    return dict(out)


def restrict_to_area(by_frame, cam: CameraModel, mask):
    """Keep boxes whose center projects inside the mask's detection area."""
    out = {}
    for k, items in by_frame.items():
        kept = []
        for ident, box in items:
            try:
                px = project_point(cam, box.center)
            except UTSError:
                continue
            if mask.in_detection_area(px):
                kept.append((ident, box))
        out[k] = kept
    return out


def evaluate_files(tracks_path, truth_path, thresholds=DEFAULT_THRESHOLDS,
                   cam: CameraModel | None = None, mask=None):
    tracks = load_tracks(tracks_path)
    truth = load_truth(truth_path)
    if cam is not None and mask is not None:
        tracks = restrict_to_area(tracks, cam, mask)
        truth = restrict_to_area(truth, cam, mask)
    return threshold_sweep(tracks, truth, thresholds)
