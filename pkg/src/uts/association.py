"""Detection-to-track association and track lifecycle bookkeeping."""
from __future__ import annotations

import enum
import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detection import VEHICLE_CLASSES, Detection, ObjectClass
from .dynamics import box_from_cs, outline_3d, transition_2d, transition_3d
from .errors import UTSError
from .estimation import GaussianState
from .geometry import EMPTY_BOX, Box2D

SENTINEL_COST = 1e9


class Stage(str, enum.Enum):
    TWO_D = "2D"
    THREE_D = "3D"


class Status(str, enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass
class Track:
    id: int
    state: GaussianState
    time: float
    stage: Stage = Stage.TWO_D
    status: Status = Status.TENTATIVE
    hits: int = 1
    consecutive_misses: int = 0
    class_votes: Counter = field(default_factory=Counter)
    history: list = field(default_factory=list)
    first_valid_detection: Detection | None = None
    last_valid_detection: Detection | None = None

    def vote(self, det: Detection) -> None:
        self.class_votes[det.class_label] += 1
        if det.fully_valid:
            if self.first_valid_detection is None:
                self.first_valid_detection = det
            self.last_valid_detection = det

    @property
    def majority_class(self) -> ObjectClass:
        # ties resolve in CAR, TRUCK, BUS order
        best, n = VEHICLE_CLASSES[0], self.class_votes.get(VEHICLE_CLASSES[0], 0)
        for c in VEHICLE_CLASSES[1:]:
            if self.class_votes.get(c, 0) > n:
                best, n = c, self.class_votes[c]
        return best

    def promote(self, state: GaussianState) -> None:
        if self.stage is not Stage.TWO_D:
            raise ValueError(f"track {self.id} already in the 3D stage")
        self.stage = Stage.THREE_D
        self.state = state

    def kill(self) -> None:
        self.status = Status.DEAD


def predicted_box(cam, track: Track, t_now: float) -> Box2D:
    """Measurement prediction ``h(f_tau(x))`` of one track's mean."""
    tau = t_now - track.time
    try:
        if track.stage is Stage.TWO_D:
            x = transition_2d(track.state.mean, tau)
            return box_from_cs(x[0:2], x[2:4])
        x = transition_3d(track.state.mean, tau)
        tlbr = outline_3d(cam, x)
        return Box2D.from_array(tlbr)
    except (UTSError, ValueError):
        return EMPTY_BOX


def predict_measurements(cam, tracks, t_now: float) -> list[Box2D]:
    """Predicted image boxes; failed projections yield ``EMPTY_BOX``.

    3D-stage tracks are projected in one vectorized call; if any of them
    fails, each is retried on its own.
    """
    out = [None] * len(tracks)
    idx3 = [k for k, trk in enumerate(tracks) if trk.stage is Stage.THREE_D]
    if len(idx3) > 1:
        X = np.array([tracks[k].state.mean for k in idx3])
        tau = np.array([t_now - tracks[k].time for k in idx3])
        try:
            tlbr = outline_3d(cam, transition_3d(X, tau) if tau.any() else X)
        except UTSError:
            pass
        else:
            for k, row in zip(idx3, tlbr):
                out[k] = _box_or_empty(row)
    return [predicted_box(cam, trk, t_now) if box is None else box
            for trk, box in zip(tracks, out)]


def _box_or_empty(tlbr) -> Box2D:
    try:
        return Box2D(*tlbr.tolist())
    except ValueError:
        return EMPTY_BOX


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.r, b.r) - max(a.l, b.l)
    ih = min(a.b, b.b) - max(a.t, b.t)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, vectorized."""
    if not len(boxes_a) or not len(boxes_b):
        return np.zeros((len(boxes_a), len(boxes_b)))
    A = np.array([(bx.t, bx.l, bx.b, bx.r) for bx in boxes_a])[:, None, :]
    B = np.array([(bx.t, bx.l, bx.b, bx.r) for bx in boxes_b])[None, :, :]
    iw = np.clip(np.minimum(A[..., 3], B[..., 3]) - np.maximum(A[..., 1], B[..., 1]), 0, None)
    ih = np.clip(np.minimum(A[..., 2], B[..., 2]) - np.maximum(A[..., 0], B[..., 0]), 0, None)
    inter = iw * ih
    area_a = (A[..., 3] - A[..., 1]) * (A[..., 2] - A[..., 0])
    area_b = (B[..., 3] - B[..., 1]) * (B[..., 2] - B[..., 0])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(iou, 0.0, 1.0)


def assign(cost, gate: float | None = None) -> list[tuple[int, int]]:
    """Minimum total cost one-to-one assignment (Hungarian method).

    Pairs whose cost is at or above ``gate`` (or the sentinel) are dropped
    after solving.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    limit = SENTINEL_COST if gate is None else min(gate, SENTINEL_COST)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if cost[i, j] < limit]


def brute_force_assignment(cost) -> float:
    """Minimum total cost by enumerating all injective maps (small inputs only)."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n > m:
        return brute_force_assignment(cost.T)
    best = np.inf
    for perm in itertools.permutations(range(m), n):
        best = min(best, sum(cost[i, perm[i]] for i in range(n)))
    return 0.0 if n == 0 else float(best)


@dataclass
class LifecycleConfig:
    confirm_hits: int = 3
    max_misses: int = 5


@dataclass
class LifecycleResult:
    active: list
    dead: list
    created: list


def step_lifecycle(tracks, detections, matches, t_now, config=None, spawn=None):
    """Update hit/miss counters and statuses after association.

    Filter updates of matched tracks are the caller's job. ``spawn(det)`` must
    return a new Track for an unmatched detection.
    """
    config = config or LifecycleConfig()
    matched_tracks = {i for i, _ in matches}
    matched_dets = {j for _, j in matches}
    active, dead = [], []
    for i, trk in enumerate(tracks):
        if i in matched_tracks:
            trk.hits += 1
            trk.consecutive_misses = 0
            if trk.status is Status.TENTATIVE and trk.hits >= config.confirm_hits:
                trk.status = Status.CONFIRMED
        else:
            trk.consecutive_misses += 1
            if trk.consecutive_misses >= config.max_misses:
                trk.kill()
        (dead if trk.status is Status.DEAD else active).append(trk)
    created = []
    if spawn is not None:
        for j, det in enumerate(detections):
            if j not in matched_dets:
                created.append(spawn(det))
    return LifecycleResult(active + created, dead, created)
