"""Per-frame tracking loop, configuration and track output records."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .association import (
    SENTINEL_COST,
    LifecycleConfig,
    Stage,
    Status,
    Track,
    assign,
    iou_matrix,
    predict_measurements,
    step_lifecycle,
)
from .detection import (
    Detection,
    SceneMask,
    default_priors,
    filter_detections,
    mark_edge_validity_all,
    read_detections,
)
from .errors import InputError, UTSError
from .estimation import (
    GaussianState,
    ekf_predict,
    ekf_update,
    ukf_predict,
    ukf_predict_batch,
    ukf_update,
    ukf_update_batch,
)
from .geometry import EMPTY_BOX, Box2D, CameraModel
from .init3d import InitPair, estimate_orientation, initialize_3d

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    detection_sigma_px: float = 2.0
    border_px: float = 10.0
    iou_gate: float = 0.1
    confirm_hits: int = 3
    max_misses: int = 5
    promotion_phi_deg: float = 15.0
    promotion_displacement_sigma: float = 3.0
    # 2D stage: jerk (px^2/s^5) and log-scale-rate derivative (1/s^3) densities
    q_accel_2d: float = 50.0
    q_scale_2d: float = 0.1
    # 3D stage random walks: (m/s)^2/s, (rad/s)^2/s, m^2/s
    q_velocity_3d: float = 2.0
    q_omega_3d: float = 2.0
    q_shape_3d: float = 1e-4
    ut_alpha: float = 0.01
    ut_beta: float = 2.0
    ut_kappa: float = 0.0
    # initial uncertainty of a new 2D track's motion components
    init_velocity_sigma_px: float = 200.0
    init_scale_rate_sigma: float = 0.5
    init_accel_sigma_px: float = 100.0
    omega_init_sigma: float = 0.3
    priors_path: str | None = None
    mask_path: str | None = None
    calibration_path: str | None = None

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name.endswith("_path") or f.name == "ut_kappa" or f.name == "ut_beta":
                continue
            if not val > 0:
                raise ValueError(f"config value {f.name} must be > 0, got {val}")
        if not 0 < self.ut_alpha <= 1:
            raise ValueError("ut_alpha must lie in (0, 1]")

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(data) - names
            if unknown:
                raise ValueError(f"unknown config keys {sorted(unknown)}")
            return cls(**data)
        except (OSError, ValueError, TypeError) as exc:
            raise InputError(f"cannot load config {path}: {exc}") from exc

    @property
    def ut(self) -> dict:
        return {"alpha": self.ut_alpha, "beta": self.ut_beta, "kappa": self.ut_kappa}


@dataclass
class TrackOutputRecord:
    frame: int
    time: float
    track_id: int
    stage: str
    status: str
    class_label: str
    box2d: tuple | None
    box3d: dict | None
    v: float | None
    omega: float | None
    cov_diag: tuple

    def to_dict(self) -> dict:
        return {
            "frame": self.frame,
            "time": _r(self.time),
            "track_id": self.track_id,
            "stage": self.stage,
            "status": self.status,
            "class": self.class_label,
            "box2d": None if self.box2d is None else [_r(x) for x in self.box2d],
            "box3d": None if self.box3d is None else {
                "center": [_r(e) for e in self.box3d["center"]],
                "shape": [_r(e) for e in self.box3d["shape"]],
                "yaw": _r(self.box3d["yaw"]),
            },
            "v": None if self.v is None else _r(self.v),
            "omega": None if self.omega is None else _r(self.omega),
            "cov_diag": [_r(x) for x in self.cov_diag],
        }


def _r(x: float) -> float:
    return round(float(x), 6)


class Tracker:
    """Owns the track set of one camera stream and advances it frame by frame."""

    def __init__(self, cam: CameraModel, mask: SceneMask | None = None,
                 priors=None, config: PipelineConfig | None = None):
        self.cam = cam
        self.mask = mask or SceneMask.full_image(cam.image_size)
        self.config = config or PipelineConfig()
        self.priors = priors or default_priors(self.config.priors_path)
        self.tracks: list[Track] = []
        self.finished: list[Track] = []
        self.time: float | None = None
        self.stats = {"frames": 0, "created": 0, "confirmed": 0, "dead": 0,
                      "promoted": 0, "track_errors": 0}
        self._next_id = 1
        self._lifecycle = LifecycleConfig(self.config.confirm_hits, self.config.max_misses)
        sig = self.config.detection_sigma_px
        self._R_cs = np.diag([0.5 * sig ** 2] * 2 + [2.0 * sig ** 2] * 2)

    # -- track creation -----------------------------------------------------

    def _spawn(self, det: Detection) -> Track:
        cfg = self.config
        c, s = dyn.cs_from_box(det.box)
        mean = np.zeros(dyn.DIM_2D)
        mean[0:2], mean[2:4] = c, s
        var = np.concatenate([
            np.diag(self._R_cs),
            [cfg.init_velocity_sigma_px ** 2] * 2,
            [cfg.init_scale_rate_sigma ** 2] * 2,
            [cfg.init_accel_sigma_px ** 2] * 2,
        ])
        trk = Track(id=self._next_id, state=GaussianState(mean, np.diag(var)),
                    time=det.timestamp)
        trk.vote(det)
        trk.history.append((det.timestamp, trk.stage.value, mean.copy(), det.box))
        self._next_id += 1
        self.stats["created"] += 1
        return trk

    # -- filter steps -------------------------------------------------------

    def _predict(self, trk: Track, t_now: float) -> None:
        tau = t_now - trk.time
        if tau <= 0:
            return
        cfg = self.config
        g = trk.state
        if trk.stage is Stage.TWO_D:
            Q = dyn.process_noise_2d(g.mean, tau, cfg.q_accel_2d, cfg.q_scale_2d)
            F = dyn.transition_2d_jacobian(g.mean, tau)
            trk.state = ekf_predict(g, lambda x: dyn.transition_2d(x, tau), F, Q)
        else:
            Q = dyn.process_noise_3d(tau, cfg.q_velocity_3d, cfg.q_omega_3d, cfg.q_shape_3d)
            try:
                trk.state = ukf_predict(g, lambda X: dyn.transition_3d(X, tau), Q,
                                        angle_dims=(dyn.PHI,), **cfg.ut)
            except UTSError:
                logger.warning("track %d: sigma-point prediction failed, mean-only", trk.id)
                trk.state = GaussianState(dyn.transition_3d(g.mean, tau), g.cov + Q)
        trk.time = t_now

    def _predict_all(self, t_now: float) -> None:
        """Predict every track to ``t_now``; 3D-stage tracks go through one batched UKF."""
        cfg = self.config
        three_d = [t for t in self.tracks if t.stage is Stage.THREE_D and t_now > t.time]
        for trk in self.tracks:
            if trk.stage is Stage.TWO_D:
                self._predict(trk, t_now)
        by_tau = defaultdict(list)
        for trk in three_d:
            by_tau[t_now - trk.time].append(trk)
        for tau, group in by_tau.items():
            if len(group) > 1:
                Q = dyn.process_noise_3d(tau, cfg.q_velocity_3d, cfg.q_omega_3d, cfg.q_shape_3d)
                try:
                    means, covs = ukf_predict_batch(
                        np.array([t.state.mean for t in group]),
                        np.array([t.state.cov for t in group]),
                        lambda X: dyn.transition_3d(X, tau), Q, angle_dims=(dyn.PHI,), **cfg.ut)
                except UTSError:
                    pass
                else:
                    for trk, m, c in zip(group, means, covs):
                        trk.state = GaussianState.trusted(m, c)
                        trk.time = t_now
                    continue
            for trk in group:
                self._predict(trk, t_now)

    def _update(self, trk: Track, det: Detection) -> None:
        valid = np.asarray(det.edge_valid, dtype=bool)
        sig = self.config.detection_sigma_px
        if trk.stage is Stage.TWO_D:
            idx = _cs_components(valid)
            if not idx:
                return
            z = np.concatenate(dyn.cs_from_box(det.box))[idx]
            H = dyn.H_2D[idx]
            R = self._R_cs[np.ix_(idx, idx)]
            post = ekf_update(trk.state, lambda x: H @ x, H, z, R)
            if np.any(post.mean[2:4] <= 0):
                raise UTSError("2D update produced a non-positive size")
        else:
            if not valid.any():
                return
            cam = self.cam
            z = det.box.as_array()[valid]
            post = ukf_update(
                trk.state, lambda X: dyn.outline_3d(cam, X)[:, valid], z,
                sig ** 2 * np.eye(int(valid.sum())), angle_dims=(dyn.PHI,),
                **self.config.ut)
            if np.any(post.mean[dyn.S3] <= 0):
                raise UTSError("3D update produced a non-positive shape")
        # the track keeps its predicted state when the update is rejected
        trk.state = post

    def _update_3d_batch(self, pairs, dets) -> list | None:
        """One batched UKF update for matched 3D tracks, each with its own edge mask.

        Returns the posterior states (``None`` where the shape went
        non-positive), or ``None`` if the batch could not be evaluated.
        """
        cam, cfg = self.cam, self.config
        trks = [self.tracks[i] for i, _ in pairs]
        z = np.array([dets[j].box.as_array() for _, j in pairs])
        mask = np.array([dets[j].edge_valid for _, j in pairs], dtype=bool)
        R = cfg.detection_sigma_px ** 2 * np.eye(4)
        try:
            means, covs = ukf_update_batch(
                np.array([t.state.mean for t in trks]), np.array([t.state.cov for t in trks]),
                lambda X: dyn.outline_3d(cam, X), z, R,
                angle_dims=(dyn.PHI,), mask=mask, **cfg.ut)
        except UTSError:
            return None
        ok = np.all(means[:, dyn.S3] > 0, axis=1)
        return [GaussianState.trusted(m, c) if good else None
                for m, c, good in zip(means, covs, ok)]

    def _update_matches(self, matches, dets, t_now: float) -> list:
        """Fuse matched detections; returns the pairs whose update succeeded."""
        good = []
        batch = []
        for i, j in matches:
            if self.tracks[i].stage is Stage.THREE_D and any(dets[j].edge_valid):
                batch.append((i, j))
            elif self._guarded_update(i, dets[j], t_now):
                good.append((i, j))
        posts = self._update_3d_batch(batch, dets) if len(batch) > 1 else None
        for k, (i, j) in enumerate(batch):
            if posts is None:
                ok = self._guarded_update(i, dets[j], t_now)
            elif posts[k] is None:
                self._log_failure(self.tracks[i], t_now, "3D update produced a non-positive shape")
                ok = False
            else:
                self.tracks[i].state = posts[k]
                self._commit(self.tracks[i], dets[j], t_now)
                ok = True
            if ok:
                good.append((i, j))
        return sorted(good)

    def _guarded_update(self, i: int, det: Detection, t_now: float) -> bool:
        trk = self.tracks[i]
        try:
            self._update(trk, det)
        except (UTSError, np.linalg.LinAlgError) as exc:
            self._log_failure(trk, t_now, exc)
            return False
        self._commit(trk, det, t_now)
        return True

    def _log_failure(self, trk: Track, t_now: float, reason) -> None:
        logger.warning("track %d: update failed at t=%.3f (%s)", trk.id, t_now, reason)
        self.stats["track_errors"] += 1

    @staticmethod
    def _commit(trk: Track, det: Detection, t_now: float) -> None:
        trk.vote(det)
        trk.history.append((t_now, trk.stage.value, trk.state.mean.copy(), det.box))

    def _try_promote(self, trk: Track, t_now: float) -> None:
        cfg = self.config
        a, b = trk.first_valid_detection, trk.last_valid_detection
        if a is None or b is None or b.timestamp != t_now or b.timestamp <= a.timestamp:
            return
        ca, cb = np.array(a.box.center), np.array(b.box.center)
        if np.hypot(*(cb - ca)) <= cfg.promotion_displacement_sigma * cfg.detection_sigma_px:
            return
        pair = InitPair(a, b, self.priors[trk.majority_class], cfg.detection_sigma_px)
        try:
            orientation = estimate_orientation(self.cam, pair)
            if math.degrees(math.sqrt(orientation.cov[0, 0])) >= cfg.promotion_phi_deg:
                return
            state = initialize_3d(self.cam, pair, cfg.omega_init_sigma, orientation)
            dyn.outline_3d(self.cam, state.mean)
        except UTSError as exc:
            logger.debug("track %d: promotion postponed (%s)", trk.id, exc)
            return
        trk.promote(state)
        self.stats["promoted"] += 1

    # -- frame loop -----------------------------------------------------------

    def process_frame(self, detections, t_now: float, frame: int = 0):
        """Advance all tracks to ``t_now`` and fuse this frame's detections."""
        if self.time is not None and t_now <= self.time:
            raise ValueError(f"frame time {t_now} not after previous {self.time}")
        cfg = self.config
        dets = mark_edge_validity_all(filter_detections(detections, self.mask), self.mask,
                                      self.cam.image_size, cfg.border_px)
        self._predict_all(t_now)
        predicted = predict_measurements(self.cam, self.tracks, t_now)
        iou = iou_matrix(predicted, [d.box for d in dets])
        cost = np.where(iou >= cfg.iou_gate, 1.0 - iou, SENTINEL_COST)
        matches = assign(cost)
        good = self._update_matches(matches, dets, t_now)
        # a detection consumed by a failed update must not spawn a duplicate track
        consumed = {j for _, j in matches}
        spawnable = [d if j not in consumed else None for j, d in enumerate(dets)]

        before = {t.id: t.status for t in self.tracks}
        result = step_lifecycle(self.tracks, spawnable, good, t_now, self._lifecycle,
                                spawn=self._spawn_or_skip)
        self.tracks = [t for t in result.active if t is not None]
        for trk in result.dead:
            self.finished.append(trk)
        self.stats["dead"] += len(result.dead)
        for trk in self.tracks:
            if trk.status is Status.CONFIRMED and before.get(trk.id) is not Status.CONFIRMED:
                self.stats["confirmed"] += 1
            if trk.stage is Stage.TWO_D and trk.status is Status.CONFIRMED:
                self._try_promote(trk, t_now)
        self.time = t_now
        self.stats["frames"] += 1
        boxes = predict_measurements(self.cam, self.tracks, t_now)
        return [self._record(trk, frame, t_now, box) for trk, box in zip(self.tracks, boxes)]

    def _spawn_or_skip(self, det):
        return None if det is None else self._spawn(det)

    def _record(self, trk: Track, frame: int, t_now: float, box2d: Box2D) -> TrackOutputRecord:
        x = trk.state.mean.tolist()
        box3d = v = omega = None
        if trk.stage is Stage.THREE_D:
            box3d = {"center": [x[0], x[1], 0.5 * x[4]], "shape": x[2:5], "yaw": x[dyn.PHI]}
            v, omega = x[dyn.VEL], x[dyn.OMEGA]
        return TrackOutputRecord(
            frame=frame, time=t_now, track_id=trk.id, stage=trk.stage.value,
            status=trk.status.value, class_label=trk.majority_class.value,
            box2d=None if box2d is EMPTY_BOX else (box2d.t, box2d.l, box2d.b, box2d.r),
            box3d=box3d, v=v, omega=omega, cov_diag=trk.state.cov.diagonal().tolist(),
        )


def _cs_components(valid: np.ndarray) -> list[int]:
    """Center/size components measurable from the valid edges (t, l, b, r).

    All four valid gives (cx, cy, sw, sh); with exactly three valid only the
    axis whose two edges are both valid is used; fewer gives nothing.
    """
    n = int(valid.sum())
    if n == 4:
        return [0, 1, 2, 3]
    if n < 3:
        return []
    if valid[1] and valid[3]:
        return [0, 2]
    return [1, 3]


def run_sequence(config: PipelineConfig, detections_path, output_path, cam=None,
                 mask=None, priors=None) -> dict:
    """Track a whole detections file and write one JSON line per live track and frame."""
    if cam is None:
        if config.calibration_path is None:
            raise InputError("no calibration given")
        cam = CameraModel.from_json(config.calibration_path)
    if mask is None and config.mask_path is not None:
        mask = SceneMask.from_json(config.mask_path)
    if priors is None:
        priors = default_priors(config.priors_path)
    frames, bad = read_detections(detections_path)
    tracker = Tracker(cam, mask, priors, config)
    latencies = []
    out_path = Path(output_path)
    with open(out_path, "w") as out:
        for frame in sorted(frames, key=lambda f: (frames[f][0], f)):
            t_now, dets = frames[frame]
            if tracker.time is not None and t_now <= tracker.time:
                logger.warning("frame %d: non-increasing time %.6f skipped", frame, t_now)
                bad += 1
                continue
            t0 = time.perf_counter()
            records = tracker.process_frame(dets, t_now, frame)
            latencies.append(time.perf_counter() - t0)
            for rec in records:
                out.write(json.dumps(rec.to_dict()) + "\n")
    summary = dict(tracker.stats)
    summary["warnings"] = bad
    summary["tracks_active_at_end"] = len(tracker.tracks)
    summary["median_latency_ms"] = 1e3 * float(np.median(latencies)) if latencies else 0.0
    summary["mean_latency_ms"] = 1e3 * float(np.mean(latencies)) if latencies else 0.0
    if bad:
        logger.warning("%d malformed input lines or frames skipped", bad)
    return summary
