"""Synthetic traffic scenes: ground-truth 3D trajectories and rendered detections.

Vehicles follow piecewise-constant (speed, turn rate) segments integrated
exactly with the coordinated-turn transition. Rendering projects each box
through the camera, clips it to the image, optionally cuts away static
occluders, and adds white Gaussian pixel noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon, box as shapely_box
from shapely.ops import unary_union

from .detection import Detection, ObjectClass, SceneMask
from .dynamics import observe_3d_batch, transition_3d
from .errors import InputError, PointBehindCamera
from .geometry import Box2D, CameraModel, OrientedBox3D, project_points


@dataclass(frozen=True)
class Segment:
    v: float
    omega: float
    duration: float


@dataclass(frozen=True)
class VehicleSpec:
    class_label: ObjectClass
    shape: tuple[float, float, float]
    spawn_time: float
    pose: tuple[float, float, float]          # x, y, heading
    segments: tuple[Segment, ...]

    @property
    def lifetime(self) -> float:
        return sum(s.duration for s in self.segments)

    def state_at(self, t: float) -> np.ndarray | None:
        """State vector [cx, cy, l, w, h, phi, v, omega] at absolute time ``t``."""
        rel = t - self.spawn_time
        if rel < -1e-9 or rel > self.lifetime + 1e-9:
            return None
        rel = min(max(rel, 0.0), self.lifetime)
        x = np.array([self.pose[0], self.pose[1], *self.shape, self.pose[2], 0.0, 0.0])
        remaining = rel
        for seg in self.segments:
            x[6], x[7] = seg.v, seg.omega
            step = min(seg.duration, remaining)
            if step > 0:
                x = transition_3d(x, step)
            remaining -= step
            if remaining <= 0:
                break
        return x


@dataclass
class Scenario:
    camera: CameraModel
    duration: float
    fps: float
    vehicles: list[VehicleSpec]
    noise_sigma_px: float = 0.0
    occluders: list = field(default_factory=list)
    detection_area: list | None = None
    truncate_occluded: bool = True
    mask_margin_px: float = 6.0
    min_box_px: float = 8.0

    def __post_init__(self):
        if self.fps <= 0 or self.duration < 0:
            raise ValueError("fps must be positive and duration non-negative")
        for v in self.vehicles:
            if any(s <= 0 for s in v.shape):
                raise ValueError("vehicle shapes must be positive")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.fps)) + 1

    def frame_time(self, k: int) -> float:
        return k / self.fps

    def scene_mask(self) -> SceneMask:
        """Mask handed to the tracker: occluders grown by ``mask_margin_px``."""
        w, h = self.camera.image_size
        area = self.detection_area or [(0, 0), (w, 0), (w, h), (0, h)]
        grown = []
        for poly in self.occluders:
            g = Polygon(poly).buffer(self.mask_margin_px, join_style=2)
            grown.append([tuple(round(c, 3) for c in p) for p in list(g.exterior.coords)[:-1]])
        return SceneMask(area, grown)

    # -- serialization -------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        cam_d = data["camera"]
        if "K" in cam_d:
            cam = CameraModel(np.reshape(cam_d["K"], (3, 3)), np.reshape(cam_d["P"], (3, 4)),
                              tuple(cam_d.get("image_size", (960, 600))))
        else:
            cam = CameraModel.looking_at(cam_d["position"], cam_d["target"], cam_d["focal"],
                                         tuple(cam_d.get("image_size", (960, 600))))
        vehicles = [
            VehicleSpec(
                ObjectClass(v["class"]), tuple(v["shape"]), float(v.get("spawn_time", 0.0)),
                tuple(v["pose"]),
                tuple(Segment(s["v"], s["omega"], s["duration"]) for s in v["segments"]),
            )
            for v in data["vehicles"]
        ]
        return cls(
            camera=cam, duration=float(data["duration"]), fps=float(data["fps"]),
            vehicles=vehicles, noise_sigma_px=float(data.get("noise_sigma_px", 0.0)),
            occluders=[[tuple(p) for p in poly] for poly in data.get("occluders", [])],
            detection_area=data.get("detection_area"),
            truncate_occluded=bool(data.get("truncate_occluded", True)),
            mask_margin_px=float(data.get("mask_margin_px", 6.0)),
            min_box_px=float(data.get("min_box_px", 8.0)),
        )

    @classmethod
    def from_json(cls, path) -> "Scenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise InputError(f"cannot load scenario {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "camera": self.camera.to_dict(),
            "duration": self.duration,
            "fps": self.fps,
            "noise_sigma_px": self.noise_sigma_px,
            "occluders": [[list(p) for p in poly] for poly in self.occluders],
            "detection_area": None if self.detection_area is None
            else [list(p) for p in self.detection_area],
            "truncate_occluded": self.truncate_occluded,
            "mask_margin_px": self.mask_margin_px,
            "min_box_px": self.min_box_px,
            "vehicles": [
                {
                    "class": v.class_label.value, "shape": list(v.shape),
                    "spawn_time": v.spawn_time, "pose": list(v.pose),
                    "segments": [{"v": s.v, "omega": s.omega, "duration": s.duration}
                                 for s in v.segments],
                }
                for v in self.vehicles
            ],
        }


@dataclass(frozen=True)
class TruthObject:
    id: int
    class_label: ObjectClass
    box: OrientedBox3D
    v: float
    omega: float
    state: np.ndarray = field(repr=False, compare=False, default=None)


def generate_truth(scenario: Scenario):
    """Per frame ``(frame, time, [TruthObject])`` for every vehicle alive then."""
    frames = []
    for k in range(scenario.num_frames):
        t = scenario.frame_time(k)
        objs = []
        for vid, spec in enumerate(scenario.vehicles, 1):
            x = spec.state_at(t)
            if x is None:
                continue
            box = OrientedBox3D((x[0], x[1], 0.5 * x[4]), tuple(x[2:5]), x[5])
            objs.append(TruthObject(vid, spec.class_label, box, float(x[6]), float(x[7]), x))
        frames.append((k, t, objs))
    return frames


def _visible_bounds(tlbr, image_size, occluder_union):
    w, h = image_size
    t, l, b, r = tlbr
    t, l = max(t, 0.0), max(l, 0.0)
    b, r = min(b, float(h)), min(r, float(w))
    if b <= t or r <= l:
        return None
    if occluder_union is None:
        return (t, l, b, r)
    vis = shapely_box(l, t, r, b).difference(occluder_union)
    if vis.is_empty or vis.area < 1e-6:
        return None
    minx, miny, maxx, maxy = vis.bounds
    return (miny, minx, maxy, maxx)


def render_detections(scenario: Scenario, truth, seed: int = 0):
    """Detections per frame, ``[(frame, time, [Detection])]``, in time order."""
    rng = np.random.default_rng(seed)
    cam = scenario.camera
    occ = None
    if scenario.truncate_occluded and scenario.occluders:
        occ = unary_union([Polygon(p) for p in scenario.occluders])
    sigma = scenario.noise_sigma_px
    out = []
    for frame, t, objs in truth:
        dets = []
        for obj in objs:
            try:
                tlbr, _ = observe_3d_batch(cam, obj.state)
            except PointBehindCamera:
                continue
            vis = _visible_bounds(tlbr, cam.image_size, occ)
            if vis is None:
                continue
            if min(vis[2] - vis[0], vis[3] - vis[1]) < scenario.min_box_px:
                continue
            vals = np.array(vis, dtype=float)
            if sigma > 0:
                vals = vals + rng.normal(0.0, sigma, 4)
            t_, l_, b_, r_ = vals
            t_, b_ = min(t_, b_), max(t_, b_)
            l_, r_ = min(l_, r_), max(l_, r_)
            dets.append(Detection(Box2D(t_, l_, b_, r_), obj.class_label, 1.0,
                                  timestamp=t, frame=frame))
        out.append((frame, t, dets))
    return out


def truth_records(truth):
    for frame, t, objs in truth:
        for o in objs:
            yield {
                "frame": frame, "time": t, "id": o.id, "class": o.class_label.value,
                "center": list(o.box.center), "shape": list(o.box.shape),
                "yaw": o.box.yaw, "v": o.v, "omega": o.omega,
            }


def write_jsonl(path, records) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n


def write_outputs(scenario: Scenario, seed: int, detections_path, truth_path,
                  calib_path=None, mask_path=None) -> dict:
    truth = generate_truth(scenario)
    dets = render_detections(scenario, truth, seed)
    n_det = write_jsonl(detections_path,
                        (d.to_record() for _, _, ds in dets for d in ds))
    n_truth = write_jsonl(truth_path, truth_records(truth))
    if calib_path is not None:
        Path(calib_path).write_text(json.dumps(scenario.camera.to_dict()))
    if mask_path is not None:
        Path(mask_path).write_text(json.dumps(scenario.scene_mask().to_dict()))
    return {"frames": scenario.num_frames, "detections": n_det, "truth_boxes": n_truth}


def ground_polygon_to_image(cam: CameraModel, pts) -> list:
    """Project a ground-plane (z = 0) polygon into the image."""
    px = project_points(cam, np.array([[x, y, 0.0] for x, y in pts]))
    return [(round(float(u), 3), round(float(v), 3)) for u, v in px]


def turn_segments(v: float, radius: float, angle: float):
    """Segment turning by ``angle`` radians (positive = left) at speed ``v``."""
    omega = math.copysign(v / radius, angle)
    return Segment(v, omega, abs(angle) / abs(omega))
