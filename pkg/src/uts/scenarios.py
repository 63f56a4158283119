"""Built-in synthetic scenes around a four-way junction.

All scenes share one camera: 8 m above the street, 20 m south of the
junction center, pitched down about 30 degrees, 960x600 pixels. Scene
values are defaults for testing, not measured data.
"""
from __future__ import annotations

import math

import numpy as np

from .detection import ObjectClass, ShapePrior, default_priors
from .geometry import CameraModel
from .synth import Scenario, Segment, VehicleSpec, ground_polygon_to_image, turn_segments

IMAGE_SIZE = (960, 600)
FOCAL_PX = 700.0
# ground rectangle (x0, x1, y0, y1) tracked and evaluated
AREA_GROUND = (-13.0, 13.0, -11.0, 16.0)


def junction_camera() -> CameraModel:
    return CameraModel.looking_at((0.0, -20.0, 8.0), (0.0, -6.0, 0.0), FOCAL_PX, IMAGE_SIZE)


def junction_area(cam: CameraModel):
    x0, x1, y0, y1 = AREA_GROUND
    return ground_polygon_to_image(cam, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


JUNCTION_OCCLUDERS = [
    # traffic light pole
    [(612.0, 120.0), (626.0, 120.0), (626.0, 600.0), (612.0, 600.0)],
    # building corner, lower left
    [(0.0, 360.0), (95.0, 360.0), (150.0, 600.0), (0.0, 600.0)],
]


def _scene(vehicles, duration, noise=0.0, occluders=None, fps=20.0) -> Scenario:
    cam = junction_camera()
    return Scenario(cam, duration, fps, vehicles, noise_sigma_px=noise,
                    occluders=occluders or [], detection_area=junction_area(cam))


CAR = (4.5, 1.8, 1.5)


def straight_pass(noise: float = 0.0) -> Scenario:
    car = VehicleSpec(ObjectClass.CAR, (4.4, 1.85, 1.45), 0.0, (-16.0, -1.0, 0.0),
                      (Segment(8.0, 0.0, 4.0),))
    return _scene([car], 4.0, noise)


def left_turn(noise: float = 0.0) -> Scenario:
    car = VehicleSpec(ObjectClass.CAR, (4.6, 1.8, 1.5), 0.0, (2.0, -12.0, math.pi / 2),
                      (Segment(7.0, 0.0, 1.5), turn_segments(7.0, 7.0, math.pi / 2),
                       Segment(7.0, 0.0, 1.5)))
    return _scene([car], 4.5, noise)


def u_turn(noise: float = 0.0) -> Scenario:
    car = VehicleSpec(ObjectClass.CAR, (4.5, 1.75, 1.55), 0.0, (3.0, -10.0, math.pi / 2),
                      (Segment(6.0, 0.0, 2.0), turn_segments(5.0, 5.0, math.pi),
                       Segment(6.0, 0.0, 2.0)))
    return _scene([car], 4.0 + math.pi, noise)


def crossing(noise: float = 0.0) -> Scenario:
    a = VehicleSpec(ObjectClass.CAR, (4.5, 1.8, 1.5), 0.0, (-15.0, -2.0, 0.0),
                    (Segment(8.0, 0.0, 4.0),))
    b = VehicleSpec(ObjectClass.CAR, (4.2, 1.7, 1.45), 0.3, (2.0, -12.0, math.pi / 2),
                    (Segment(6.0, 0.0, 4.0),))
    return _scene([a, b], 4.5, noise)


def _canonical_route(maneuver: str, v: float):
    """Segments for an eastbound start at (-20, -2); rotated per approach later."""
    if maneuver == "straight":
        return (Segment(v, 0.0, 38.0 / v),)
    if maneuver == "left":
        return (Segment(v, 0.0, 16.0 / v), turn_segments(0.8 * v, 6.0, math.pi / 2),
                Segment(v, 0.0, 16.0 / v))
    if maneuver == "right":
        return (Segment(v, 0.0, 15.0 / v), turn_segments(0.6 * v, 3.0, -math.pi / 2),
                Segment(v, 0.0, 14.0 / v))
    if maneuver == "uturn":
        return (Segment(v, 0.0, 18.0 / v), turn_segments(3.0, 2.0, math.pi),
                Segment(v, 0.0, 18.0 / v))
    raise ValueError(maneuver)


def _sample_shape(rng, prior: ShapePrior):
    s = rng.multivariate_normal(prior.mean_shape, prior.covariance)
    return tuple(float(x) for x in np.clip(s, 0.6 * prior.mean_shape, 1.4 * prior.mean_shape))


def traffic(duration: float = 120.0, seed: int = 7, noise: float = 2.0,
            with_occluders: bool = True, mean_gap: float = 6.0) -> Scenario:
    """Random junction traffic: four approaches, straight/turn/U-turn routes."""
    rng = np.random.default_rng(seed)
    priors = default_priors()
    classes = [ObjectClass.CAR, ObjectClass.TRUCK, ObjectClass.BUS]
    vehicles = []
    # one spawn stream per approach heading; followers never outrun leaders
    for approach in (0.0, math.pi / 2, math.pi, -math.pi / 2):
        t = float(rng.uniform(0.0, mean_gap))
        ca, sa = math.cos(approach), math.sin(approach)
        prev_v = None
        while t < duration - 2.0:
            cls = classes[rng.choice(3, p=[0.75, 0.15, 0.10])]
            v = float(rng.uniform(6.5, 9.5)) if cls is ObjectClass.CAR else float(rng.uniform(6.0, 8.0))
            if prev_v is not None:
                v = min(v, prev_v)
            maneuver = rng.choice(["straight", "left", "right", "uturn"], p=[0.55, 0.2, 0.17, 0.08])
            if cls is ObjectClass.BUS and maneuver == "uturn":
                maneuver = "straight"
            x0, y0 = -20.0, -2.0
            pose = (ca * x0 - sa * y0, sa * x0 + ca * y0, approach)
            vehicles.append(VehicleSpec(cls, _sample_shape(rng, priors[cls]), t, pose,
                                        _canonical_route(str(maneuver), v)))
            prev_v = v
            t += float(rng.uniform(0.6, 1.4) * mean_gap)
    vehicles.sort(key=lambda s: (s.spawn_time, s.pose))
    return _scene(vehicles, duration, noise, JUNCTION_OCCLUDERS if with_occluders else None)


def benchmark() -> Scenario:
    """Two-minute, 20 fps multi-vehicle scene with 2 px noise and static occluders."""
    return traffic(120.0, seed=7, noise=2.0, with_occluders=True)


def dense(n_lanes: int = 5, per_lane: int = 4, duration: float = 5.0) -> Scenario:
    """Twenty slow vehicles in parallel lanes of alternating direction, all in view."""
    vehicles = []
    for lane in range(n_lanes):
        y = -2.5 + 3.5 * lane
        sign = 1.0 if lane % 2 == 0 else -1.0
        for k in range(per_lane):
            x = sign * (-1.6 - 7.5 + 5.0 * k)
            heading = 0.0 if sign > 0 else math.pi
            vehicles.append(VehicleSpec(ObjectClass.CAR, CAR, 0.0, (x, y, heading),
                                        (Segment(0.8, 0.0, duration),)))
    return _scene(vehicles, duration, 0.0)


BUILTIN = {
    "straight": straight_pass,
    "left_turn": left_turn,
    "u_turn": u_turn,
    "crossing": crossing,
    "benchmark": benchmark,
    "dense": dense,
}


def builtin(name: str) -> Scenario:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(BUILTIN)}") from None
