import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import LineString, Point, Polygon

from uts.detection import (
    Detection,
    ObjectClass,
    SceneMask,
    ShapePrior,
    default_priors,
    filter_detections,
    load_prior_overrides,
    mark_edge_validity,
    mark_edge_validity_all,
    point_in_polygon,
    points_in_polygon,
    read_detections,
    segment_inside_fraction,
)
from uts.errors import InputError
from uts.geometry import Box2D

IMAGE = (960, 600)
SQUARE = ((100, 100), (500, 100), (500, 400), (100, 400))


def det(t, l, b, r, cls=ObjectClass.CAR, **kw):
    return Detection(Box2D(t, l, b, r), cls, **kw)


def random_simple_polygon(rng, n=None):
    """Polygon through points sorted by angle around a center, random radii."""
    while True:
        k = n or rng.integers(3, 12)
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = rng.uniform(20, 200, k)
        c = rng.uniform(200, 400, 2)
        poly = [tuple(c + r * np.array([np.cos(a), np.sin(a)])) for a, r in zip(ang, rad)]
        # near-collinear vertices can make the oracle's topology fail
        if Polygon(poly).is_valid:
            return poly


# ---------------------------------------------------------------------------
# filtering

def test_filter_drops_other_class():
    mask = SceneMask(SQUARE)
    out = filter_detections([det(200, 200, 250, 260, ObjectClass.OTHER),
                             det(200, 200, 250, 260, ObjectClass.BUS)], mask)
    assert [d.class_label for d in out] == [ObjectClass.BUS]


def test_filter_empty():
    assert filter_detections([], SceneMask(SQUARE)) == []


def test_filter_center_on_boundary_included():
    # center (300, 100) lies on the top edge of the area
    d = det(90, 280, 110, 320)
    assert filter_detections([d], SceneMask(SQUARE)) == [d]


def test_filter_preserves_order_and_area():
    mask = SceneMask(SQUARE)
    dets = [det(150, 150, 200, 200, ObjectClass.TRUCK), det(0, 0, 20, 20),
            det(300, 300, 350, 350), det(390, 480, 420, 560)]
    out = filter_detections(dets, mask)
    assert out == [dets[0], dets[2]]


def test_points_in_polygon_matches_shapely(rng):
    mismatches = 0
    for _ in range(300):
        poly = random_simple_polygon(rng)
        sp = Polygon(poly)
        pts = rng.uniform(0, 600, (200, 2))
        ours = points_in_polygon(pts, poly)
        ref = np.array([sp.covers(Point(p)) for p in pts])
        mismatches += int(np.sum(ours != ref))
    assert mismatches == 0


def test_vertices_and_edge_midpoints_inside(rng):
    poly = random_simple_polygon(rng, 7)
    arr = np.asarray(poly)
    mids = 0.5 * (arr + np.roll(arr, -1, axis=0))
    assert points_in_polygon(arr, poly).all()
    assert points_in_polygon(mids, poly).all()


# ---------------------------------------------------------------------------
# edge validity

def test_left_edge_near_border_invalid():
    d = mark_edge_validity(det(200, 2, 300, 100), SceneMask.full_image(IMAGE), IMAGE, 10)
    assert d.edge_valid == (True, False, True, True)


def test_all_edges_valid_in_open_area():
    d = mark_edge_validity(det(200, 200, 300, 400), SceneMask.full_image(IMAGE), IMAGE, 10)
    assert d.edge_valid == (True, True, True, True)


def test_borders_each_side():
    mask = SceneMask.full_image(IMAGE)
    d = mark_edge_validity(det(5, 952, 595, 958), mask, IMAGE, 10)
    assert d.edge_valid == (False, True, False, False)


def test_bottom_edge_sixty_percent_occluded():
    # bottom edge runs x = 100..200 at v = 300; occluder covers x = 140..260
    occ = [(140, 280), (260, 280), (260, 350), (140, 350)]
    mask = SceneMask(SceneMask.full_image(IMAGE).detection_area, [occ])
    d = mark_edge_validity(det(200, 100, 300, 200), mask, IMAGE, 10)
    assert d.edge_valid == (True, True, False, True)
    assert segment_inside_fraction((100, 300), (200, 300), occ) == pytest.approx(0.6)


def test_exactly_half_occluded_stays_valid():
    occ = [(150, 280), (260, 280), (260, 350), (150, 350)]
    mask = SceneMask(SceneMask.full_image(IMAGE).detection_area, [occ])
    d = mark_edge_validity(det(200, 100, 300, 200), mask, IMAGE, 10)
    assert d.edge_valid[2]


def test_validity_is_recomputed():
    mask = SceneMask.full_image(IMAGE)
    stale = det(200, 200, 300, 400, edge_valid=(False, False, False, False))
    assert mark_edge_validity(stale, mask, IMAGE, 10).fully_valid


def test_segment_fraction_matches_shapely(rng):
    for _ in range(300):
        poly = random_simple_polygon(rng)
        p0, p1 = rng.uniform(100, 500, 2), rng.uniform(100, 500, 2)
        ref = LineString([p0, p1]).intersection(Polygon(poly)).length / np.linalg.norm(p1 - p0)
        assert segment_inside_fraction(p0, p1, poly) == pytest.approx(ref, abs=1e-9)


def test_axis_aligned_segment_fraction_matches_shapely(rng):
    # detection edges are always horizontal or vertical and may run along
    # occluder edges, which exercises the collinear case
    occ = [(100, 100), (300, 100), (300, 200), (100, 200)]
    for _ in range(300):
        y = rng.choice([100.0, 150.0, 200.0, rng.uniform(50, 250)])
        x0, x1 = np.sort(rng.uniform(0, 400, 2))
        ref = LineString([(x0, y), (x1, y)]).intersection(Polygon(occ)).length / (x1 - x0)
        assert segment_inside_fraction((x0, y), (x1, y), occ) == pytest.approx(ref, abs=1e-9)


def test_batch_validity_equals_single(rng):
    occ = [random_simple_polygon(rng) for _ in range(3)]
    mask = SceneMask(SceneMask.full_image(IMAGE).detection_area, occ)
    dets = []
    for _ in range(200):
        t, l = rng.uniform(-20, 550), rng.uniform(-20, 900)
        dets.append(det(t, l, t + rng.uniform(5, 200), l + rng.uniform(5, 200)))
    batch = mark_edge_validity_all(dets, mask, IMAGE, 10)
    for d, b in zip(dets, batch):
        ref = []
        w, h = IMAGE
        box = d.box
        segs = (((box.l, box.t), (box.r, box.t)), ((box.l, box.t), (box.l, box.b)),
                ((box.l, box.b), (box.r, box.b)), ((box.r, box.t), (box.r, box.b)))
        dist = (box.t, box.l, h - box.b, w - box.r)
        for (p0, p1), dd in zip(segs, dist):
            line = LineString([p0, p1])
            covered = max(line.intersection(Polygon(p)).length for p in occ) / line.length
            ref.append(dd >= 10 and covered <= 0.5)
        assert b.edge_valid == tuple(ref)


# ---------------------------------------------------------------------------
# types and files

def test_detection_invariants():
    with pytest.raises(ValueError):
        det(0, 0, 10, 10, score=1.5)
    with pytest.raises(ValueError):
        det(0, 0, 10, 10, timestamp=float("inf"))


def test_shape_prior_invariants():
    with pytest.raises(ValueError):
        ShapePrior(np.array([4.5, -1, 1.5]), np.eye(3))
    with pytest.raises(ValueError):
        ShapePrior(np.array([4.5, 1.8, 1.5]), np.array([[1, 0.1, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(ValueError):
        ShapePrior(np.array([4.5, 1.8, 1.5]), np.diag([1.0, 0.0, 1.0]))


def test_default_priors_and_overrides(tmp_path):
    priors = default_priors()
    assert set(priors) == {ObjectClass.CAR, ObjectClass.TRUCK, ObjectClass.BUS}
    assert priors[ObjectClass.BUS].mean_shape[0] > priors[ObjectClass.CAR].mean_shape[0]
    path = tmp_path / "priors.json"
    path.write_text(json.dumps({"CAR": {"mean": [4.0, 1.7, 1.4], "cov": np.eye(3).tolist()}}))
    merged = default_priors(path)
    np.testing.assert_allclose(merged[ObjectClass.CAR].mean_shape, (4.0, 1.7, 1.4))
    assert merged[ObjectClass.TRUCK] is not None
    path.write_text("{not json")
    with pytest.raises(InputError):
        load_prior_overrides(path)


def test_read_detections_skips_malformed(tmp_path):
    path = tmp_path / "d.jsonl"
    good = det(1, 2, 30, 40, timestamp=0.05, frame=1).to_record()
    lines = [json.dumps(good), "{broken", json.dumps({**good, "t": 50}), "",
             json.dumps({**good, "class": "PLANE"})]
    path.write_text("\n".join(lines) + "\n")
    frames, bad = read_detections(path)
    assert bad == 3
    assert list(frames) == [1]
    t, dets = frames[1]
    assert t == 0.05 and dets[0].box == Box2D(1, 2, 30, 40)


def test_read_detections_missing_file(tmp_path):
    with pytest.raises(InputError):
        read_detections(tmp_path / "nope.jsonl")


def test_mask_json(tmp_path):
    mask = SceneMask(SQUARE, [[(0, 0), (10, 0), (10, 10)]])
    path = tmp_path / "mask.json"
    path.write_text(json.dumps(mask.to_dict()))
    again = SceneMask.from_json(path)
    assert again == mask
    with pytest.raises(ValueError):
        SceneMask(((0, 0), (1, 1)))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 600), st.floats(0, 600), st.integers(0, 2**31 - 1))
def test_point_in_polygon_property(x, y, seed):
    poly = random_simple_polygon(np.random.default_rng(seed))
    assert point_in_polygon((x, y), poly) == Polygon(poly).covers(Point(x, y))
