"""End-to-end acceptance checks, one test per criterion.

The per-criterion PASS/FAIL lines are printed in the terminal summary (see
conftest.py).
"""
import copy
import gc
import math
import time

import numpy as np
import pytest
from scipy.stats import chi2

from conftest import ground_point_in_view, random_camera
from uts import dynamics as dyn
from uts import scenarios
from uts.association import assign, brute_force_assignment
from uts.cli import main
from uts.detection import Detection, ObjectClass, ShapePrior, default_priors
from uts.estimation import (
    GaussianState,
    ukf_predict,
    ukf_predict_batch,
    ukf_update,
    ukf_update_batch,
)
from uts.evaluation import evaluate, evaluate_files, format_table, iou_3d
from uts.geometry import (
    Box2D,
    OrientedBox3D,
    back_project_to_height,
    project_point,
    wrap_angle,
)
from uts.init3d import InitPair, build_ls_system, solve_regularized
from uts.pipeline import PipelineConfig, Tracker, run_sequence
from uts.synth import generate_truth, render_detections, write_outputs

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------

@criterion(1, "geometry round trip")
def test_geometry_round_trip():
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(10_000):
        cam = random_camera(rng)
        cases.append((cam, ground_point_in_view(rng, cam)))
    t0 = time.perf_counter()
    err = 0.0
    for cam, x in cases:
        back = back_project_to_height(cam, project_point(cam, x), x[2])
        err = max(err, float(np.max(np.abs(back - x))))
    elapsed = time.perf_counter() - t0
    assert err < 1e-6
    assert elapsed < 1.0


@criterion(2, "coordinated-turn exactness")
def test_coordinated_turn_exactness():
    x = np.array([0.0, 0.0, 4.5, 1.8, 1.5, 0.0, math.pi, math.pi / 2])
    end = dyn.transition_3d(x, 1.0)
    np.testing.assert_allclose(end[:2], (2.0, 2.0), rtol=0, atol=1e-9)
    assert abs(end[dyn.PHI] - math.pi / 2) < 1e-9

    rng = np.random.default_rng(2)
    n = 10_000
    X = np.column_stack([rng.uniform(-50, 50, (n, 2)), np.tile([4.5, 1.8, 1.5], (n, 1)),
                         rng.uniform(-math.pi, math.pi, n), rng.uniform(0, 20, n),
                         rng.uniform(-1, 1, n)])
    t1, t2 = rng.uniform(0, 2, n), rng.uniform(0, 2, n)
    split = dyn.transition_3d(dyn.transition_3d(X, t1), t2)
    whole = dyn.transition_3d(X, t1 + t2)
    diff = split - whole
    diff[:, dyn.PHI] = wrap_angle(diff[:, dyn.PHI])
    assert np.max(np.abs(diff)) < 1e-9

    # the straight-line and arc formulas meet where the implementation switches
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    X[:, dyn.OMEGA] = sign * dyn.SMALL_OMEGA * (1 - 1e-9)
    below = dyn.transition_3d(X, t1)
    X[:, dyn.OMEGA] = sign * dyn.SMALL_OMEGA * (1 + 1e-9)
    above = dyn.transition_3d(X, t1)
    gap = float(np.max(np.hypot(*(below[:, :2] - above[:, :2]).T)))
    X[:, dyn.OMEGA] = 0.0
    straight = dyn.transition_3d(X, t1)
    X[:, dyn.OMEGA] = 1e-9
    gap = max(gap, float(np.max(np.hypot(*(dyn.transition_3d(X, t1)[:, :2] - straight[:, :2]).T))))
    assert gap < 1e-6


@criterion(3, "filter equivalence and consistency")
def test_filter_equivalence_and_consistency():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n, m = 8, int(rng.integers(1, 9))
        A = rng.normal(size=(n, n)) / math.sqrt(n)
        H = rng.normal(size=(m, n))
        L = rng.normal(size=(n, n))
        P = L @ L.T + 0.1 * np.eye(n)
        Lq, Lr = rng.normal(size=(n, n)), rng.normal(size=(m, m))
        Q, R = 0.1 * Lq @ Lq.T, Lr @ Lr.T + 0.1 * np.eye(m)
        g = GaussianState(rng.normal(size=n), P)
        z = rng.normal(size=m)
        # closed-form Kalman filter
        xp, Pp = A @ g.mean, A @ P @ A.T + Q
        S = H @ Pp @ H.T + R
        K = np.linalg.solve(S, H @ Pp).T
        xk, Pk = xp + K @ (z - H @ xp), Pp - K @ S @ K.T
        pred = ukf_predict(g, lambda X: X @ A.T, Q)
        post = ukf_update(pred, lambda X: X @ H.T, z, R)
        for ours, ref in ((pred.mean, xp), (pred.cov, Pp), (post.mean, xk), (post.cov, Pk)):
            worst = max(worst, float(np.max(np.abs(ours - ref))))
    assert worst < 1e-8

    # Monte-Carlo consistency on the nonlinear coordinated-turn model: truth is
    # drawn from the filter's own prior and process noise, positions are measured
    runs, steps, tau = 500, 60, 0.1
    cfg = PipelineConfig()
    m0 = np.array([0.0, 0.0, 4.5, 1.8, 1.5, 0.0, 8.0, 0.3])
    P0 = np.diag([0.5, 0.5, 0.1, 0.05, 0.05, 0.1, 1.0, 0.1]) ** 2
    Q = dyn.process_noise_3d(tau, 1.0, 0.2, 1e-4)
    H = np.zeros((2, 8))
    H[0, 0] = H[1, 1] = 1.0
    r_sigma = 0.3
    truth = rng.multivariate_normal(m0, P0, runs)
    means, covs = np.tile(m0, (runs, 1)), np.tile(P0, (runs, 1, 1))
    lo, hi = chi2.ppf([0.025, 0.975], runs * 8) / runs
    inside = []
    for _ in range(steps):
        truth = dyn.transition_3d(truth, tau) + rng.normal(size=(runs, 8)) * np.sqrt(np.diag(Q))
        z = truth[:, :2] + rng.normal(0, r_sigma, (runs, 2))
        means, covs = ukf_predict_batch(means, covs, lambda X: dyn.transition_3d(X, tau), Q,
                                        angle_dims=(dyn.PHI,), **cfg.ut)
        means, covs = ukf_update_batch(means, covs, lambda X: X @ H.T, z,
                                       r_sigma ** 2 * np.eye(2), angle_dims=(dyn.PHI,), **cfg.ut)
        e = truth - means
        e[:, dyn.PHI] = wrap_angle(e[:, dyn.PHI])
        avg = np.einsum("ni,ni->n", e, np.linalg.solve(covs, e[..., None])[..., 0]).mean()
        inside.append(lo <= avg <= hi)
    assert np.mean(inside) >= 0.9


@criterion(4, "initialization oracle")
def test_initialization_oracle(junction_cam):
    prior = default_priors()[ObjectClass.CAR]
    theta = np.array([-3.0, 1.0, 4.4, 1.85, 1.45, 8.0])
    phi, tau = 0.3, 0.5
    dets = []
    for t in (0.0, tau):
        x = np.array([theta[0] + theta[5] * t * math.cos(phi), theta[1] + theta[5] * t * math.sin(phi),
                      *theta[2:5], phi, theta[5], 0.0])
        dets.append(Detection(Box2D.from_array(dyn.outline_3d(junction_cam, x)), ObjectClass.CAR,
                              timestamp=t))
    pair = InitPair(dets[0], dets[1], prior, 2.0)
    M, b = build_ls_system(junction_cam, pair, phi)
    assert np.max(np.abs(M @ theta - b)) < 1e-6
    lsq = np.linalg.lstsq(M, b, rcond=None)[0]
    assert np.max(np.abs(lsq - theta)) < 1e-4
    # prior-dominant: the shape block is the prior mean
    tight = ShapePrior(prior.mean_shape, 1e-12 * np.eye(3))
    np.testing.assert_allclose(solve_regularized(M, b, tight, 2.0).mean[2:5], prior.mean_shape,
                               rtol=0, atol=1e-9)
    # detection-dominant: the unregularized solution
    vague = ShapePrior(prior.mean_shape, 1e12 * np.eye(3))
    np.testing.assert_allclose(solve_regularized(M, b, vague, 2.0).mean, lsq, rtol=0, atol=1e-6)


@criterion(5, "assignment optimality")
def test_assignment_optimality():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n, m = rng.integers(1, 7, 2)
        cost = rng.integers(0, 100, (n, m)).astype(float)
        pairs = assign(cost)
        assert sum(cost[i, j] for i, j in pairs) == brute_force_assignment(cost)


def _mc_iou(a, b, rng, n):
    """Sample uniformly inside ``a``; the hit rate in ``b`` estimates the shared volume."""
    local = (rng.random((n, 3)) - 0.5) * np.asarray(a.shape)
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    world = np.column_stack([ca * local[:, 0] - sa * local[:, 1], sa * local[:, 0] + ca * local[:, 1],
                             local[:, 2]]) + np.asarray(a.center)
    cb, sb = math.cos(b.yaw), math.sin(b.yaw)
    d = world - np.asarray(b.center)
    half = np.asarray(b.shape) / 2
    hit = ((np.abs(cb * d[:, 0] + sb * d[:, 1]) <= half[0])
           & (np.abs(-sb * d[:, 0] + cb * d[:, 1]) <= half[1]) & (np.abs(d[:, 2]) <= half[2]))
    vol_a, vol_b = np.prod(a.shape), np.prod(b.shape)
    inter = np.count_nonzero(hit) / n * vol_a
    return inter / (vol_a + vol_b - inter)


@criterion(6, "3D IoU oracle")
def test_iou_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        a = OrientedBox3D(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(0.5, 5, 3)),
                          rng.uniform(-math.pi, math.pi))
        b = OrientedBox3D(tuple(np.asarray(a.center) + rng.normal(0, 1, 3)),
                          tuple(rng.uniform(0.5, 5, 3)), rng.uniform(-math.pi, math.pi))
        worst = max(worst, abs(iou_3d(a, b) - _mc_iou(a, b, rng, 1_000_000)))
    assert worst < 0.01


@criterion(7, "metrics oracle")
def test_metrics_oracle():
    def car(x, y=0.0):
        return OrientedBox3D((x, y, 0.75), (4.5, 1.8, 1.5), 0.0)

    truth, tracks = {}, {}
    for k in range(10):
        truth[k] = [(1, car(k)), (2, car(k, 10.0))]
        tracks[k] = [(100, car(k))]
        if k < 5:
            tracks[k].append((200, car(k, 10.0)))
        elif k < 8:
            tracks[k].append((300, car(k, 10.0)))
        if k == 3:
            tracks[k].append((400, car(50.0)))
    rep = evaluate(tracks, truth, 0.5)
    assert (rep.false_positives, rep.false_negatives, rep.id_switches) == (1, 2, 1)
    assert rep.mota == pytest.approx(0.8, abs=1e-12)
    perfect = evaluate(truth, truth, 0.5)
    assert perfect.mota == 1.0


def _closure(scen):
    truth = generate_truth(scen)
    trk = Tracker(scen.camera, scen.scene_mask())
    promoted_at, ious = None, []
    for (k, t, dets), (_, _, objs) in zip(render_detections(scen, truth), truth):
        recs = [r for r in trk.process_frame(dets, t, k) if r.box3d is not None]
        if recs and promoted_at is None:
            promoted_at = k
        if promoted_at is not None and k >= promoted_at + 10 and recs and objs:
            b = recs[0].box3d
            ious.append(iou_3d(OrientedBox3D(b["center"], b["shape"], b["yaw"]), objs[0].box))
    return trk, promoted_at, ious


@criterion(8, "noise-free end-to-end closure")
@pytest.mark.parametrize("name", ["straight", "left_turn", "u_turn"])
def test_noise_free_closure(name):
    trk, promoted_at, ious = _closure(scenarios.builtin(name))
    assert trk.stats["created"] == 1
    assert trk.stats["promoted"] == 1 and promoted_at is not None
    assert len(ious) >= 20
    assert min(ious) > 0.9


@criterion(9, "self-benchmark")
def test_benchmark(tmp_path):
    t0 = time.perf_counter()
    scen = scenarios.benchmark()
    assert scen.duration == 120.0 and scen.fps == 20.0 and scen.noise_sigma_px == 2.0
    assert scen.occluders
    paths = {k: tmp_path / f"{k}.json" for k in ("det", "truth", "calib", "mask")}
    write_outputs(scen, 0, paths["det"], paths["truth"], paths["calib"], paths["mask"])
    cfg = PipelineConfig(calibration_path=str(paths["calib"]), mask_path=str(paths["mask"]))
    run_sequence(cfg, paths["det"], tmp_path / "tracks.jsonl")
    reports = evaluate_files(tmp_path / "tracks.jsonl", paths["truth"], (0.5, 0.25, 0.1),
                             scen.camera, scen.scene_mask())
    elapsed = time.perf_counter() - t0
    print("\n" + format_table(reports) + f"\nbenchmark wall time {elapsed:.1f} s")
    motas = [r.mota for r in reports]
    assert motas == sorted(motas)
    assert reports[1].mota >= 0.6
    assert elapsed < 120.0


@criterion(10, "throughput with 20 tracks")
def test_throughput():
    scen = scenarios.dense(duration=10.0)
    frames = render_detections(scen, generate_truth(scen), 0)
    trk = Tracker(scen.camera, scen.scene_mask())
    start = None
    for i, (k, t, dets) in enumerate(frames):
        trk.process_frame(dets, t, k)
        if sum(x.stage.value == "3D" for x in trk.tracks) == 20:
            start = i + 1
            break
    assert start is not None
    segment = frames[start:start + 100]
    assert len(segment) == 100
    rates = []
    # best of several replays from the same starting state damps scheduler noise
    # the collector is paused while timing, as timeit does, so garbage left by
    # earlier tests is not collected inside the measured loop
    for _ in range(7):
        replay = copy.deepcopy(trk)
        gc.collect()
        gc.disable()
        try:
            t0 = time.perf_counter()
            for k, t, dets in segment:
                replay.process_frame(dets, t, k)
            rates.append(len(segment) / (time.perf_counter() - t0))
        finally:
            gc.enable()
        assert len(replay.tracks) == 20
    print(f"\nframes/s over 7 replays: {sorted(round(r) for r in rates)}")
    assert max(rates) >= 400.0


@criterion(11, "determinism of synth, track and eval")
def test_cli_determinism(tmp_path):
    import json
    scen_path = tmp_path / "crossing.json"
    scen_path.write_text(json.dumps(scenarios.crossing(noise=2.0).to_dict()))
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["synth", "--scenario", str(scen_path), "--seed", "42",
                     "--out-detections", str(d / "det.jsonl"), "--out-truth", str(d / "truth.jsonl"),
                     "--out-calib", str(d / "calib.json"), "--out-mask", str(d / "mask.json")]) == 0
        assert main(["track", "--calib", str(d / "calib.json"), "--mask", str(d / "mask.json"),
                     "--detections", str(d / "det.jsonl"), "--out", str(d / "tracks.jsonl")]) == 0
        assert main(["eval", "--tracks", str(d / "tracks.jsonl"), "--truth", str(d / "truth.jsonl"),
                     "--calib", str(d / "calib.json"), "--mask", str(d / "mask.json"),
                     "--out", str(d / "metrics.json")]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outputs[0].keys() == outputs[1].keys()
    assert len(outputs[0]) == 7
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], name
