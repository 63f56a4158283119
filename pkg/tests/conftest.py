import math
from collections import OrderedDict

import numpy as np
import pytest

from uts.geometry import CameraModel


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = OrderedDict()


def pytest_collection_modifyitems(config, items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            config._criteria.setdefault(m.args[0], {"title": m.args[1], "ok": True, "seen": False})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    entry = item.config._criteria[m.args[0]]
    if rep.when == "call" or rep.failed or rep.skipped:
        entry["seen"] = True
        if not rep.passed:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(criteria):
        e = criteria[num]
        if not e["seen"]:
            status = "NOT RUN"
        else:
            status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {status:7s} {e['title']}")


# ---------------------------------------------------------------------------
# shared fixtures

def random_camera(rng) -> CameraModel:
    """Elevated camera looking down at the street with random intrinsics."""
    height = rng.uniform(3.0, 20.0)
    pos = np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), height])
    heading = rng.uniform(-math.pi, math.pi)
    pitch = rng.uniform(math.radians(10), math.radians(70))
    dist = height / math.tan(pitch)
    target = pos + [dist * math.cos(heading), dist * math.sin(heading), -height]
    cam = CameraModel.looking_at(pos, target, rng.uniform(400, 1500), (960, 600),
                                 (rng.uniform(400, 560), rng.uniform(250, 350)))
    # general K: unequal focal lengths and a little skew
    K = cam.K.copy()
    K[1, 1] *= rng.uniform(0.9, 1.1)
    K[0, 1] = rng.uniform(-2.0, 2.0)
    # small roll about the optical axis
    roll = rng.uniform(-0.1, 0.1)
    c, s = math.cos(roll), math.sin(roll)
    Rr = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    P = cam.P.copy()
    P[:, :3] = P[:, :3] @ Rr
    return CameraModel(K, P, cam.image_size)


def ground_point_in_view(rng, cam: CameraModel) -> np.ndarray:
    """Random street point in front of ``cam`` (positive depth)."""
    while True:
        fwd = cam.P[:, 2].copy()
        fwd[2] = 0.0
        fwd /= np.linalg.norm(fwd)
        side = np.array([-fwd[1], fwd[0], 0.0])
        p = cam.position.copy()
        p += fwd * rng.uniform(2.0, 80.0) + side * rng.uniform(-30.0, 30.0)
        p[2] = 0.0
        if cam.to_ccs(p)[2] > 0.5:
            return p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def junction_cam():
    from uts.scenarios import junction_camera
    return junction_camera()
