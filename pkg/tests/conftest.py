import numpy as np
import pytest

from ghostkv import FrameMeta, Pose


def random_frame(rng, t, shape=(4, 4), patch=(2, 2), feature_dim=2, registers=1,
                 key_dim=0, use_saliency=False, pose=None):
    h, w = shape
    hp, wp = patch
    if pose is None:
        pose = Pose(tuple(rng.normal(size=3)), tuple(rng.normal(size=4) + 0.1), 1.0)
    kw = {}
    if use_saliency:
        kw["saliency"] = rng.random((hp, wp))
    else:
        kw["features"] = rng.normal(size=(hp, wp, feature_dim))
    if key_dim:
        kw["keys"] = rng.normal(size=(1 + registers + hp * wp, key_dim))
    return FrameMeta(frame_index=t, pose=pose, depth=rng.random((h, w)) * 5,
                     depth_conf=rng.random((h, w)), point_conf=rng.random((h, w)), **kw)


def random_stream(rng, n, **kw):
    return [random_frame(rng, t, **kw) for t in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, label): acceptance criterion number and label")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_runtest_logreport(report):
    for key, value in report.user_properties:
        if key != "criterion":
            continue
        n, label = value
        failed = report.failed or (report.when == "call" and report.skipped)
        prev = _criteria.get(n, (label, True))
        _criteria[n] = (label, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        label, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {label}")
