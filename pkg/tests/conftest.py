import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from romoseg import synthgen
from romoseg.trajectory import Trajectory, matrix_to_quat

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_trajectory(rng, n=20) -> Trajectory:
    """Smooth-ish random camera path with distinct, well-spread positions."""
    from scipy.spatial.transform import Rotation

    steps = rng.normal(scale=0.3, size=(n, 3))
    positions = np.cumsum(steps, axis=0)
    rots = Rotation.from_rotvec(np.cumsum(rng.normal(scale=0.1, size=(n, 3)), axis=0))
    return Trajectory(np.arange(n, dtype=float) * 0.1, positions, rots.as_quat())


def transform_trajectory(traj: Trajectory, R: np.ndarray, t: np.ndarray) -> Trajectory:
    T = traj.matrices()
    G = np.eye(4)
    G[:3, :3] = R
    G[:3, 3] = t
    moved = G @ T
    return Trajectory(traj.timestamps, moved[:, :3, 3], matrix_to_quat(moved[:, :3, :3]))


@pytest.fixture(scope="session")
def reference_scene():
    return synthgen.generate(synthgen.reference_spec(0))


@pytest.fixture(scope="session")
def static_scene():
    return synthgen.generate({"objects": []}, 0)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"[{status}] {number:2d}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
