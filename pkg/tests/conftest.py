from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng, max_t: float = 5.0, max_angle: float = np.pi):
    from scipy.spatial.transform import Rotation

    from dynmap.geometry import Pose

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_rotvec(axis * rng.uniform(-max_angle, max_angle)).as_matrix()
    return Pose(R, rng.uniform(-max_t, max_t, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def lot_scene():
    """A small parked-car world and one scan from the middle of an aisle."""
    from dynmap.world import WorldConfig, generate_world, simulate_scan
    from dynmap.geometry import Pose

    world = generate_world(WorldConfig(occupancy=0.5), world_seed=3, session_seed=4)
    pose = Pose.from_xyz_yaw(40.0, 28.0, 1.73, 0.3)
    cloud, boxes = simulate_scan(world, pose, frame_id=0)
    return world, pose, cloud, boxes


def box_scene(rng, n_boxes: int = 12, per_box: int = 60) -> np.ndarray:
    """Points on the faces of randomly placed, yawed boxes: corners and planes in every direction."""
    from scipy.spatial.transform import Rotation

    pts = []
    for _ in range(n_boxes):
        centre = rng.uniform(-15, 15, 3) * [1, 1, 0.1]
        size = rng.uniform(0.5, 4, 3)
        u = rng.uniform(-0.5, 0.5, (per_box, 3))
        face = rng.integers(0, 3, per_box)
        rows = np.arange(per_box)
        u[rows, face] = np.sign(u[rows, face]) * 0.5
        R = Rotation.from_euler("z", rng.uniform(0, np.pi)).as_matrix()
        pts.append((u * size) @ R.T + centre)
    return np.vstack(pts)


def bounded_perturbation(rng, max_t: float, max_angle: float):
    """Rigid motion with uniform magnitude up to the bounds about a random axis and direction."""
    from scipy.spatial.transform import Rotation

    from dynmap.geometry import Pose

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    R = Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()
    return Pose(R, d * rng.uniform(0, max_t))


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
