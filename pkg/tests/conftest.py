"""Shared fixtures and small builders used across the test modules."""

import numpy as np
import pytest

from ovomap.geometry import CameraIntrinsics, Keyframe


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit(rng, dim):
    return unit(rng.normal(size=dim))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng):
    pose = np.eye(4)
    pose[:3, :3] = random_rotation(rng)
    pose[:3, 3] = rng.uniform(-2, 2, size=3)
    return pose


def small_intrinsics(width=64, height=48):
    # 60 degree horizontal field of view
    fx = 0.5 * width / np.tan(np.radians(30.0))
    return CameraIntrinsics(
        fx=fx, fy=fx, cx=width / 2 - 0.5, cy=height / 2 - 0.5,
        width=width, height=height,
    )


def flat_keyframe(index=0, depth_value=1.0, width=64, height=48):
    """Camera at the origin looking down +z at a constant-depth plane."""
    intr = small_intrinsics(width, height)
    depth = np.full((height, width), depth_value, dtype=np.float64)
    return Keyframe(index=index, intrinsics=intr, pose=np.eye(4), depth=depth)


@pytest.fixture
def rng():
    return np.random.default_rng(20240816)


# one line per acceptance criterion, echoed after the run summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, description: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    line = f"[{status}] criterion {number:2d}: {description}{suffix}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
