from __future__ import annotations

import numpy as np
import pytest

from tspe.scene import Camera, Primitive, SceneConfig


def axis_camera(width: int = 65, height: int = 65, f: float = 60.0, cam_id: int = 0) -> Camera:
    """Camera at the origin looking down +z; odd sizes put a pixel centre on the axis."""
    return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height,
                  rotation=np.eye(3), position=np.zeros(3), id=cam_id)


def sphere_box_scene(cameras=()) -> SceneConfig:
    return SceneConfig(
        primitives=(
            Primitive("sphere", (0.0, 0.0, 3.0), 0.5, layer="outer", radius=1.0),
            Primitive("box", (0.0, 0.0, 3.0), 1.0, layer="inner", half_extents=(0.3, 0.3, 0.3)),
        ),
        cameras=tuple(cameras),
    )


@pytest.fixture
def camera() -> Camera:
    return axis_camera()


@pytest.fixture
def two_layer_scene() -> SceneConfig:
    return sphere_box_scene()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
