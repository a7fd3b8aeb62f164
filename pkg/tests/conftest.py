import numpy as np
import pytest
from hypothesis import settings

from sarsfp.scene import ScatteringParams, Scene, make_mesh

settings.register_profile("default", deadline=None)
settings.load_profile("default")

STEEL = ScatteringParams(0.7, 0.6, 0.3, 1.0)
GROUND = ScatteringParams(0.2, 0.25, 1.0, 1.0)


def quad(x0, x1, y0, y1, z):
    """Two upward-facing triangles covering a horizontal rectangle."""
    a, b, c, d = (x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z)
    return [(a, b, c), (a, c, d)]


def facing_plate(normal, center=(0.0, 0.0, 0.0), half=1.0):
    """Square plate (two triangles) through ``center`` with the given unit
    normal, wound so the normal matches."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    c = np.asarray(center, dtype=float)
    p = [c + half * (su * u + sv * v) for su, sv in [(-1, -1), (1, -1), (1, 1), (-1, 1)]]
    return [(p[0], p[1], p[2]), (p[0], p[2], p[3])]


def make_scene(tris, params=STEEL, components=None, ground_extent=0.0, background=GROUND, blend=None):
    comps = components or ["body"] * len(tris)
    meshes = [make_mesh(i, t, comps[i]) for i, t in enumerate(tris)]
    plist = params if isinstance(params, list) else [params] * len(tris)
    labels = list(dict.fromkeys(comps))
    b = np.zeros((len(tris), 2)) if blend is None else blend
    return Scene(meshes, plist, background, b, ground_extent, labels)


@pytest.fixture
def small_box_scene():
    from sarsfp.targets import Primitive, TargetSpec, build_scene
    spec = TargetSpec("toy", [
        Primitive("box", "hull", (0.0, 0.0, 0.5), (2.0, 1.2, 1.0)),
        Primitive("box", "turret", (0.0, 0.0, 1.25), (0.8, 0.8, 0.5)),
    ], {"hull": STEEL, "turret": STEEL})
    return build_scene(spec, 0, GROUND, 3.0, blend_seed=1, check_count=False)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[k])
