import math
import time

import numpy as np
import pytest

from meshgrade.mesh import StructuredMesh


def uniform_grid(ni, nj, h=1.0, origin=(0.0, 0.0)):
    i, j = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    coords = np.stack([origin[0] + h * i, origin[1] + h * j], axis=-1).astype(float)
    return StructuredMesh(ni, nj, coords, name=f"grid{ni}x{nj}")


def random_grid(ni, nj, rng, jitter=0.2):
    """Uniform grid with interior-safe jitter; every cell stays convex."""
    mesh = uniform_grid(ni, nj)
    coords = mesh.coords + rng.uniform(-jitter, jitter, size=mesh.coords.shape)
    return StructuredMesh(ni, nj, coords, name="random")


def rotate(coords, angle, shift=(0.0, 0.0), scale=1.0):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return scale * coords @ rot.T + np.asarray(shift)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = {}


class _Criterion:
    def __init__(self, key, title, budget=None):
        self.key, self.title, self.budget = key, title, budget
        self.detail = ""
        self.elapsed = 0.0

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, kind, exc, tb):
        self.elapsed = time.perf_counter() - self._t0
        ok = kind is None
        detail = self.detail
        if not ok:
            reason = str(exc).splitlines()[0] if str(exc) else ""
            detail = "; ".join(filter(None, [detail, f"{type(exc).__name__}: {reason}"]))
        if ok and self.budget is not None and self.elapsed >= self.budget:
            ok = False
            detail += f" (over the {self.budget:g} s budget)"
        ACCEPTANCE[self.key] = (self.title, ok, f"{detail} [{self.elapsed:.2f} s]".strip())
        if ok is False and kind is None:
            raise AssertionError(f"criterion {self.key} exceeded {self.budget} s: {self.elapsed:.2f} s")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key:<3} {title}: {detail}")
