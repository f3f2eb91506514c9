from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vdmforge.meshcore import TriMesh
from vdmforge.meshcore.primitives import grid

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_grid_mesh(seed: int, n: int = 8, drop: float = 0.2, noise: float = 0.05) -> TriMesh:
    """Grid patch with some triangles removed and jittered vertices (edge-manifold by construction)."""
    rng = np.random.default_rng(seed)
    g = grid(n)
    keep = rng.random(g.n_triangles) >= drop
    keep[0] = True
    tris = g.triangles[keep]
    used, inv = np.unique(tris, return_inverse=True)
    v = g.vertices[used] + rng.normal(0, noise / n, (len(used), 3))
    return TriMesh(v, inv.reshape(-1, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
