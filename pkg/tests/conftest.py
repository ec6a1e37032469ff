import numpy as np
import pytest

from flatflow.grid import GridSpec, GridSet
from flatflow.oracle import make_shape
from flatflow.flow import run_flow


def centered_spec(dim, shape, spacing):
    """Grid whose cell centers are symmetric about the origin."""
    origin = tuple(-(s / 2 - 0.5) * spacing for s in shape)
    return GridSpec(dim, shape, spacing, origin)


def raster_balls(spec, centers, radii):
    """Union of balls with per-ball radii (cell-center indicator)."""
    grids = spec.meshgrid()
    occ = np.zeros(spec.shape, dtype=bool)
    for c, r in zip(centers, radii):
        d2 = sum((g - ci) ** 2 for g, ci in zip(grids, c))
        occ |= d2 < r * r
    return GridSet(spec, occ)


@pytest.fixture(scope="session")
def unit_ball_2d():
    spec = centered_spec(2, (192, 192), 1 / 64.0)
    return make_shape("ball", {"radius": 1.0}, spec)


@pytest.fixture(scope="session")
def small_dumbbell():
    spec = centered_spec(2, (224, 160), 1 / 64.0)
    return make_shape(
        "dumbbell",
        {"ball_radius": 0.7, "neck_width": 0.15, "centers": [[-0.78, 0.0], [0.78, 0.0]]},
        spec,
    )


@pytest.fixture(scope="session")
def short_trace(small_dumbbell):
    # five steps, every set stored; shared by the audit and stats tests
    return run_flow(small_dumbbell, 0.01, 0.05, {"store_stride": 1})
