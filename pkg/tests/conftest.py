import numpy as np
import pytest

from oceandiff.grid import GridGeometry, OceanState, build_box_geometry


@pytest.fixture
def tiny_geometry() -> GridGeometry:
    return build_box_geometry(4, 6, 5)


def random_state(geometry: GridGeometry, seed: int = 0, normalized: bool = False) -> OceanState:
    """A finite random state on the grid; physical ranges when unnormalized."""
    rng = np.random.default_rng(seed)
    z, w, h = geometry.dims
    if normalized:
        t = rng.standard_normal((z, w, h))
        s = rng.standard_normal((z, w, h))
    else:
        t = rng.uniform(2.0, 20.0, (z, w, h))
        s = rng.uniform(33.0, 37.0, (z, w, h))
    return OceanState(temperature=t, salinity=s, normalized=normalized)


@pytest.fixture
def uniform_volume_geometry() -> GridGeometry:
    z, w, h = 4, 6, 5
    return GridGeometry(
        depth_m=np.arange(1, z + 1) * 100.0,
        lon_deg=np.arange(w, dtype=float),
        lat_deg=np.arange(h, dtype=float),
        cell_volume=np.ones((z, w, h)),
    )
