import numpy as np
import pytest

from mixpinn import (
    MaterialParams,
    PhantomConfig,
    SweepConfig,
    generate_phantom,
    run_sweep,
)


@pytest.fixture(scope="session")
def small_mesh():
    """441-node phantom with one rigid inclusion."""
    return generate_phantom(
        PhantomConfig(
            box_mm=(80.0, 60.0, 60.0),
            cells=(8, 6, 6),
            inclusions=(((20.0, 15.0, 30.0), (50.0, 45.0, 50.0)),),
        )
    )


@pytest.fixture(scope="session")
def two_part_mesh():
    """112-node phantom with two full-dimensional rigid inclusions.

    Components must be non-coplanar: the pairwise-distance brute force used
    against the reduced solve is only equivalent to a 6-DOF rigid motion for
    full-dimensional node sets.
    """
    return generate_phantom(
        PhantomConfig(
            box_mm=(60.0, 30.0, 30.0),
            cells=(6, 3, 3),
            inclusions=(
                ((8.0, 8.0, 8.0), (22.0, 22.0, 22.0)),
                ((38.0, 8.0, 8.0), (52.0, 22.0, 22.0)),
            ),
        )
    )


@pytest.fixture(scope="session")
def small_sweep():
    return SweepConfig(
        grid_nx=3,
        grid_ny=2,
        spacing=10.0,
        depth_steps=2,
        half_len_long=15.0,
        half_len_short=5.0,
    )


@pytest.fixture(scope="session")
def small_samples(small_mesh, small_sweep):
    samples = run_sweep(small_mesh, MaterialParams(), small_sweep)
    assert len(samples) == 3 * 2 * 4 * 2
    return samples


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
