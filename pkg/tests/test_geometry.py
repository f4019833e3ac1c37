"""Grid geometry: voxel/world mapping and comparison."""
import numpy as np
import pytest

from ctatlas import GridGeometry, geometry_allclose, voxel_to_world, world_to_voxel
from ctatlas.errors import ValidationError


def test_defaults_and_validation():
    geom = GridGeometry(dims=(4, 5, 6), spacing=(1.0, 1.5, 2.0))
    assert geom.origin == (0.0, 0.0, 0.0)
    assert np.allclose(geom.direction, np.eye(3))
    with pytest.raises(ValidationError):
        GridGeometry(dims=(0, 5, 6), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(ValidationError):
        GridGeometry(dims=(4, 5, 6), spacing=(1.0, -1.0, 1.0))
    with pytest.raises(ValidationError):
        GridGeometry(dims=(4, 5), spacing=(1.0, 1.0))


def test_voxel_world_round_trip():
    geom = GridGeometry(
        dims=(8, 8, 8), spacing=(0.7, 1.1, 2.3), origin=(-3.0, 4.0, 10.0),
        direction=((0.0, 1.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
    )
    rng = np.random.default_rng(0)
    vox = rng.uniform(0, 7, size=(20, 3))
    world = voxel_to_world(geom, vox)
    back = world_to_voxel(geom, world)
    assert np.allclose(back, vox, atol=1e-12)
    # origin sits at voxel (0, 0, 0)
    assert np.allclose(voxel_to_world(geom, [0, 0, 0]), geom.origin)


def test_spacing_scales_world_steps():
    geom = GridGeometry(dims=(4, 4, 4), spacing=(2.0, 3.0, 4.0))
    step = voxel_to_world(geom, [1, 1, 1]) - voxel_to_world(geom, [0, 0, 0])
    assert np.allclose(step, [2.0, 3.0, 4.0])


def test_geometry_allclose():
    a = GridGeometry(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0))
    b = GridGeometry(dims=(4, 4, 4), spacing=(1.0 + 1e-9, 1.0, 1.0))
    c = GridGeometry(dims=(4, 4, 5), spacing=(1.0, 1.0, 1.0))
    d = GridGeometry(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0), origin=(9, 0, 0))
    assert geometry_allclose(a, b)
    assert not geometry_allclose(a, c)
    assert not geometry_allclose(a, d)
