"""Volume containers, reorientation, sampling, and resampling."""
import numpy as np
import pytest

from ctatlas import GridGeometry, voxel_to_world
from ctatlas.errors import ShapeMismatchError, ValidationError
from ctatlas.volume import (
    ImageVolume,
    LabelVolume,
    reorient_canonical,
    resample,
    sample_at_voxels,
)


def _geom(dims=(4, 5, 6), **kw):
    return GridGeometry(dims=dims, spacing=kw.pop("spacing", (1.0, 1.0, 1.0)), **kw)


def test_container_validation():
    g = _geom()
    with pytest.raises(ShapeMismatchError):
        ImageVolume(geometry=g, data=np.zeros((4, 5, 7)))
    with pytest.raises(ValidationError):
        ImageVolume(geometry=g, data=np.full((4, 5, 6), np.inf))
    with pytest.raises(ValidationError):
        LabelVolume(geometry=g, data=np.full((4, 5, 6), 0.5))
    with pytest.raises(ValidationError):
        LabelVolume(geometry=g, data=np.full((4, 5, 6), -1))
    vol = ImageVolume(geometry=g, data=np.zeros((4, 5, 6)))
    assert vol.data.dtype == np.float32
    assert not vol.data.flags.writeable
    lab = LabelVolume(geometry=g, data=np.ones((4, 5, 6)))
    assert lab.data.dtype == np.uint16


def test_reorient_preserves_world_positions():
    g = GridGeometry(dims=(3, 4, 5), spacing=(1.0, 1.0, 2.0), origin=(0, 0, 8),
                     direction=((1, 0, 0), (0, 1, 0), (0, 0, -1)))
    vol = ImageVolume(geometry=g,
                      data=np.arange(60, dtype=np.float32).reshape(3, 4, 5))
    can = reorient_canonical(vol)
    assert np.allclose(can.geometry.direction, np.eye(3))
    # every voxel keeps its value at the same world position
    for idx in ((0, 0, 0), (2, 3, 4), (1, 2, 3)):
        w = voxel_to_world(g, idx)
        back = np.round(
            (w - np.asarray(can.geometry.origin))
            / np.asarray(can.geometry.spacing)
        ).astype(int)
        assert can.data[tuple(back)] == vol.data[idx]


def test_reorient_canonical_is_identity_on_canonical():
    vol = ImageVolume(geometry=_geom(), data=np.zeros((4, 5, 6)))
    assert reorient_canonical(vol) is vol or np.array_equal(
        reorient_canonical(vol).data, vol.data
    )


def test_trilinear_is_exact_on_linear_ramp():
    g = _geom(dims=(6, 6, 6))
    i, j, k = np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij")
    vol = ImageVolume(geometry=g, data=(2 * i + 3 * j - k).astype(np.float32))
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.0, 5.0, size=(40, 3))
    expect = 2 * pts[:, 0] + 3 * pts[:, 1] - pts[:, 2]
    got = sample_at_voxels(vol, pts)
    assert np.allclose(got, expect, atol=1e-4)


def test_padding_modes():
    g = _geom(dims=(4, 4, 4))
    vol = ImageVolume(geometry=g, data=np.full((4, 4, 4), 7.0),
                      padding_value=-1000.0)
    outside = np.array([[-3.0, 1.0, 1.0], [1.0, 1.0, 9.0]])
    const = sample_at_voxels(vol, outside, padding="constant")
    repl = sample_at_voxels(vol, outside, padding="replicate")
    assert np.allclose(const, -1000.0)
    assert np.allclose(repl, 7.0)
    with pytest.raises(ValidationError):
        sample_at_voxels(vol, outside, padding="mirror")
    with pytest.raises(ValidationError):
        sample_at_voxels(vol, outside, interp="cubic")


def test_labels_sample_nearest():
    g = _geom(dims=(4, 4, 4))
    data = np.zeros((4, 4, 4))
    data[2:, :, :] = 3
    lab = LabelVolume(geometry=g, data=data)
    got = sample_at_voxels(lab, np.array([[1.4, 0, 0], [1.6, 0, 0]]))
    assert list(got) == [0, 3]
    assert got.dtype == lab.data.dtype


def test_resample_identity_and_shift():
    g = _geom(dims=(5, 5, 5))
    rng = np.random.default_rng(2)
    vol = ImageVolume(geometry=g, data=rng.normal(size=(5, 5, 5)))
    same = resample(vol, g)
    assert np.array_equal(same.data, vol.data)
    # half-voxel shifted grid samples the linear interpolant
    g2 = GridGeometry(dims=(4, 5, 5), spacing=(1.0, 1.0, 1.0),
                      origin=(0.5, 0.0, 0.0))
    shifted = resample(vol, g2)
    expect = 0.5 * (vol.data[:-1] + vol.data[1:])
    assert np.allclose(shifted.data, expect, atol=1e-6)
