import numpy as np
import pytest

from noduleaug.errors import InvalidArgumentError
from noduleaug.volume import Volume
from noduleaug.volume_io import load_nifti, load_raw, load_volume, save_nifti, save_raw, save_volume


@pytest.fixture
def volume():
    rng = np.random.default_rng(42)
    return Volume(
        data=rng.uniform(-1, 1, (12, 14, 16)).astype(np.float32),
        spacing=(1.0, 0.75, 0.75),
        origin=(-4.0, 2.5, 10.0),
        intensity_range=(-1.0, 1.0),
        scan_id="fixture-01",
    )


def assert_volumes_equal(a, b):
    np.testing.assert_array_equal(a.data, b.data)
    assert a.spacing == b.spacing
    assert a.origin == b.origin
    assert a.intensity_range == b.intensity_range
    assert a.background == b.background
    assert a.scan_id == b.scan_id


def test_raw_round_trip(tmp_path, volume):
    path = save_raw(volume, tmp_path / "vol.f32")
    assert path.exists() and path.with_suffix(".json").exists()
    assert_volumes_equal(load_raw(path), volume)


def test_nifti_round_trip(tmp_path, volume):
    path = save_nifti(volume, tmp_path / "vol.nii.gz")
    assert_volumes_equal(load_nifti(path), volume)


def test_both_readers_agree(tmp_path, volume):
    raw = load_raw(save_raw(volume, tmp_path / "a.f32"))
    nii = load_nifti(save_nifti(volume, tmp_path / "a.nii.gz"))
    assert_volumes_equal(raw, nii)


def test_dispatch_by_extension(tmp_path, volume):
    p1 = save_volume(volume, tmp_path / "x.nii.gz")
    p2 = save_volume(volume, tmp_path / "x.f32")
    assert p1.name.endswith(".nii.gz")
    assert_volumes_equal(load_volume(p1), load_volume(p2))


def test_corrupt_block_size_rejected(tmp_path, volume):
    path = save_raw(volume, tmp_path / "vol.f32")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(InvalidArgumentError):
        load_raw(path)


def test_raw_write_is_deterministic(tmp_path, volume):
    p1 = save_raw(volume, tmp_path / "a.f32")
    p2 = save_raw(volume, tmp_path / "b.f32")
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.with_suffix(".json").read_text() == p2.with_suffix(".json").read_text()


def test_nifti_write_is_deterministic(tmp_path, volume):
    p1 = save_nifti(volume, tmp_path / "a.nii.gz")
    p2 = save_nifti(volume, tmp_path / "b.nii.gz")
    assert p1.read_bytes() == p2.read_bytes()
