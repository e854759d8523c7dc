import pytest

from noduleaug import volume_io
from noduleaug.dataset import DatasetManifest, ScanEntry
from noduleaug.phantom import default_class_mix, generate_phantom


def build_phantom_dataset(out_dir, n_scans=3, n_nodules=2, shape=(64, 96, 96),
                          seed0=500, splits=None):
    """Write phantom volumes + a manifest; returns the manifest."""
    entries = []
    for k in range(n_scans):
        vol, anns = generate_phantom(seed=seed0 + k, shape=shape, n_nodules=n_nodules,
                                     classes=default_class_mix(n_nodules, offset=k))
        path = volume_io.save_raw(vol, out_dir / f"{vol.scan_id}.f32")
        split = splits[k] if splits else "train"
        entries.append(ScanEntry(
            scan_id=vol.scan_id, path=str(path), spacing_mm=vol.spacing,
            n_slices=vol.shape[0], split=split, nodules=tuple(anns)))
    return DatasetManifest(tuple(entries))


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    return build_phantom_dataset(out, n_scans=3, n_nodules=2)
