"""Item pools for the four classification tests.

Layout: <pool_dir>/test{1..4}/{real,synthetic}/<name>.f32 with the raw
volume sidecar. Tests 1-2 hold 32-cube nodules (without / with the
reconstruction term), tests 3-4 hold 64-cube VOIs. Item ids are content
hashes, so no identifier leaks the truth class.
"""

from __future__ import annotations

import base64
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import volume_io
from ..conditioning import ConditionLabel
from ..dataset import DatasetManifest
from ..errors import CapacityError, InvalidArgumentError
from ..gan_training import GanCheckpoint, SynthesisRequest, synthesize_nodule, working_voi
from ..models import composite
from ..volume import Volume

TEST_IDS = (1, 2, 3, 4)
NODULE_TESTS = (1, 2)  # 32-cube items; 3-4 are 64-cube VOIs
TRUTH_CLASSES = ("real", "synthetic")


@dataclass(frozen=True)
class VttPoolItem:
    item_id: str
    test_id: int
    truth: str
    data: np.ndarray
    window: tuple[float, float]


def _item_id(test_id: int, truth: str, name: str) -> str:
    return hashlib.sha1(f"{test_id}/{truth}/{name}".encode()).hexdigest()[:16]


def load_pool(pool_dir: str | Path) -> dict[int, list[VttPoolItem]]:
    pool_dir = Path(pool_dir)
    pool: dict[int, list[VttPoolItem]] = {t: [] for t in TEST_IDS}
    for test_id in TEST_IDS:
        for truth in TRUTH_CLASSES:
            sub = pool_dir / f"test{test_id}" / truth
            if not sub.is_dir():
                continue
            for path in sorted(sub.glob("*.f32")):
                vol = volume_io.load_raw(path)
                pool[test_id].append(VttPoolItem(
                    item_id=_item_id(test_id, truth, path.stem),
                    test_id=test_id, truth=truth,
                    data=np.array(vol.data), window=vol.intensity_range))
    return pool


def render_center_slices(data: np.ndarray, window: tuple[float, float]) -> dict[str, str]:
    """Center axial/coronal/sagittal planes as base64 8-bit grayscale PNGs."""
    lo, hi = window
    if not lo < hi:
        raise InvalidArgumentError(f"window must satisfy lo < hi, got {window}")
    d, h, w = data.shape
    planes = {
        "axial": data[d // 2, :, :],
        "coronal": data[:, h // 2, :],
        "sagittal": data[:, :, w // 2],
    }
    out = {}
    for name, plane in planes.items():
        clipped = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
        img = Image.fromarray((clipped * 255).round().astype(np.uint8), mode="L")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        out[f"{name}_png"] = base64.b64encode(buf.getvalue()).decode("ascii")
    return out


def build_pool(manifest: DatasetManifest,
               checkpoint_plain: GanCheckpoint,
               checkpoint_l1: GanCheckpoint,
               out_dir: str | Path,
               per_class: int = 50,
               seed: int = 0) -> Path:
    """Assemble pools for all four tests from train-split nodules.

    Real items are working-resolution crops of annotated nodules; synthetic
    items are generator outputs for the same nodules (tests 1-2) or their
    composites pasted into the noise-boxed surroundings (tests 3-4).
    Sampling cycles the available nodules when per_class exceeds them.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)

    sources = []
    for entry in manifest.split_entries("train"):
        volume = volume_io.load_volume(entry.path)
        for ann in entry.nodules:
            sources.append((volume, ann))
    if not sources:
        raise CapacityError("manifest has no train-split nodules to build a pool from")

    order = [int(i) for i in rng.permutation(len(sources))]
    picks = [order[i % len(order)] for i in range(per_class)]

    for test_id, checkpoint in ((1, checkpoint_plain), (2, checkpoint_l1),
                                (3, checkpoint_plain), (4, checkpoint_l1)):
        real_dir = out_dir / f"test{test_id}" / "real"
        synt_dir = out_dir / f"test{test_id}" / "synthetic"
        for k, pick in enumerate(picks):
            volume, ann = sources[pick]
            voi, nodule = working_voi(volume, ann.box)
            label = ConditionLabel(ann.size_class, ann.attenuation_class)
            request = SynthesisRequest(annotation=ann, label=label,
                                       seed=int(rng.integers(0, 2 ** 31)))
            fake_nodule, _ = synthesize_nodule(checkpoint, volume, request)
            if test_id in NODULE_TESTS:
                real_data, synt_data = nodule, fake_nodule
            else:
                real_data = np.array(voi.data)
                synt_data = composite(voi.data, fake_nodule)
            rng_window = volume.intensity_range
            for sub, data in ((real_dir, real_data), (synt_dir, synt_data)):
                vol = Volume(data=data, spacing=volume.spacing,
                             intensity_range=rng_window, scan_id=None)
                volume_io.save_raw(vol, sub / f"item{k:04d}.f32")
    return out_dir
