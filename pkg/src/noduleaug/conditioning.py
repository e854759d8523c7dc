"""Generator input assembly: noise boxes and tiled condition channels.

The channel order is frozen and written into checkpoints:
(voi, small, medium, large, solid, part_solid, ggn).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ATTENUATION_CLASSES, SIZE_CLASSES
from .errors import InvalidArgumentError
from .volume import NODULE_SIDE, VOI_SIDE, Box3, Voi

CHANNEL_ORDER = ("voi", *SIZE_CLASSES, *ATTENUATION_CLASSES)
NOISE_LOW, NOISE_HIGH = -0.5, 0.5


@dataclass(frozen=True)
class ConditionLabel:
    size_class: str
    attenuation_class: str

    def __post_init__(self):
        if self.size_class not in SIZE_CLASSES:
            raise InvalidArgumentError(f"unknown size class {self.size_class!r}")
        if self.attenuation_class not in ATTENUATION_CLASSES:
            raise InvalidArgumentError(f"unknown attenuation class {self.attenuation_class!r}")

    @property
    def active_channels(self) -> tuple[int, int]:
        return (
            CHANNEL_ORDER.index(self.size_class),
            CHANNEL_ORDER.index(self.attenuation_class),
        )


@dataclass(frozen=True)
class ConditionedInput:
    """64 x 64 x 64 x 7 generator input: noise-boxed VOI + one-hot tiles."""

    tensor: np.ndarray
    label: ConditionLabel
    noise_box: Box3

    def __post_init__(self):
        arr = np.asarray(self.tensor, dtype=np.float32)
        if arr.shape != (VOI_SIDE, VOI_SIDE, VOI_SIDE, 1 + len(CHANNEL_ORDER) - 1):
            raise InvalidArgumentError(f"conditioned input must be 64^3 x 7, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        if arr is self.tensor and arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "tensor", arr)


def insert_noise_box(voi: Voi, rng_seed: int) -> Voi:
    """Replace the centered nodule cube with i.i.d. U[-0.5, 0.5) samples."""
    rng = np.random.default_rng(rng_seed)
    data = np.array(voi.data)
    b = voi.nodule_box
    data[b.min_corner[0]:b.max_corner[0],
         b.min_corner[1]:b.max_corner[1],
         b.min_corner[2]:b.max_corner[2]] = rng.uniform(
        NOISE_LOW, NOISE_HIGH, size=b.extents).astype(np.float32)
    return voi.with_data(data)


def tile_conditions(label: ConditionLabel, side: int = VOI_SIDE) -> np.ndarray:
    """One-hot condition channels tiled over the cube: (side^3, 6), channels last."""
    tiles = np.zeros((side, side, side, len(CHANNEL_ORDER) - 1), dtype=np.float32)
    for ch in label.active_channels:
        tiles[..., ch - 1] = 1.0
    return tiles


def assemble_input(voi_noised: Voi, label: ConditionLabel) -> ConditionedInput:
    """Concatenate the noise-boxed VOI with its tiled conditions."""
    tensor = np.concatenate(
        [voi_noised.data[..., None], tile_conditions(label)], axis=-1)
    return ConditionedInput(tensor=tensor, label=label, noise_box=voi_noised.nodule_box)


def tiles_for_nodule(label: ConditionLabel) -> np.ndarray:
    """Condition channels at nodule resolution (32^3 x 6) for the critic input."""
    return tile_conditions(label, side=NODULE_SIDE)
