"""Volume, box, and VOI primitives shared by every pipeline stage.

Coordinates are voxel indices in (z, y, x) order. Boxes are half-open:
the min corner is inside, the max corner is not, so voxel counts and
intersection arithmetic never need a +/-1 correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ConsistencyError, InvalidArgumentError, OutOfBoundsError

VOI_SIDE = 64
NODULE_SIDE = 32

# Default HU window mapped onto [-1, 1] during ingestion. Air (-1000 HU)
# lands on -1, which doubles as the padding value for out-of-scan crops.
DEFAULT_HU_WINDOW = (-1000.0, 400.0)
DEFAULT_INTENSITY_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class Box3:
    """Axis-aligned half-open box [min, max) in voxel coordinates."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        mn = tuple(int(v) for v in self.min_corner)
        mx = tuple(int(v) for v in self.max_corner)
        object.__setattr__(self, "min_corner", mn)
        object.__setattr__(self, "max_corner", mx)
        if any(mx[i] <= mn[i] for i in range(3)):
            raise InvalidArgumentError(f"box must have positive extent: {mn}..{mx}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.max_corner[i] - self.min_corner[i] for i in range(3))

    @property
    def volume(self) -> int:
        ez, ey, ex = self.extents
        return ez * ey * ex

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((self.min_corner[i] + self.max_corner[i]) / 2.0 for i in range(3))

    def contains_point(self, point: Sequence[int]) -> bool:
        return all(self.min_corner[i] <= point[i] < self.max_corner[i] for i in range(3))

    def intersect(self, other: "Box3") -> "Box3 | None":
        mn = tuple(max(self.min_corner[i], other.min_corner[i]) for i in range(3))
        mx = tuple(min(self.max_corner[i], other.max_corner[i]) for i in range(3))
        if any(mx[i] <= mn[i] for i in range(3)):
            return None
        return Box3(mn, mx)

    def dilate(self, by: int) -> "Box3":
        return Box3(
            tuple(m - by for m in self.min_corner),
            tuple(m + by for m in self.max_corner),
        )

    def shift(self, offset: Sequence[int]) -> "Box3":
        return Box3(
            tuple(self.min_corner[i] + int(offset[i]) for i in range(3)),
            tuple(self.max_corner[i] + int(offset[i]) for i in range(3)),
        )

    def clip_to(self, shape: Sequence[int]) -> "Box3 | None":
        mn = tuple(max(0, self.min_corner[i]) for i in range(3))
        mx = tuple(min(int(shape[i]), self.max_corner[i]) for i in range(3))
        if any(mx[i] <= mn[i] for i in range(3)):
            return None
        return Box3(mn, mx)

    def as_list(self) -> list[int]:
        return [*self.min_corner, *self.max_corner]

    @staticmethod
    def from_list(values: Sequence[int]) -> "Box3":
        if len(values) != 6:
            raise InvalidArgumentError(f"box list must have 6 entries, got {len(values)}")
        return Box3(tuple(values[:3]), tuple(values[3:]))

    @staticmethod
    def cube(center: Sequence[int], side: int) -> "Box3":
        half = side // 2
        mn = tuple(int(center[i]) - half for i in range(3))
        return Box3(mn, tuple(m + side for m in mn))


def cubify(box: Box3) -> Box3:
    """Smallest cube with the same center covering the box (side = max extent)."""
    side = max(box.extents)
    c = box.center
    mn = tuple(int(round(c[i] - side / 2.0)) for i in range(3))
    return Box3(mn, tuple(m + side for m in mn))


def iou(a: Box3, b: Box3) -> float:
    """Intersection-over-union of two boxes by voxel volume; 0 when disjoint."""
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    iv = inter.volume
    return iv / float(a.volume + b.volume - iv)


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid plus geometry and intensity metadata.

    data is (depth, height, width) float32, normalized to intensity_range.
    spacing is (dz, dy, dx) in mm, origin the world offset in mm. background
    is the pad value for out-of-scan reads; it defaults to the low end of
    the intensity range (air under the default window). Instances are
    immutable: data is frozen on construction and safe to share.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity_range: tuple[float, float] = DEFAULT_INTENSITY_RANGE
    background: float | None = None
    scan_id: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or any(s < 1 for s in arr.shape):
            raise InvalidArgumentError(f"volume data must be 3D non-empty, got shape {arr.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidArgumentError(f"spacing components must be > 0, got {self.spacing}")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise InvalidArgumentError(f"intensity range must satisfy lo < hi, got {self.intensity_range}")
        arr = np.ascontiguousarray(arr)
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()  # never freeze an array the caller still owns
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "intensity_range", (float(lo), float(hi)))
        if self.background is None:
            object.__setattr__(self, "background", float(lo))
        else:
            object.__setattr__(self, "background", float(self.background))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def bounds(self) -> Box3:
        return Box3((0, 0, 0), self.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=data)


@dataclass(frozen=True)
class Voi:
    """A 64-cube working view around a nodule.

    source_origin locates the crop in the parent scan; its extents may
    differ from 64 when the VOI was built at a zoomed working resolution.
    nodule_box is always the centered 32-cube in VOI-local coordinates.
    """

    data: np.ndarray
    source_scan_id: str | None
    source_origin: Box3
    nodule_box: Box3 = field(
        default_factory=lambda: Box3((16, 16, 16), (48, 48, 48))
    )

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != (VOI_SIDE, VOI_SIDE, VOI_SIDE):
            raise InvalidArgumentError(f"VOI data must be {VOI_SIDE}^3, got {arr.shape}")
        if self.nodule_box.min_corner != (16, 16, 16) or self.nodule_box.max_corner != (48, 48, 48):
            raise InvalidArgumentError("nodule_box must be the centered 32-cube (16,16,16)..(48,48,48)")
        arr = np.ascontiguousarray(arr)
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def with_data(self, data: np.ndarray) -> "Voi":
        return replace(self, data=data)


def normalize_hu(data: np.ndarray, window: tuple[float, float] = DEFAULT_HU_WINDOW,
                 out_range: tuple[float, float] = DEFAULT_INTENSITY_RANGE) -> np.ndarray:
    """Clip HU values to the window and map it linearly onto out_range."""
    lo, hi = window
    if not lo < hi:
        raise InvalidArgumentError(f"window must satisfy lo < hi, got {window}")
    a, b = out_range
    clipped = np.clip(np.asarray(data, dtype=np.float32), lo, hi)
    return (a + (clipped - lo) * ((b - a) / (hi - lo))).astype(np.float32)


def resample_axial(volume: Volume, target_dz: float) -> Volume:
    """Linearly resample along z to the target slice thickness.

    Output depth follows round((D-1) * dz / target_dz) + 1; the in-plane
    grid is untouched. Resampling to the current dz returns the volume
    unchanged (shared frozen data), keeping the identity bitwise.
    """
    if target_dz <= 0:
        raise InvalidArgumentError(f"target_dz must be > 0, got {target_dz}")
    dz = volume.spacing[0]
    if target_dz == dz:
        return volume
    depth = volume.shape[0]
    new_depth = int(round((depth - 1) * dz / target_dz)) + 1
    if new_depth < 1:
        new_depth = 1
    # positions of the new slices in input index space, clamped to the grid
    zs = np.arange(new_depth, dtype=np.float64) * (target_dz / dz)
    zs = np.clip(zs, 0.0, depth - 1)
    i0 = np.floor(zs).astype(np.int64)
    i1 = np.minimum(i0 + 1, depth - 1)
    frac = (zs - i0).astype(np.float32)[:, None, None]
    out = volume.data[i0] * (1.0 - frac) + volume.data[i1] * frac
    return replace(volume, data=out.astype(np.float32),
                   spacing=(float(target_dz), volume.spacing[1], volume.spacing[2]))


def crop_with_padding(volume: Volume, box: Box3) -> np.ndarray:
    """Copy the box contents; out-of-scan voxels take the volume background."""
    out = np.full(box.extents, volume.background, dtype=np.float32)
    inter = box.clip_to(volume.shape)
    if inter is None:
        return out
    dst = tuple(
        slice(inter.min_corner[i] - box.min_corner[i], inter.max_corner[i] - box.min_corner[i])
        for i in range(3)
    )
    src = tuple(slice(inter.min_corner[i], inter.max_corner[i]) for i in range(3))
    out[dst] = volume.data[src]
    return out


def extract_voi(volume: Volume, center: Sequence[int], side: int = VOI_SIDE) -> Voi:
    """Crop a side-cube centered at a voxel, padding with the background value."""
    if side != VOI_SIDE:
        raise InvalidArgumentError(f"VOI side must be {VOI_SIDE}, got {side}")
    center = tuple(int(c) for c in center)
    if not volume.bounds().contains_point(center):
        raise OutOfBoundsError(f"center {center} outside volume of shape {volume.shape}")
    box = Box3.cube(center, side)
    return Voi(crop_with_padding(volume, box), volume.scan_id, box)


def paste_back(volume: Volume, voi: Voi) -> Volume:
    """Write the VOI back into the scan over its source box.

    Only the intersection with the scan is written; padded VOI voxels are
    discarded. Requires the VOI to be at native resolution (box extents
    equal to the data shape).
    """
    if voi.source_scan_id is not None and volume.scan_id is not None \
            and voi.source_scan_id != volume.scan_id:
        raise ConsistencyError(
            f"VOI from scan {voi.source_scan_id!r} pasted into {volume.scan_id!r}")
    box = voi.source_origin
    if box.extents != voi.data.shape:
        raise InvalidArgumentError(
            f"VOI at working resolution (box {box.extents} vs data {voi.data.shape}); "
            "use blending.finalize_synthetic to restore native resolution")
    inter = box.clip_to(volume.shape)
    if inter is None:
        raise OutOfBoundsError(f"VOI box {box} does not intersect volume {volume.shape}")
    out = volume.data.copy()
    dst = tuple(slice(inter.min_corner[i], inter.max_corner[i]) for i in range(3))
    src = tuple(
        slice(inter.min_corner[i] - box.min_corner[i], inter.max_corner[i] - box.min_corner[i])
        for i in range(3)
    )
    out[dst] = voi.data[src]
    return volume.with_data(out)


def resize_trilinear(array: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Trilinear resize with pixel-center coordinate mapping and edge clamping.

    src = (i + 0.5) * in / out - 0.5 per axis. With this convention a
    uniform 2s -> 64 resize restricted to the central 32-cube matches the
    s -> 32 resize of the central s-box except for the one-voxel layer at
    the cube faces (where the crop clamps but the full resize reads its
    neighbors), so nodule and VOI working grids agree where it matters.
    Identical shapes short-circuit to a plain copy.
    """
    array = np.asarray(array, dtype=np.float32)
    out_shape = tuple(int(s) for s in out_shape)
    if any(s < 1 for s in out_shape):
        raise InvalidArgumentError(f"output shape must be positive, got {out_shape}")
    if array.shape == out_shape:
        return array.copy()
    axes = [
        np.clip((np.arange(n, dtype=np.float64) + 0.5) * (array.shape[d] / n) - 0.5,
                0.0, array.shape[d] - 1)
        for d, n in enumerate(out_shape)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grid])
    out = map_coordinates(array, coords, order=1, mode="nearest")
    return out.reshape(out_shape).astype(np.float32)


def crop_resize(volume: Volume, box: Box3, out_side: int = NODULE_SIDE) -> np.ndarray:
    """Resample the box contents onto an out_side cube with trilinear weights."""
    if out_side < 1:
        raise InvalidArgumentError(f"out_side must be >= 1, got {out_side}")
    if box.clip_to(volume.shape) is None or box.intersect(volume.bounds()) != box:
        raise OutOfBoundsError(f"box {box} not within volume of shape {volume.shape}")
    src = tuple(slice(box.min_corner[i], box.max_corner[i]) for i in range(3))
    return resize_trilinear(volume.data[src], (out_side, out_side, out_side))
