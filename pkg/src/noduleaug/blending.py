"""Boundary blending and native-resolution write-back of synthetic nodules.

The blend shell straddles each face of the nodule box: shell_depth voxel
layers inside plus shell_depth outside. Every iteration simultaneously
replaces each shell voxel with the mean of itself and its 6 axial
neighbors (Jacobi update, order-independent); neighbors beyond the VOI
border replicate the edge value. Voxels outside the shell are never
written, so blending is local by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InvalidArgumentError, OutOfBoundsError
from .volume import VOI_SIDE, Box3, Voi, Volume, resize_trilinear


@dataclass(frozen=True)
class BlendConfig:
    shell_depth: int = 3
    iterations: int = 5

    def __post_init__(self):
        if self.shell_depth < 0:
            raise InvalidArgumentError(f"shell_depth must be >= 0, got {self.shell_depth}")
        if self.iterations < 0:
            raise InvalidArgumentError(f"iterations must be >= 0, got {self.iterations}")


def shell_mask(shape: tuple[int, int, int], nodule_box: Box3, shell_depth: int) -> np.ndarray:
    """Voxels within shell_depth of a box face, inside or outside, clamped."""
    mask = np.zeros(shape, dtype=bool)
    if shell_depth == 0:
        return mask
    outer = nodule_box.dilate(shell_depth).clip_to(shape)
    if outer is None:
        return mask
    mask[outer.min_corner[0]:outer.max_corner[0],
         outer.min_corner[1]:outer.max_corner[1],
         outer.min_corner[2]:outer.max_corner[2]] = True
    inner_min = tuple(nodule_box.min_corner[i] + shell_depth for i in range(3))
    inner_max = tuple(nodule_box.max_corner[i] - shell_depth for i in range(3))
    if all(inner_max[i] > inner_min[i] for i in range(3)):
        inner = Box3(inner_min, inner_max).clip_to(shape)
        if inner is not None:
            mask[inner.min_corner[0]:inner.max_corner[0],
                 inner.min_corner[1]:inner.max_corner[1],
                 inner.min_corner[2]:inner.max_corner[2]] = False
    return mask


def blend_boundary(voi_composited: np.ndarray, nodule_box: Box3,
                   config: BlendConfig = BlendConfig()) -> np.ndarray:
    """Smooth the nodule-box seam by iterated 7-point-stencil averaging."""
    arr = np.asarray(voi_composited, dtype=np.float32)
    if arr.ndim != 3:
        raise InvalidArgumentError(f"expected a 3D array, got shape {arr.shape}")
    out = arr.copy()
    if config.iterations == 0 or config.shell_depth == 0:
        return out
    mask = shell_mask(arr.shape, nodule_box, config.shell_depth)
    if not mask.any():
        return out
    # accumulate in float64 so the 7x/7 mean of equal values is exact and
    # constants stay a true fixed point after the cast back
    work = out.astype(np.float64)
    for _ in range(config.iterations):
        padded = np.pad(work, 1, mode="edge")
        stencil = (
            padded[1:-1, 1:-1, 1:-1]
            + padded[:-2, 1:-1, 1:-1] + padded[2:, 1:-1, 1:-1]
            + padded[1:-1, :-2, 1:-1] + padded[1:-1, 2:, 1:-1]
            + padded[1:-1, 1:-1, :-2] + padded[1:-1, 1:-1, 2:]
        ) / 7.0
        work[mask] = stencil[mask]
    out[mask] = work[mask].astype(np.float32)
    return out


def writeback_footprint(voi: Voi, shell_depth: int) -> Box3:
    """Scan-grid voxels whose resampled value can read a modified VOI voxel.

    Modified VOI voxels live in the nodule box dilated by shell_depth.
    Under pixel-center trilinear mapping a scan voxel w samples VOI
    coordinate src = (w - box_min + 0.5) / k - 0.5 with k = extent / 64;
    its stencil touches [m0, m1) iff m0 - 1 < src < m1.
    """
    box = voi.source_origin
    modified = voi.nodule_box.dilate(shell_depth)
    mins, maxs = [], []
    for ax in range(3):
        k = box.extents[ax] / float(VOI_SIDE)
        m0, m1 = modified.min_corner[ax], modified.max_corner[ax]
        # src(w) > m0 - 1  and  src(w) < m1, solved for integer w
        low = box.min_corner[ax] + (m0 - 0.5) * k - 0.5
        high = box.min_corner[ax] + (m1 + 0.5) * k - 0.5
        mins.append(int(math.floor(low)) + 1)
        maxs.append(int(math.ceil(high)))
    return Box3(tuple(mins), tuple(maxs))


def finalize_synthetic(scan: Volume, voi: Voi, blended: np.ndarray,
                       shell_depth: int = 3) -> Volume:
    """Resample the blended VOI to the scan grid and write the nodule region back.

    Only scan voxels inside the write-back footprint (nodule box plus blend
    shell, mapped through the working-resolution scaling) are written; all
    other voxels stay bitwise identical. When the VOI is at native
    resolution the values are copied without interpolation.
    """
    blended = np.asarray(blended, dtype=np.float32)
    if blended.shape != (VOI_SIDE,) * 3:
        raise InvalidArgumentError(f"blended VOI must be 64^3, got {blended.shape}")
    if voi.source_scan_id is not None and scan.scan_id is not None \
            and voi.source_scan_id != scan.scan_id:
        raise ConsistencyError(
            f"VOI from scan {voi.source_scan_id!r} finalized into {scan.scan_id!r}")
    box = voi.source_origin
    if box.clip_to(scan.shape) is None:
        raise OutOfBoundsError(f"VOI footprint {box} outside scan of shape {scan.shape}")

    footprint = writeback_footprint(voi, shell_depth)
    target = footprint.clip_to(scan.shape)
    if target is None:
        return scan.with_data(scan.data.copy())

    out = scan.data.copy()
    dst = tuple(slice(target.min_corner[i], target.max_corner[i]) for i in range(3))
    if box.extents == (VOI_SIDE,) * 3:
        src = tuple(
            slice(target.min_corner[i] - box.min_corner[i],
                  target.max_corner[i] - box.min_corner[i]) for i in range(3))
        out[dst] = blended[src]
        return scan.with_data(out)

    native = resize_trilinear(blended, box.extents)
    src = tuple(
        slice(target.min_corner[i] - box.min_corner[i],
              target.max_corner[i] - box.min_corner[i]) for i in range(3))
    out[dst] = native[src]
    return scan.with_data(out)
