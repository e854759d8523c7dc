"""Procedural chest-like phantom volumes with exact nodule annotations.

The phantom is deliberately simple: a bright thoracic-wall shell around a
dark lung interior with smooth noise, a handful of bright vessel-like
curves, and Gaussian-blob nodules. Blob peak height encodes the
attenuation class and blob width at half peak encodes the size class, so
annotations are exact by construction and measurable by thresholding.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import ATTENUATION_CLASSES, SIZE_CLASSES, NoduleAnnotation, classify_size
from .errors import CapacityError, InvalidArgumentError
from .volume import Box3, Volume

LUNG_INTENSITY = -0.80
WALL_INTENSITY = 0.50
VESSEL_INTENSITY = 0.30
NOISE_SIGMA = 0.02

# blob amplitude above the lung background per attenuation class; peak
# intensities order solid > part_solid > ggn
NODULE_AMPLITUDE = {"solid": 1.20, "part_solid": 0.80, "ggn": 0.45}

# diameter ranges (mm) sampled per size class; kept clear of the 10/20 mm
# class boundaries so measured widths classify unambiguously
DIAMETER_RANGE_MM = {"small": (5.0, 9.0), "medium": (12.0, 18.0), "large": (22.0, 28.0)}

_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _wall_and_lung(shape: tuple[int, int, int],
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Air outside, bright shell, noisy dark lung interior.

    Returns (field, interior mask); nodules and vessels must stay inside
    the mask so the wall never contaminates blob measurements.
    """
    out = np.full(shape, -1.0, dtype=np.float32)
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float32) for s in shape), indexing="ij")
    cy, cx = (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0
    ry, rx = shape[1] * 0.46, shape[2] * 0.46
    body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    interior = ((yy - cy) / max(ry - 3.0, 1.0)) ** 2 + ((xx - cx) / max(rx - 3.0, 1.0)) ** 2 <= 1.0
    out[body] = WALL_INTENSITY
    out[interior] = LUNG_INTENSITY
    noise = gaussian_filter(rng.normal(0.0, 1.0, shape).astype(np.float32), sigma=2.0)
    scale = NOISE_SIGMA / max(float(noise.std()), 1e-8)
    out[interior] += (noise * scale)[interior]
    return out, interior


def _add_vessels(field: np.ndarray, interior_margin: int, rng: np.random.Generator,
                 n_vessels: int, keepout: list[Box3]) -> None:
    """Random-walk bright curves with a small Gaussian cross-section."""
    shape = field.shape
    stamp_r = 2
    for _ in range(n_vessels):
        pos = np.array([rng.uniform(interior_margin, s - interior_margin) for s in shape])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for _ in range(int(max(shape) * 1.5)):
            direction += rng.normal(scale=0.25, size=3)
            direction /= max(np.linalg.norm(direction), 1e-8)
            pos = pos + direction * 1.0
            if any(pos[i] < interior_margin or pos[i] > shape[i] - interior_margin for i in range(3)):
                break
            p = np.round(pos).astype(int)
            # moat wide enough that no vessel intensity lands within 3 voxels
            # of an annotation box (stamps reach 2 voxels from their center)
            if any(b.dilate(6).contains_point(p) for b in keepout):
                continue
            z0, y0, x0 = (max(0, p[i] - stamp_r) for i in range(3))
            z1, y1, x1 = (min(shape[i], p[i] + stamp_r + 1) for i in range(3))
            sub = field[z0:z1, y0:y1, x0:x1]
            gz, gy, gx = np.meshgrid(*(np.arange(a, b, dtype=np.float32)
                                       for a, b in ((z0, z1), (y0, y1), (x0, x1))), indexing="ij")
            r2 = (gz - pos[0]) ** 2 + (gy - pos[1]) ** 2 + (gx - pos[2]) ** 2
            bump = np.exp(-r2 / 1.5).astype(np.float32) * (VESSEL_INTENSITY - LUNG_INTENSITY)
            np.maximum(sub, LUNG_INTENSITY + bump, out=sub)


def _annotation_box(center: tuple[int, int, int], diameter_mm: float,
                    spacing: tuple[float, float, float]) -> Box3:
    """Voxels where the blob is at or above half peak: |i - c| <= r per axis."""
    mins, maxs = [], []
    for i in range(3):
        h = (diameter_mm / 2.0) / spacing[i]
        mins.append(int(math.ceil(center[i] - h)))
        maxs.append(int(math.floor(center[i] + h)) + 1)
    return Box3(tuple(mins), tuple(maxs))


def _stamp_nodule(field: np.ndarray, center: tuple[int, int, int], diameter_mm: float,
                  amplitude: float, spacing: tuple[float, float, float]) -> None:
    sigma_mm = (diameter_mm / 2.0) * 2.0 * _FWHM_TO_SIGMA
    reach = [int(math.ceil(2.5 * sigma_mm / spacing[i])) for i in range(3)]
    z0, y0, x0 = (max(0, center[i] - reach[i]) for i in range(3))
    z1, y1, x1 = (min(field.shape[i], center[i] + reach[i] + 1) for i in range(3))
    gz, gy, gx = np.meshgrid(*(np.arange(a, b, dtype=np.float32)
                               for a, b in ((z0, z1), (y0, y1), (x0, x1))), indexing="ij")
    r2_mm = ((gz - center[0]) * spacing[0]) ** 2 + ((gy - center[1]) * spacing[1]) ** 2 \
        + ((gx - center[2]) * spacing[2]) ** 2
    bump = amplitude * np.exp(-r2_mm / (2.0 * sigma_mm ** 2))
    sub = field[z0:z1, y0:y1, x0:x1]
    np.maximum(sub, LUNG_INTENSITY + bump, out=sub)


def _tail_reach(box: Box3) -> Box3:
    # sub-threshold radius of a blob whose half-peak box this is
    return box.dilate(int(math.ceil(0.3 * max(box.extents))) + 1)


def default_class_mix(n_nodules: int, offset: int = 0) -> list[tuple[str, str]]:
    """Round-robin over the 9 (size, attenuation) combinations.

    The order interleaves sizes so any run of three consecutive combos
    covers three distinct sizes; desk-scale lungs cannot pack several
    large nodules at once.
    """
    combos = [
        (SIZE_CLASSES[i % 3], ATTENUATION_CLASSES[(i + i // 3) % 3])
        for i in range(9)
    ]
    return [combos[(offset + i) % len(combos)] for i in range(n_nodules)]


def generate_phantom(seed: int,
                     shape: tuple[int, int, int] = (64, 64, 96),
                     n_nodules: int = 3,
                     classes: list[tuple[str, str]] | None = None,
                     spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
                     scan_id: str | None = None,
                     n_vessels: int = 6,
                     max_tries: int = 400) -> tuple[Volume, list[NoduleAnnotation]]:
    """Build one phantom scan and its exact nodule annotations.

    Deterministic given the seed. Nodule boxes are pairwise disjoint with a
    two-voxel gap; impossible packings raise CapacityError after bounded
    retries. Vessels steer clear of nodule boxes so threshold-based width
    measurements stay clean.
    """
    if classes is None:
        classes = default_class_mix(n_nodules)
    if len(classes) != n_nodules:
        raise InvalidArgumentError(f"{n_nodules} nodules requested but {len(classes)} classes given")
    for s, a in classes:
        if s not in SIZE_CLASSES or a not in ATTENUATION_CLASSES:
            raise InvalidArgumentError(f"unknown class pair ({s!r}, {a!r})")

    rng = np.random.default_rng(seed)
    scan_id = scan_id if scan_id is not None else f"phantom-{seed:06d}"
    field, interior = _wall_and_lung(shape, rng)

    diameters = []
    for size_class, _ in classes:
        lo, hi = DIAMETER_RANGE_MM[size_class]
        d = float(rng.uniform(lo, hi))
        assert classify_size(d) == size_class
        diameters.append(d)
    # place big blobs first; small ones slot into the leftover space
    order = sorted(range(n_nodules), key=lambda i: -diameters[i])

    def try_pack() -> dict[int, tuple[tuple[int, int, int], Box3]] | None:
        packed: dict[int, tuple[tuple[int, int, int], Box3]] = {}
        for idx in order:
            diameter_mm = diameters[idx]
            half_vox = [diameter_mm / 2.0 / spacing[i] for i in range(3)]
            margin = [int(math.ceil(h)) + 4 for h in half_vox]
            if any(shape[i] <= 2 * margin[i] for i in range(3)):
                raise CapacityError(f"shape {shape} cannot host a {diameter_mm:.1f} mm nodule")
            for _ in range(max_tries):
                center = tuple(int(rng.integers(margin[i], shape[i] - margin[i])) for i in range(3))
                box = _annotation_box(center, diameter_mm, spacing)
                # the measured blob plus margin must sit fully inside the lung
                probe = box.dilate(3).clip_to(shape)
                if probe is None or probe != box.dilate(3):
                    continue
                sl = tuple(slice(probe.min_corner[i], probe.max_corner[i]) for i in range(3))
                if not bool(interior[sl].all()):
                    continue
                # Gaussian tails reach ~1.55x the half-peak radius before
                # dropping under the lowest class threshold; keep every tail
                # clear of the other box's 3-voxel search margin
                if all(_tail_reach(box).intersect(b.dilate(3)) is None
                       and _tail_reach(b).intersect(box.dilate(3)) is None
                       for _, b in packed.values()):
                    packed[idx] = (center, box)
                    break
            else:
                return None
        return packed

    packed = None
    for _ in range(5):
        packed = try_pack()
        if packed is not None:
            break
    if packed is None:
        raise CapacityError(f"could not pack {n_nodules} nodules into shape {shape}")

    annotations: list[NoduleAnnotation] = []
    for idx, (size_class, attenuation_class) in enumerate(classes):
        center, box = packed[idx]
        annotations.append(NoduleAnnotation(
            scan_id=scan_id, box=box, diameter_mm=diameters[idx],
            size_class=size_class, attenuation_class=attenuation_class))
        _stamp_nodule(field, center, diameters[idx], NODULE_AMPLITUDE[attenuation_class], spacing)

    _add_vessels(field, interior_margin=6, rng=rng, n_vessels=n_vessels,
                 keepout=[b for _, b in packed.values()])
    np.clip(field, -1.0, 1.0, out=field)
    volume = Volume(data=field, spacing=spacing, intensity_range=(-1.0, 1.0),
                    background=-1.0, scan_id=scan_id)
    return volume, annotations
