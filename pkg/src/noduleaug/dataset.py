"""Dataset manifests: scan filtering, size/attenuation labels, splits.

The manifest file is a JSON array of entries:
{scan_id, path, spacing_mm, n_slices, split,
 nodules: [{box: [z0,y0,x0,z1,y1,x1], diameter_mm, size_class, attenuation_class}]}
plus optional "synthetic" and "source_scan_id" keys on augmented entries.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigurationError, InvalidArgumentError
from .volume import Box3

SIZE_CLASSES = ("small", "medium", "large")
ATTENUATION_CLASSES = ("solid", "part_solid", "ggn")
SPLITS = ("train", "val", "test")

# scan admission rules: thin slices, diagnostic in-plane resolution, and a
# bounded slice count after 1.0 mm axial resampling
MAX_SLICE_THICKNESS_MM = 3.0
IN_PLANE_SPACING_MM = (0.5, 0.9)
TARGET_SLICE_THICKNESS_MM = 1.0
MAX_SLICES_AFTER_RESAMPLE = 400


def classify_size(diameter_mm: float) -> str:
    """Diameter taxonomy: <=10 small, (10, 20] medium, >20 large.

    The boundaries belong to the lower class so the mapping is total and
    deterministic at 10 mm and 20 mm.
    """
    if not diameter_mm > 0:
        raise InvalidArgumentError(f"diameter must be > 0 mm, got {diameter_mm}")
    if diameter_mm <= 10.0:
        return "small"
    if diameter_mm <= 20.0:
        return "medium"
    return "large"


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    box: Box3
    diameter_mm: float
    size_class: str
    attenuation_class: str

    def __post_init__(self):
        if self.size_class not in SIZE_CLASSES:
            raise InvalidArgumentError(f"unknown size class {self.size_class!r}")
        if self.attenuation_class not in ATTENUATION_CLASSES:
            raise InvalidArgumentError(f"unknown attenuation class {self.attenuation_class!r}")
        if classify_size(self.diameter_mm) != self.size_class:
            raise InvalidArgumentError(
                f"size class {self.size_class!r} inconsistent with diameter "
                f"{self.diameter_mm} mm (expected {classify_size(self.diameter_mm)!r})")

    def to_json(self) -> dict:
        return {
            "box": self.box.as_list(),
            "diameter_mm": self.diameter_mm,
            "size_class": self.size_class,
            "attenuation_class": self.attenuation_class,
        }

    @staticmethod
    def from_json(scan_id: str, obj: dict) -> "NoduleAnnotation":
        return NoduleAnnotation(
            scan_id=scan_id,
            box=Box3.from_list(obj["box"]),
            diameter_mm=float(obj["diameter_mm"]),
            size_class=obj["size_class"],
            attenuation_class=obj["attenuation_class"],
        )


@dataclass(frozen=True)
class ScanEntry:
    scan_id: str
    path: str
    spacing_mm: tuple[float, float, float]  # (dz, dy, dx)
    n_slices: int
    split: str | None = None
    nodules: tuple[NoduleAnnotation, ...] = ()
    synthetic: bool = False
    source_scan_id: str | None = None

    def __post_init__(self):
        if self.split is not None and self.split not in SPLITS:
            raise InvalidArgumentError(f"unknown split {self.split!r}")
        object.__setattr__(self, "nodules", tuple(self.nodules))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        for n in self.nodules:
            if n.scan_id != self.scan_id:
                raise InvalidArgumentError(
                    f"nodule for scan {n.scan_id!r} attached to entry {self.scan_id!r}")

    def to_json(self) -> dict:
        obj = {
            "scan_id": self.scan_id,
            "path": self.path,
            "spacing_mm": list(self.spacing_mm),
            "n_slices": self.n_slices,
            "split": self.split,
            "nodules": [n.to_json() for n in self.nodules],
        }
        if self.synthetic:
            obj["synthetic"] = True
            obj["source_scan_id"] = self.source_scan_id
        return obj

    @staticmethod
    def from_json(obj: dict) -> "ScanEntry":
        scan_id = obj["scan_id"]
        return ScanEntry(
            scan_id=scan_id,
            path=obj["path"],
            spacing_mm=tuple(obj["spacing_mm"]),
            n_slices=int(obj["n_slices"]),
            split=obj.get("split"),
            nodules=tuple(NoduleAnnotation.from_json(scan_id, n) for n in obj.get("nodules", [])),
            synthetic=bool(obj.get("synthetic", False)),
            source_scan_id=obj.get("source_scan_id"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ScanEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.scan_id in seen:
                raise InvalidArgumentError(f"duplicate scan id {e.scan_id!r} in manifest")
            seen.add(e.scan_id)

    def split_entries(self, split: str) -> tuple[ScanEntry, ...]:
        if split not in SPLITS:
            raise InvalidArgumentError(f"unknown split {split!r}")
        return tuple(e for e in self.entries if e.split == split)

    def nodule_count(self) -> int:
        return sum(len(e.nodules) for e in self.entries)

    def save(self, path: str | Path) -> Path:
        """Write JSON; volume paths are stored relative to the manifest file
        (".." segments allowed), keeping reruns byte-identical across
        output roots."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        rows = []
        for e in self.entries:
            obj = e.to_json()
            p = Path(obj["path"])
            if p.is_absolute():
                obj["path"] = Path(os.path.relpath(p.resolve(), base)).as_posix()
            rows.append(obj)
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        """Read JSON; relative volume paths resolve against the manifest's directory."""
        path = Path(path)
        base = path.parent.resolve()
        entries = []
        for obj in json.loads(path.read_text()):
            if not Path(obj["path"]).is_absolute():
                obj = {**obj, "path": str(base / obj["path"])}
            entries.append(ScanEntry.from_json(obj))
        return DatasetManifest(tuple(entries))


def slices_after_axial_resample(n_slices: int, dz: float,
                                target_dz: float = TARGET_SLICE_THICKNESS_MM) -> int:
    return int(round((n_slices - 1) * dz / target_dz)) + 1


def filter_scans(manifest: DatasetManifest) -> tuple[DatasetManifest, list[tuple[str, str]]]:
    """Apply the admission rules; returns (kept manifest, [(scan_id, reason)]).

    Reason codes: "metadata", "thickness", "spacing", "slices". Order of
    kept entries is preserved; filtering a filtered manifest is a no-op.
    """
    kept: list[ScanEntry] = []
    rejected: list[tuple[str, str]] = []
    for e in manifest.entries:
        try:
            dz, dy, dx = e.spacing_mm
            n = int(e.n_slices)
        except (TypeError, ValueError):
            rejected.append((e.scan_id, "metadata"))
            continue
        if dz <= 0 or dy <= 0 or dx <= 0 or n < 1:
            rejected.append((e.scan_id, "metadata"))
        elif dz > MAX_SLICE_THICKNESS_MM:
            rejected.append((e.scan_id, "thickness"))
        elif not (IN_PLANE_SPACING_MM[0] <= dy <= IN_PLANE_SPACING_MM[1]
                  and IN_PLANE_SPACING_MM[0] <= dx <= IN_PLANE_SPACING_MM[1]):
            rejected.append((e.scan_id, "spacing"))
        elif slices_after_axial_resample(n, dz) > MAX_SLICES_AFTER_RESAMPLE:
            rejected.append((e.scan_id, "slices"))
        else:
            kept.append(e)
    return DatasetManifest(tuple(kept)), rejected


def split_dataset(manifest: DatasetManifest,
                  ratios: tuple[float, float, float] = (0.75, 0.10, 0.15),
                  seed: int = 0,
                  nodule_cap: int | None = None,
                  explicit: dict[str, str] | None = None) -> DatasetManifest:
    """Assign every scan to exactly one of train/val/test.

    Deterministic given the seed. Scans with more than nodule_cap nodules
    are routed to train regardless of the draw (heavily diseased patients
    stay out of val/test). An explicit {scan_id: split} map overrides
    everything else for the scans it names.
    """
    if explicit is None:
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"split ratios must sum to 1, got {ratios}")
        if any(r < 0 for r in ratios):
            raise InvalidArgumentError(f"split ratios must be non-negative, got {ratios}")

    assigned: dict[str, str] = {}
    free: list[ScanEntry] = []
    for e in manifest.entries:
        if explicit is not None and e.scan_id in explicit:
            split = explicit[e.scan_id]
            if split not in SPLITS:
                raise InvalidArgumentError(f"unknown split {split!r} for {e.scan_id!r}")
            assigned[e.scan_id] = split
        elif nodule_cap is not None and len(e.nodules) > nodule_cap:
            assigned[e.scan_id] = "train"
        else:
            free.append(e)

    if free:
        rng = random.Random(seed)
        order = list(free)
        rng.shuffle(order)
        n = len(order)
        n_val = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        n_val = min(n_val, n)
        n_test = min(n_test, n - n_val)
        for i, e in enumerate(order):
            if i < n_val:
                assigned[e.scan_id] = "val"
            elif i < n_val + n_test:
                assigned[e.scan_id] = "test"
            else:
                assigned[e.scan_id] = "train"

    return DatasetManifest(tuple(replace(e, split=assigned[e.scan_id]) for e in manifest.entries))


def require_split(manifest: DatasetManifest, split: str) -> tuple[ScanEntry, ...]:
    entries = manifest.split_entries(split)
    if not entries:
        raise ConfigurationError(f"manifest has no scans in the {split!r} split")
    return entries
