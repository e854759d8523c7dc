"""Volume file formats.

Two interchangeable on-disk representations:

* raw: a little-endian float32 voxel block in z-major order (``.f32``)
  with a JSON sidecar ``{shape, spacing_mm, origin_mm, intensity_range}``
  plus optional ``scan_id`` and ``background`` keys. The sidecar lives
  next to the block with the ``.json`` suffix.
* gzip-compressed NIfTI-1 (``.nii.gz``), float32. The intensity range
  rides in intent_p1/intent_p2, the background in intent_p3, and the
  scan id in descrip. Only the subset this pipeline writes is read back;
  foreign files must be float32 with a plain affine.

Both loaders produce identical Volume values for the same content.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .volume import Volume

_NIFTI_HDR_SIZE = 348
_NIFTI_MAGIC = b"n+1\x00"
_DT_FLOAT32 = 16


def _sidecar_path(path: Path) -> Path:
    # vol.f32 -> vol.json
    return path.with_suffix(".json")


def save_raw(volume: Volume, path: str | Path) -> Path:
    """Write volume as <path>.f32 block + <path>.json sidecar; returns block path."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    path.parent.mkdir(parents=True, exist_ok=True)
    block = np.ascontiguousarray(volume.data, dtype="<f4")
    path.write_bytes(block.tobytes(order="C"))
    sidecar = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing),
        "origin_mm": list(volume.origin),
        "intensity_range": list(volume.intensity_range),
        "background": volume.background,
    }
    if volume.scan_id is not None:
        sidecar["scan_id"] = volume.scan_id
    _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return path


def load_raw(path: str | Path) -> Volume:
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    meta = json.loads(_sidecar_path(path).read_text())
    shape = tuple(int(s) for s in meta["shape"])
    expected = int(np.prod(shape)) * 4
    raw = path.read_bytes()
    if len(raw) != expected:
        raise InvalidArgumentError(
            f"{path}: block holds {len(raw)} bytes, sidecar shape {shape} needs {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return Volume(
        data=data.copy(),
        spacing=tuple(meta["spacing_mm"]),
        origin=tuple(meta["origin_mm"]),
        intensity_range=tuple(meta["intensity_range"]),
        background=meta.get("background"),
        scan_id=meta.get("scan_id"),
    )


def save_nifti(volume: Volume, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dz, dy, dx = volume.spacing
    oz, oy, ox = volume.origin
    nz, ny, nx = volume.shape
    lo, hi = volume.intensity_range

    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)          # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)  # dim
    struct.pack_into("<3f", hdr, 56, lo, hi, volume.background)  # intent_p1..p3
    struct.pack_into("<h", hdr, 70, _DT_FLOAT32)             # datatype
    struct.pack_into("<h", hdr, 72, 32)                      # bitpix
    struct.pack_into("<8f", hdr, 76, 0.0, dx, dy, dz, 0, 0, 0, 0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                    # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)                    # scl_inter
    descrip = (volume.scan_id or "").encode()[:79]
    hdr[148:148 + len(descrip)] = descrip                    # descrip
    struct.pack_into("<h", hdr, 252, 0)                      # qform_code
    struct.pack_into("<h", hdr, 254, 1)                      # sform_code
    struct.pack_into("<4f", hdr, 280, dx, 0, 0, ox)          # srow_x
    struct.pack_into("<4f", hdr, 296, 0, dy, 0, oy)          # srow_y
    struct.pack_into("<4f", hdr, 312, 0, 0, dz, oz)          # srow_z
    hdr[344:348] = _NIFTI_MAGIC

    # voxel block: x fastest per NIfTI; our (z, y, x) C-order already is
    body = np.ascontiguousarray(volume.data, dtype="<f4").tobytes(order="C")
    with open(path, "wb") as raw_fh:
        # filename="" and mtime=0 keep the gzip container byte-deterministic
        with gzip.GzipFile(filename="", fileobj=raw_fh, mode="wb", mtime=0) as fh:
            fh.write(bytes(hdr))
            fh.write(b"\x00" * 4)  # extension flag
            fh.write(body)
    return path


def load_nifti(path: str | Path) -> Volume:
    path = Path(path)
    with gzip.open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise InvalidArgumentError(f"{path}: truncated NIfTI file")
    if blob[344:348] != _NIFTI_MAGIC:
        raise InvalidArgumentError(f"{path}: not a single-file NIfTI-1 image")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise InvalidArgumentError(f"{path}: expected 3D image, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    lo, hi, background = struct.unpack_from("<3f", blob, 56)
    datatype, = struct.unpack_from("<h", blob, 70)
    if datatype != _DT_FLOAT32:
        raise InvalidArgumentError(f"{path}: only float32 NIfTI supported, got datatype {datatype}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    dx, dy, dz = pixdim[1], pixdim[2], pixdim[3]
    vox_offset, = struct.unpack_from("<f", blob, 108)
    descrip = blob[148:228].split(b"\x00", 1)[0].decode(errors="replace")
    sform_code, = struct.unpack_from("<h", blob, 254)
    if sform_code > 0:
        srow_x = struct.unpack_from("<4f", blob, 280)
        srow_y = struct.unpack_from("<4f", blob, 296)
        srow_z = struct.unpack_from("<4f", blob, 312)
        origin = (srow_z[3], srow_y[3], srow_x[3])
    else:
        origin = (0.0, 0.0, 0.0)
    start = int(vox_offset)
    count = nx * ny * nz
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(nz, ny, nx)
    return Volume(
        data=data.copy(),
        spacing=(dz, dy, dx),
        origin=origin,
        intensity_range=(lo, hi),
        background=background,
        scan_id=descrip or None,
    )


def save_volume(volume: Volume, path: str | Path) -> Path:
    """Dispatch on extension: .nii.gz -> NIfTI, anything else -> raw."""
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        return save_nifti(volume, path)
    return save_raw(volume, path)


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        return load_nifti(path)
    return load_raw(path)
