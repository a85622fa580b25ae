"""Isolated import adapter: NIfTI-1 files and Decathlon-style directory
layouts into the native volume store.

Only the read path exists, and only the subset needed for importing: 3D
scalar images, little- or big-endian, optionally gzipped, with scl_slope
rescaling. Everything else in the package stays NIfTI-free.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .volgrid import DatasetManifest, SegMap, SubjectEntry, Volume, save_seg, save_volume

_HEADER_SIZE = 348
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}


class NiftiError(Exception):
    pass


def _read_blob(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Return (data indexed [z, y, x], spacing per axis in the same order)."""
    blob = _read_blob(Path(path))
    if len(blob) < _HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")

    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(f"{order}i", blob, 0)
        if sizeof_hdr == _HEADER_SIZE:
            break
    else:
        raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order")

    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(f"{order}8h", blob, 40)
    if dim[0] != 3:
        raise NiftiError(f"{path}: expected a 3D image, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]

    (datatype,) = struct.unpack_from(f"{order}h", blob, 70)
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(f"{order}8f", blob, 76)
    (vox_offset,) = struct.unpack_from(f"{order}f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{order}2f", blob, 112)

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    count = nx * ny * nz
    start = int(vox_offset) if vox_offset else _HEADER_SIZE
    payload = blob[start:start + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise NiftiError(f"{path}: truncated voxel payload")
    flat = np.frombuffer(payload, dtype=dtype)
    # NIfTI stores x fastest; reshaping C-order as (z, y, x) matches the
    # package's (D, H, W) axis convention directly
    data = flat.reshape(nz, ny, nx).astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return data, spacing


def import_decathlon(root: str | Path, out_dir: str | Path,
                     val_fraction: float = 0.25) -> DatasetManifest:
    """Convert a Decathlon-style directory (dataset.json + imagesTr/labelsTr)
    into the native store and write a manifest."""
    root = Path(root)
    out = Path(out_dir)
    doc = json.loads((root / "dataset.json").read_text())
    entries: list[SubjectEntry] = []
    pairs = doc["training"]
    n_val = int(round(len(pairs) * val_fraction))
    for i, item in enumerate(pairs):
        image, spacing = read_nifti(root / item["image"])
        labels, _ = read_nifti(root / item["label"])
        labels = np.rint(labels).astype(np.uint8)
        sid = Path(item["image"]).name.split(".")[0]
        split = "val" if i >= len(pairs) - n_val else "train"
        save_volume(Volume(image.astype(np.float32), spacing), out / sid / "vol")
        save_seg(SegMap(labels, max(1, int(labels.max())), spacing),
                 out / sid / "seg")
        entries.append(SubjectEntry(sid, f"{sid}/vol", f"{sid}/seg", split))
    manifest = DatasetManifest(entries, root=out)
    manifest.save(out / "manifest.json")
    return manifest
