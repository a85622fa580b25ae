import gzip
import json
import struct

import numpy as np
import pytest

from reglat.nifti_import import NiftiError, import_decathlon, read_nifti


def build_nifti(data, spacing=(1.0, 1.0, 1.0), datatype=16, gz=False,
                scl=(1.0, 0.0), order="<"):
    """Assemble NIfTI-1 bytes directly from the documented field offsets;
    this is the test's independent oracle for the importer."""
    nz, ny, nx = data.shape
    header = bytearray(348)
    struct.pack_into(f"{order}i", header, 0, 348)
    struct.pack_into(f"{order}8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(f"{order}h", header, 70, datatype)
    struct.pack_into(f"{order}8f", header, 76, 1.0, spacing[2], spacing[1],
                     spacing[0], 0, 0, 0, 0)
    struct.pack_into(f"{order}f", header, 108, 352.0)
    struct.pack_into(f"{order}2f", header, 112, *scl)
    header[344:348] = b"n+1\x00"
    np_dtype = {2: np.uint8, 4: np.int16, 16: np.float32}[datatype]
    # x varies fastest in the file
    payload = np.ascontiguousarray(data, dtype=np.dtype(np_dtype).newbyteorder(order))
    blob = bytes(header) + b"\x00" * 4 + payload.tobytes()
    return gzip.compress(blob) if gz else blob


def test_reads_float_volume(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.random((4, 5, 6)).astype(np.float32)
    (tmp_path / "v.nii").write_bytes(build_nifti(data, spacing=(2.0, 1.5, 1.0)))
    out, spacing = read_nifti(tmp_path / "v.nii")
    np.testing.assert_allclose(out, data, rtol=1e-7)
    assert spacing == (2.0, 1.5, 1.0)


def test_reads_gzipped_and_scaled(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    (tmp_path / "v.nii.gz").write_bytes(
        build_nifti(data, datatype=4, gz=True, scl=(0.5, 10.0)))
    out, _ = read_nifti(tmp_path / "v.nii.gz")
    np.testing.assert_allclose(out, data * 0.5 + 10.0)


def test_big_endian(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    (tmp_path / "v.nii").write_bytes(build_nifti(data, order=">"))
    out, _ = read_nifti(tmp_path / "v.nii")
    np.testing.assert_allclose(out, data)


def test_bad_magic_rejected(tmp_path):
    blob = bytearray(build_nifti(np.zeros((2, 2, 2), np.float32)))
    blob[344:348] = b"xxxx"
    (tmp_path / "v.nii").write_bytes(bytes(blob))
    with pytest.raises(NiftiError, match="magic"):
        read_nifti(tmp_path / "v.nii")


def test_truncated_payload_rejected(tmp_path):
    blob = build_nifti(np.zeros((4, 4, 4), np.float32))
    (tmp_path / "v.nii").write_bytes(blob[:-20])
    with pytest.raises(NiftiError, match="truncated"):
        read_nifti(tmp_path / "v.nii")


def test_decathlon_layout(tmp_path):
    rng = np.random.default_rng(1)
    src = tmp_path / "Task99_Toy"
    (src / "imagesTr").mkdir(parents=True)
    (src / "labelsTr").mkdir()
    items = []
    for i in range(4):
        image = rng.random((4, 4, 4)).astype(np.float32)
        labels = rng.integers(0, 3, size=(4, 4, 4)).astype(np.uint8)
        (src / "imagesTr" / f"toy_{i:02d}.nii.gz").write_bytes(
            build_nifti(image, gz=True))
        (src / "labelsTr" / f"toy_{i:02d}.nii.gz").write_bytes(
            build_nifti(labels, datatype=2, gz=True))
        items.append({"image": f"./imagesTr/toy_{i:02d}.nii.gz",
                      "label": f"./labelsTr/toy_{i:02d}.nii.gz"})
    (src / "dataset.json").write_text(json.dumps({"training": items}))

    manifest = import_decathlon(src, tmp_path / "store", val_fraction=0.25)
    assert len(manifest.ids()) == 4
    assert len(manifest.ids("val")) == 1
    vol = manifest.load_volume("toy_00")
    assert vol.shape == (4, 4, 4)
    seg = manifest.load_seg("toy_01")
    assert seg.labels.max() <= seg.label_count
