import json

import numpy as np
import pytest

from reglat.phantom import (
    JitterSpec,
    PhantomBoundsError,
    PhantomSpec,
    Structure,
    generate_phantom_dataset,
    render_template,
)


def small_spec(**kw):
    defaults = dict(size=16, n_subjects=4, seed=7, val_fraction=0.25)
    defaults.update(kw)
    return PhantomSpec(**defaults)


def read_all_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("data.raw"))}


def centroid(mask):
    return np.array(np.nonzero(mask)).mean(axis=1)


def test_zero_jitter_gives_identical_subjects(tmp_path):
    spec = small_spec()
    m = generate_phantom_dataset(spec, tmp_path)
    vols = [m.load_volume(sid).data for sid in m.ids()]
    segs = [m.load_seg(sid).labels for sid in m.ids()]
    for s in segs[1:]:
        np.testing.assert_array_equal(s, segs[0])
    # intensities differ only by the per-subject noise draw
    template, _ = render_template(spec)
    for v in vols:
        assert np.abs(v - template.data).max() < 0.15


def test_same_seed_byte_identical(tmp_path):
    spec = small_spec(jitter=JitterSpec(translation=(2, 2, 2), rotation_deg=5),
                      smooth_warp_amplitude=0.5)
    generate_phantom_dataset(spec, tmp_path / "a")
    generate_phantom_dataset(spec, tmp_path / "b")
    a = read_all_bytes(tmp_path / "a")
    b = read_all_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) == 2 * spec.n_subjects
    for key in a:
        assert a[key] == b[key], key


def test_translation_only_truth(tmp_path):
    spec = small_spec(n_subjects=5, jitter=JitterSpec(translation=(0, 0, 2.5)))
    m = generate_phantom_dataset(spec, tmp_path)
    truth = json.loads((tmp_path / "truth.json").read_text())
    affines = {sid: np.array(t["affine"]) for sid, t in truth.items()}
    for a in affines.values():
        np.testing.assert_allclose(a[:3, :3], np.eye(3), atol=1e-12)
    # pairwise transforms are pure translations too
    ids = m.ids()
    rel = affines[ids[1]] @ np.linalg.inv(affines[ids[0]])
    np.testing.assert_allclose(rel[:3, :3], np.eye(3), atol=1e-12)

    # recorded affine maps template centroids onto subject centroids
    _, template_seg = render_template(spec)
    for sid in ids:
        seg = m.load_seg(sid).labels
        a = affines[sid]
        for lab in (1, 2):
            src = centroid(template_seg.labels == lab)
            moved = a[:3, :3] @ src + a[:3, 3]
            np.testing.assert_allclose(centroid(seg == lab), moved, atol=0.5)


def test_every_label_nonempty(tmp_path):
    spec = small_spec(jitter=JitterSpec(translation=(2, 2, 2), rotation_deg=10,
                                        scale_range=(0.95, 1.05)),
                      smooth_warp_amplitude=0.4)
    m = generate_phantom_dataset(spec, tmp_path)
    for sid in m.ids():
        seg = m.load_seg(sid)
        for lab in range(1, seg.label_count + 1):
            assert (seg.labels == lab).any(), (sid, lab)


def test_structures_escaping_bounds_rejected(tmp_path):
    big = Structure("ellipsoid", (8, 8, 8), (7, 7, 7), 1.0, 1)
    spec = small_spec(structures=[big], jitter=JitterSpec(translation=(4, 4, 4)))
    with pytest.raises(PhantomBoundsError):
        generate_phantom_dataset(spec, tmp_path)


def test_split_assignment(tmp_path):
    m = generate_phantom_dataset(small_spec(n_subjects=8, val_fraction=0.25), tmp_path)
    assert len(m.ids("train")) == 6
    assert len(m.ids("val")) == 2
