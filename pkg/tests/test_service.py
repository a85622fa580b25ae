import base64

import pytest
from fastapi.testclient import TestClient

from reglat.latent import collect_latents, fit_pca, save_basis
from reglat.phantom import JitterSpec, PhantomSpec, generate_phantom_dataset
from reglat.probes import ProbeSpec, affine_perturbation_probe, lambda_sweep
from reglat.regnet import ArchConfig, RegistrationModel, save_checkpoint
from reglat.service import ServiceAssets, create_app

K = 4
SIZE = 16


@pytest.fixture(scope="module")
def stack(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    spec = PhantomSpec(size=SIZE, n_subjects=6, seed=41,
                       jitter=JitterSpec(translation=(0, 0, 2)), val_fraction=0.34)
    manifest = generate_phantom_dataset(spec, root / "data")
    cfg = ArchConfig(in_shape=(SIZE,) * 3, base_channels=2, n_downsamplings=2)
    model = RegistrationModel(cfg, seed=43)
    save_checkpoint(root / "checkpoint.bin", model)
    basis = fit_pca(collect_latents(model, manifest, split="train"), k=K)
    save_basis(basis, root / "basis")
    probe = affine_perturbation_probe(model, basis, manifest,
                                      ProbeSpec.parse("translation:z:2"))
    probe.write_csv(root / "probe_translation.csv")
    assets = ServiceAssets.load(
        checkpoint=str(root / "checkpoint.bin"),
        basis_dir=str(root / "basis"),
        manifest_path=str(root / "data" / "manifest.json"),
        probe_dir=str(root),
    )
    client = TestClient(create_app(assets))
    return root, manifest, model, basis, client


class TestMeta:
    def test_uninitialized_returns_503(self):
        client = TestClient(create_app(None))
        assert client.get("/api/meta").status_code == 503

    def test_meta_contents(self, stack):
        _, manifest, model, basis, client = stack
        doc = client.get("/api/meta").json()
        assert doc["api_version"] == 1
        assert doc["K"] == K
        assert len(doc["evr"]) == K
        assert all(a >= b for a, b in zip(doc["evr"], doc["evr"][1:]))
        assert doc["subjects"] == manifest.ids()
        assert doc["shape"] == [SIZE] * 3
        assert doc["model_fingerprint"] == model.fingerprint()

    def test_unknown_route_404(self, stack):
        *_, client = stack
        assert client.get("/api/nonsense").status_code == 404


class TestSlice:
    def test_dimensions_match_volume(self, stack):
        *_, client = stack
        doc = client.get("/api/subject/s000/slice?axis=1&index=8").json()
        blob = base64.b64decode(doc["image_pgm"])
        header = blob.split(b"\n")[1].split()
        assert [int(header[0]), int(header[1])] == [SIZE, SIZE]
        assert all(c["role"] == "original" for c in doc["contours"])

    def test_unknown_subject_404(self, stack):
        *_, client = stack
        assert client.get("/api/subject/ghost/slice?axis=0&index=0").status_code == 404

    def test_bad_index_422(self, stack):
        *_, client = stack
        assert client.get("/api/subject/s000/slice?axis=0&index=99").status_code == 422
        assert client.get("/api/subject/s000/slice?axis=7&index=0").status_code == 422

    def test_identical_requests_identical_bytes(self, stack):
        *_, client = stack
        a = client.get("/api/subject/s001/slice?axis=0&index=8").content
        b = client.get("/api/subject/s001/slice?axis=0&index=8").content
        assert a == b


class TestDeform:
    def test_zero_coefficients_keep_contours_coincident(self, stack):
        *_, client = stack
        doc = client.post("/api/deform", json={
            "subject_id": "s000", "coefficients": [0.0] * K,
            "axis": 0, "slice_index": 8,
        }).json()
        orig = doc["contours_original"]
        deformed = doc["contours_deformed"]
        assert len(orig) == len(deformed) > 0
        for a, b in zip(orig, deformed):
            assert a["points"] == b["points"]
        assert doc["jacobian_stats"]["fold_fraction"] == 0.0
        assert doc["jacobian_stats"]["min_det"] == pytest.approx(1.0)

    def test_wrong_coefficient_length_422(self, stack):
        *_, client = stack
        resp = client.post("/api/deform", json={
            "subject_id": "s000", "coefficients": [0.0] * (K - 1),
            "axis": 0, "slice_index": 8,
        })
        assert resp.status_code == 422

    def test_one_hot_matches_lambda_sweep_bytes(self, stack, tmp_path):
        root, manifest, model, basis, client = stack
        lam, j = 120.0, 2
        files = lambda_sweep(model, basis, manifest, "s000", j, [lam], tmp_path)
        coeffs = [0.0] * K
        coeffs[j - 1] = lam
        doc = client.post("/api/deform", json={
            "subject_id": "s000", "coefficients": coeffs,
            "axis": 0, "slice_index": SIZE // 2,
        }).json()
        served = base64.b64decode(doc["image_pgm"])
        from_file = next(f for f in files if f.name.endswith("axis0.pgm")).read_bytes()
        assert served == from_file

    def test_deform_deterministic(self, stack):
        *_, client = stack
        body = {"subject_id": "s002", "coefficients": [10.0] + [0.0] * (K - 1),
                "axis": 2, "slice_index": 5}
        assert (client.post("/api/deform", json=body).content
                == client.post("/api/deform", json=body).content)


class TestProbeEndpoint:
    def test_summary_matches_csv(self, stack):
        root, *_ , client = stack
        doc = client.get("/api/probe/translation").json()
        assert len(doc["components"]) == K
        from reglat.probes import ProbeResult
        ref = ProbeResult.read_csv(root / "probe_translation.csv")
        med = ref.medians
        for j, comp in enumerate(doc["components"]):
            assert comp["median"] == pytest.approx(med[j], rel=1e-12)

    def test_missing_probe_404(self, stack):
        *_, client = stack
        assert client.get("/api/probe/rotation").status_code == 404
