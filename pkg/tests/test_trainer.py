import csv

import numpy as np
import pytest
import torch

from reglat.losses import LossWeights, dice_loss, ncc_loss, one_hot
from reglat.phantom import JitterSpec, PhantomSpec, generate_phantom_dataset
from reglat.regnet import ArchConfig, RegistrationModel, load_checkpoint
from reglat.trainer import (
    AugmentConfig,
    TrainConfig,
    augment,
    evaluate,
    hard_dice,
    sample_pairs,
    train,
)
from reglat.volgrid import DatasetManifest, SegMap, SubjectEntry, Volume, normalize_volume


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = PhantomSpec(size=16, n_subjects=6, seed=5,
                       jitter=JitterSpec(translation=(0, 0, 2)),
                       val_fraction=0.34)
    return generate_phantom_dataset(spec, root)


ARCH = ArchConfig(in_shape=(16, 16, 16), base_channels=2, n_downsamplings=2)


class TestSamplePairs:
    def manifest(self, n):
        subs = [SubjectEntry(f"s{i}", "x", "y", "train") for i in range(n)]
        return DatasetManifest(subs)

    def test_two_subjects_only_two_pairs(self):
        stream = sample_pairs(self.manifest(2), np.random.default_rng(0))
        seen = {next(stream) for _ in range(50)}
        assert seen == {("s0", "s1"), ("s1", "s0")}

    def test_never_self_pair(self):
        stream = sample_pairs(self.manifest(5), np.random.default_rng(1))
        for _ in range(10_000):
            m, f = next(stream)
            assert m != f

    def test_seed_reproducibility(self):
        a = sample_pairs(self.manifest(7), np.random.default_rng(42))
        b = sample_pairs(self.manifest(7), np.random.default_rng(42))
        assert [next(a) for _ in range(100)] == [next(b) for _ in range(100)]

    def test_uniform_over_ordered_pairs(self):
        stream = sample_pairs(self.manifest(4), np.random.default_rng(3))
        counts = {}
        n = 24_000
        for _ in range(n):
            counts[next(stream)] = counts.get(next(stream), 0) + 1
        assert len(counts) == 12
        for c in counts.values():
            assert abs(c - n / 12) < 5 * np.sqrt(n / 12)

    def test_single_subject_rejected(self):
        with pytest.raises(ValueError):
            next(sample_pairs(self.manifest(1), np.random.default_rng(0)))


class TestAugment:
    def make_pair(self):
        rng = np.random.default_rng(4)
        v = Volume(rng.random((12, 12, 12), dtype=np.float32))
        labels = np.zeros((12, 12, 12), dtype=np.uint8)
        labels[4:8, 4:8, 4:8] = 1
        return v, SegMap(labels, 1)

    def test_identity_config(self):
        v, s = self.make_pair()
        v2, s2 = augment(v, s, AugmentConfig.none(), np.random.default_rng(0))
        np.testing.assert_array_equal(v2.data, v.data)
        np.testing.assert_array_equal(s2.labels, s.labels)

    def test_translation_moves_seg_with_volume(self):
        v, s = self.make_pair()
        cfg = AugmentConfig(flip_prob=0.0, rot_deg=0.0, trans_vox=2.0,
                            zoom_range=(1.0, 1.0))
        rng = np.random.default_rng(7)
        v2, s2 = augment(v, s, cfg, rng)
        # replay the same draws to learn the translation that was applied
        replay = np.random.default_rng(7)
        for _ in range(3):
            replay.random()          # flip decisions
        replay.integers(0, 3)        # rotation axis
        t = np.array([replay.uniform(-2, 2) for _ in range(3)])
        c_before = np.array(np.nonzero(s.labels == 1)).mean(axis=1)
        c_after = np.array(np.nonzero(s2.labels == 1)).mean(axis=1)
        # nearest-neighbor resampling quantizes the mask, so allow half a voxel
        np.testing.assert_allclose(c_after - c_before, t, atol=0.51)

    def test_same_rng_state_identical(self):
        v, s = self.make_pair()
        cfg = AugmentConfig()
        v1, s1 = augment(v, s, cfg, np.random.default_rng(9))
        v2, s2 = augment(v, s, cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(v1.data, v2.data)
        np.testing.assert_array_equal(s1.labels, s2.labels)


class TestTrain:
    def test_zero_epochs_checkpoint_is_initialization(self, dataset, tmp_path):
        cfg = TrainConfig(epochs=0, seed=13)
        path = train(dataset, cfg, ARCH, tmp_path / "run")
        trained = load_checkpoint(path)
        reference = RegistrationModel(ARCH, seed=13)
        for name, param in reference.network.state_dict().items():
            np.testing.assert_array_equal(trained.parameters[name], param.numpy())

    def test_step_zero_loss_is_unregistered_baseline(self, dataset, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=1, seed=21,
                          augment=AugmentConfig.none(),
                          weights=LossWeights(alpha=0.1, beta=1.0))
        path = train(dataset, cfg, ARCH, tmp_path / "run")
        with open(tmp_path / "run" / "loss.csv", newline="") as fh:
            first = next(csv.DictReader(fh))

        # oracle: with a zero-initialized head the step-0 warp is the
        # identity, so the loss is the plain dissimilarity of the pair
        rng = np.random.default_rng(21)
        mid, fid = next(sample_pairs(dataset, rng))
        m = normalize_volume(dataset.load_volume(mid))
        f = normalize_volume(dataset.load_volume(fid))
        mseg = dataset.load_seg(mid)
        fseg = dataset.load_seg(fid)
        n_classes = mseg.label_count + 1
        sim = ncc_loss(torch.from_numpy(m.data).double(),
                       torch.from_numpy(f.data).double()).item()
        seg = dice_loss(one_hot(mseg.labels, n_classes).double(),
                        one_hot(fseg.labels, n_classes).double()).item()
        assert float(first["L_total"]) == pytest.approx(2 * (sim + seg), abs=1e-4)
        assert float(first["L_smooth_f"]) == 0.0
        assert float(first["L_jac_f"]) == 0.0

    def test_fixed_seed_reproduces_loss_curve(self, dataset, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=2, seed=33, lr=1e-3,
                          num_threads=1)
        train(dataset, cfg, ARCH, tmp_path / "a")
        train(dataset, cfg, ARCH, tmp_path / "b")
        assert ((tmp_path / "a" / "loss.csv").read_bytes()
                == (tmp_path / "b" / "loss.csv").read_bytes())

    def test_run_artifacts_present(self, dataset, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=2, seed=1, eval_every=1)
        train(dataset, cfg, ARCH, tmp_path / "run")
        assert (tmp_path / "run" / "config.json").is_file()
        assert (tmp_path / "run" / "checkpoint_0001.bin").is_file()
        assert (tmp_path / "run" / "checkpoint_final.bin").is_file()
        header = (tmp_path / "run" / "loss.csv").read_text().splitlines()[0]
        assert header == ("epoch,step,L_total,L_sim_f,L_seg_f,L_smooth_f,"
                          "L_jac_f,L_sim_b,L_seg_b,L_smooth_b,L_jac_b")

    def test_divergence_aborts_with_step_logged(self, dataset, tmp_path):
        from reglat.trainer import TrainingDivergedError
        cfg = TrainConfig(epochs=5, batch_size=2, seed=0, lr=1e14,
                          augment=AugmentConfig.none())
        with pytest.raises(TrainingDivergedError, match=r"epoch \d+ step \d+"):
            train(dataset, cfg, ARCH, tmp_path / "run")
        last = (tmp_path / "run" / "loss.csv").read_text().splitlines()[-1]
        assert "nan" in last or "inf" in last


class TestEvaluate:
    def test_dice_self_is_one(self):
        labels = (np.random.default_rng(2).random((8, 8, 8)) > 0.5).astype(np.uint8)
        assert hard_dice(labels, labels, 1) == 1.0

    def test_identity_model_before_equals_after(self, dataset):
        model = RegistrationModel(ARCH, seed=3)  # zero-init head: identity warp
        report = evaluate(model, dataset, split="val")
        for pair in report.pairs:
            assert pair.dice_after == pytest.approx(pair.dice_before, abs=1e-12)
            assert pair.fold_fraction == 0.0

    def test_means_match_direct_recomputation(self, dataset):
        model = RegistrationModel(ARCH, seed=4)
        report = evaluate(model, dataset, split="val")
        ids = dataset.ids("val")
        segs = {s: dataset.load_seg(s).labels for s in ids}
        befores = []
        for mid in ids:
            for fid in ids:
                if mid == fid:
                    continue
                a, b = segs[mid], segs[fid]
                per_label = []
                for lab in (1, 2):
                    inter = np.logical_and(a == lab, b == lab).sum()
                    per_label.append(2 * inter / ((a == lab).sum() + (b == lab).sum()))
                befores.append(np.mean(per_label))
        assert report.before_mean == pytest.approx(np.mean(befores), abs=1e-12)
        assert report.before_std == pytest.approx(np.std(befores), abs=1e-12)
        assert len(report.pairs) == len(ids) * (len(ids) - 1)

    def test_report_round_trip(self, dataset, tmp_path):
        model = RegistrationModel(ARCH, seed=5)
        report = evaluate(model, dataset, split="val")
        report.save(tmp_path / "eval.json")
        import json
        doc = json.loads((tmp_path / "eval.json").read_text())
        assert doc["split"] == "val"
        assert 0.0 <= doc["before_mean"] <= 1.0
