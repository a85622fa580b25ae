"""Pair sampling, augmentation, the optimization loop and evaluation.

A training run owns a directory: ``config.json`` (resolved settings),
``loss.csv`` (one row per optimizer step), and ``checkpoint_*.bin``. The run
is deterministic for a fixed seed when torch runs single-threaded.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch

from . import losses as losses_mod
from .losses import LossWeights, one_hot
from .regnet import ArchConfig, RegistrationModel, save_checkpoint
from .volgrid import DatasetManifest, SegMap, Volume, affine_about_center, apply_affine, normalize_volume
from .warp import jacobian_determinant_map, warp_trilinear

LOSS_CSV_FIELDS = [
    "epoch", "step", "L_total",
    "L_sim_f", "L_seg_f", "L_smooth_f", "L_jac_f",
    "L_sim_b", "L_seg_b", "L_smooth_b", "L_jac_b",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5        # per axis
    rot_deg: float = 10.0         # +/- range, random axis
    trans_vox: float = 5.0        # +/- range per axis
    zoom_range: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, rot_deg=0.0, trans_vox=0.0, zoom_range=(1.0, 1.0))

    def is_identity(self) -> bool:
        return (self.flip_prob == 0.0 and self.rot_deg == 0.0
                and self.trans_vox == 0.0 and self.zoom_range == (1.0, 1.0))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_every: int = 0           # checkpoint every N epochs; 0 = end only
    num_threads: int | None = None

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr/batch_size/epochs out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["zoom_range"] = list(self.augment.zoom_range)
        return d


def sample_pairs(manifest: DatasetManifest, rng: np.random.Generator,
                 split: str = "train"):
    """Endless stream of ordered (moving_id, fixed_id) pairs, uniform over
    all ordered pairs of distinct subjects."""
    ids = manifest.ids(split)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 subjects in split {split!r}")
    n = len(ids)
    while True:
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        yield ids[i], ids[j]


def augment(v: Volume, seg: SegMap, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[Volume, SegMap]:
    """One random spatial transform applied jointly to volume and labels."""
    if cfg.is_identity():
        return v, seg
    flips = tuple(ax for ax in range(3) if rng.random() < cfg.flip_prob)
    rot_axis = int(rng.integers(0, 3))
    rot_deg = float(rng.uniform(-cfg.rot_deg, cfg.rot_deg)) if cfg.rot_deg > 0 else 0.0
    trans = tuple(float(rng.uniform(-cfg.trans_vox, cfg.trans_vox)) if cfg.trans_vox > 0
                  else 0.0 for _ in range(3))
    lo, hi = cfg.zoom_range
    zoom = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    a = affine_about_center(v.shape, trans, rot_axis, rot_deg, zoom, flips)
    return apply_affine(v, a), apply_affine(seg, a)


class _Dataset:
    """Normalized volumes and label maps for one split, kept in memory."""

    def __init__(self, manifest: DatasetManifest, split: str):
        self.ids = manifest.ids(split)
        self.volumes: dict[str, Volume] = {}
        self.segs: dict[str, SegMap] = {}
        for sid in self.ids:
            self.volumes[sid] = normalize_volume(manifest.load_volume(sid))
            self.segs[sid] = manifest.load_seg(sid)
        self.label_count = self.segs[self.ids[0]].label_count if self.ids else 0


def _batch_tensors(dataset: _Dataset, pairs, aug_cfg: AugmentConfig,
                   rng: np.random.Generator):
    n_classes = dataset.label_count + 1
    ms, fs, msegs, fsegs = [], [], [], []
    for mid, fid in pairs:
        mv, mseg = augment(dataset.volumes[mid], dataset.segs[mid], aug_cfg, rng)
        fv, fseg = augment(dataset.volumes[fid], dataset.segs[fid], aug_cfg, rng)
        ms.append(torch.from_numpy(mv.data))
        fs.append(torch.from_numpy(fv.data))
        msegs.append(one_hot(mseg.labels, n_classes))
        fsegs.append(one_hot(fseg.labels, n_classes))
    return (torch.stack(ms)[:, None], torch.stack(fs)[:, None],
            torch.stack(msegs), torch.stack(fsegs))


def train(manifest: DatasetManifest, train_cfg: TrainConfig, arch_cfg: ArchConfig,
          out_dir: str | Path) -> Path:
    """Run the optimization loop; returns the final checkpoint path."""
    if train_cfg.num_threads:
        torch.set_num_threads(train_cfg.num_threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({
        "train": train_cfg.to_dict(),
        "arch": arch_cfg.to_dict(),
    }, indent=1, sort_keys=True))

    rng = np.random.default_rng(train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    model = RegistrationModel(arch_cfg)
    model.network.train()
    optimizer = torch.optim.Adam(model.network.parameters(), lr=train_cfg.lr)

    dataset = _Dataset(manifest, "train")
    pair_stream = sample_pairs(manifest, rng)
    steps_per_epoch = max(1, math.ceil(len(dataset.ids) / train_cfg.batch_size))

    loss_path = out / "loss.csv"
    with open(loss_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS)
        writer.writeheader()
        step = 0
        for epoch in range(train_cfg.epochs):
            for _ in range(steps_per_epoch):
                pairs = [next(pair_stream) for _ in range(train_cfg.batch_size)]
                m, f, mseg, fseg = _batch_tensors(dataset, pairs, train_cfg.augment, rng)
                raw = model.network(m, f, mseg)
                batched = SimpleNamespace(
                    warped_moving=raw["warped_moving"],
                    warped_moving_seg=raw["warped_moving_seg"],
                    fwd_grad=raw["fwd_grad"], bwd_grad=raw["bwd_grad"],
                    fwd_grid=raw["fwd_grid"], bwd_grid=raw["bwd_grid"],
                )
                total, terms = losses_mod.total_loss(batched, f, fseg, m, mseg,
                                                     train_cfg.weights)
                if not torch.isfinite(total):
                    writer.writerow(_loss_row(epoch, step, total, terms))
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step}"
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                writer.writerow(_loss_row(epoch, step, total, terms))
                step += 1
            if train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
                model.network.eval()
                save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.bin", model,
                                epoch=epoch + 1)
                model.network.train()

    model.network.eval()
    final = out / "checkpoint_final.bin"
    save_checkpoint(final, model, epoch=train_cfg.epochs)
    return final


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _loss_row(epoch: int, step: int, total, terms) -> dict:
    row = {"epoch": epoch, "step": step, "L_total": f"{_scalar(total):.8g}"}
    for key in ("sim_f", "seg_f", "smooth_f", "jac_f",
                "sim_b", "seg_b", "smooth_b", "jac_b"):
        row[f"L_{key}"] = f"{_scalar(terms.get(key, 0.0)):.8g}"
    return row


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def per_label_dice(a: np.ndarray, b: np.ndarray, label_count: int) -> list[float]:
    scores = []
    for lab in range(1, label_count + 1):
        am = a == lab
        bm = b == lab
        denom = am.sum() + bm.sum()
        scores.append(1.0 if denom == 0 else float(2.0 * np.logical_and(am, bm).sum() / denom))
    return scores


def hard_dice(a: np.ndarray, b: np.ndarray, label_count: int) -> float:
    """Mean Dice over foreground labels of two integer label volumes."""
    return float(np.mean(per_label_dice(a, b, label_count)))


@dataclass
class PairEval:
    moving: str
    fixed: str
    dice_before: float
    dice_after: float
    fold_fraction: float
    dice_after_per_label: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    split: str
    pairs: list[PairEval]
    before_mean: float
    before_std: float
    after_mean: float
    after_std: float
    fold_fraction_mean: float

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "before_mean": self.before_mean,
            "before_std": self.before_std,
            "after_mean": self.after_mean,
            "after_std": self.after_std,
            "fold_fraction_mean": self.fold_fraction_mean,
            "pairs": [asdict(p) for p in self.pairs],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


@torch.no_grad()
def evaluate(model: RegistrationModel, manifest: DatasetManifest,
             split: str = "val") -> EvalReport:
    """Dice before/after registration over every ordered pair in the split,
    plus the fraction of interior voxels with non-positive Jacobian."""
    dataset = _Dataset(manifest, split)
    ids = dataset.ids
    if len(ids) < 2:
        raise ValueError(f"need at least 2 subjects in split {split!r}")
    n_classes = dataset.label_count + 1

    pairs: list[PairEval] = []
    for mid in ids:
        for fid in ids:
            if mid == fid:
                continue
            m = torch.from_numpy(dataset.volumes[mid].data)[None, None]
            f = torch.from_numpy(dataset.volumes[fid].data)[None, None]
            raw = model.network(m, f)
            mseg = dataset.segs[mid].labels
            fseg = dataset.segs[fid].labels
            warped_oh = warp_trilinear(one_hot(mseg, n_classes)[None], raw["fwd_grid"])
            warped_labels = warped_oh[0].argmax(dim=0).numpy().astype(np.uint8)
            det = jacobian_determinant_map(raw["fwd_grid"])[0]
            interior = det[1:-1, 1:-1, 1:-1]
            after_labels = per_label_dice(warped_labels, fseg, dataset.label_count)
            pairs.append(PairEval(
                moving=mid,
                fixed=fid,
                dice_before=hard_dice(mseg, fseg, dataset.label_count),
                dice_after=float(np.mean(after_labels)),
                fold_fraction=float((interior <= 0).float().mean()),
                dice_after_per_label=after_labels,
            ))

    before = np.array([p.dice_before for p in pairs])
    after = np.array([p.dice_after for p in pairs])
    folds = np.array([p.fold_fraction for p in pairs])
    return EvalReport(
        split=split,
        pairs=pairs,
        before_mean=float(before.mean()),
        before_std=float(before.std()),
        after_mean=float(after.mean()),
        after_std=float(after.std()),
        fold_fraction_mean=float(folds.mean()),
    )
