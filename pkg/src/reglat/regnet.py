"""Registration network: a 3D conv encoder/decoder pair fused by latent
subtraction.

Both volumes pass through the encoder independently; the decoder turns the
latent difference into per-axis grid increments. The forward and backward
deformations come from the difference and its negation, so swapping the
input pair exactly swaps the two directions. Skip connections are off by
default; when enabled, the decoder consumes the difference of the two
volumes' encoder features at each resolution (and its negation for the
backward pass), which keeps the antisymmetry exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch
from torch import nn

from . import losses as losses_mod
from . import warp as warp_mod
from .rawio import ContainerError, read_container, write_container
from .volgrid import SegMap, Volume

CHECKPOINT_VERSION = 1


class FingerprintMismatchError(ValueError):
    """An artifact was produced by a different model than the one supplied."""


@dataclass
class ArchConfig:
    in_shape: tuple[int, int, int]
    base_channels: int = 8
    n_downsamplings: int = 3
    kernel_size: int = 3
    negative_slope: float = 0.01
    skip_connections: bool = False
    norm: str = "instance"

    def __post_init__(self) -> None:
        self.in_shape = tuple(int(s) for s in self.in_shape)
        if len(self.in_shape) != 3:
            raise ValueError("in_shape must have three axes")
        factor = 2**self.n_downsamplings
        for s in self.in_shape:
            if s % factor != 0:
                raise ValueError(
                    f"in_shape {self.in_shape} not divisible by 2^{self.n_downsamplings}"
                )
        if self.kernel_size != 3:
            raise ValueError("only kernel_size=3 is supported")
        if self.norm != "instance":
            raise ValueError("only instance normalization is supported")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.n_downsamplings

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        f = 2**self.n_downsamplings
        return tuple(s // f for s in self.in_shape)

    @property
    def latent_dim(self) -> int:
        return self.bottleneck_channels * int(np.prod(self.bottleneck_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{**d, "in_shape": tuple(d["in_shape"])})


@dataclass
class LatentCode:
    """Bottleneck activation (C, d, h, w). ``flat`` is the canonical
    flattening: channel-major, then the three spatial axes in array order.
    The producing model's fingerprint rides along for artifact checks."""

    act: torch.Tensor
    fingerprint: str | None = None

    @property
    def flat(self) -> torch.Tensor:
        return self.act.reshape(-1)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.act.shape)


@dataclass
class RegistrationOutput:
    """Single-pair registration products (torch tensors, detached)."""

    fwd_grad: torch.Tensor
    bwd_grad: torch.Tensor
    fwd_grid: torch.Tensor
    bwd_grid: torch.Tensor
    warped_moving: torch.Tensor
    warped_moving_seg: torch.Tensor | None
    loss_terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0


def _block(in_ch: int, out_ch: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=1, padding=1),
        nn.InstanceNorm3d(out_ch),
        nn.LeakyReLU(slope),
        nn.Conv3d(out_ch, out_ch, 3, stride=1, padding=1),
        nn.InstanceNorm3d(out_ch),
        nn.LeakyReLU(slope),
    )


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        slope = cfg.negative_slope
        self.stem = _block(1, cfg.base_channels, slope)
        downs, blocks = [], []
        ch = cfg.base_channels
        for _ in range(cfg.n_downsamplings):
            downs.append(nn.Conv3d(ch, ch * 2, 3, stride=2, padding=1))
            blocks.append(_block(ch * 2, ch * 2, slope))
            ch *= 2
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor):
        """Returns (latent, feats) with feats[i] at resolution /2^i,
        feats[0] being the full-resolution stem output."""
        feats = [self.stem(x)]
        h = feats[0]
        for down, block in zip(self.downs, self.blocks):
            h = block(down(h))
            feats.append(h)
        return h, feats[:-1]


class Decoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        slope = cfg.negative_slope
        self.skip = cfg.skip_connections
        ups, blocks = [], []
        ch = cfg.bottleneck_channels
        for _ in range(cfg.n_downsamplings):
            ups.append(nn.ConvTranspose3d(ch, ch // 2, 2, stride=2))
            in_ch = ch if self.skip else ch // 2
            blocks.append(_block(in_ch, ch // 2, slope))
            ch //= 2
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv3d(ch, 3, 3, stride=1, padding=1)
        # start at the identity deformation
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor, feats=None) -> torch.Tensor:
        """Latent (B, C, d, h, w) -> increment field (B, 3, D, H, W).

        ``feats`` are the per-resolution skip inputs, finest first; ignored
        when skips are disabled, zeros when enabled but not supplied (e.g.
        decoding a synthetic latent that never went through the encoder)."""
        h = z
        n = len(self.ups)
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            h = up(h)
            if self.skip:
                skip = feats[n - 1 - i] if feats is not None else torch.zeros_like(h)
                h = torch.cat([h, skip], dim=1)
            h = block(h)
        raw = self.head(h)
        return torch.clamp(1.0 + raw, min=0.0)  # nonnegative increments


class RegistrationNetwork(nn.Module):
    """Encoder + decoder with subtraction fusion and symmetric outputs."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor,
                moving_seg: torch.Tensor | None = None) -> dict:
        zm, fm = self.encoder(moving)
        zf, ff = self.encoder(fixed)
        diff = zm - zf
        if self.cfg.skip_connections:
            fdiff = [a - b for a, b in zip(fm, ff)]
            fneg = [-t for t in fdiff]
        else:
            fdiff = fneg = None
        fwd_grad = self.decoder(diff, fdiff)
        bwd_grad = self.decoder(-diff, fneg)
        fwd_grid = warp_mod.integrate_spatial_gradients(fwd_grad)
        bwd_grid = warp_mod.integrate_spatial_gradients(bwd_grad)
        out = {
            "latent_moving": zm,
            "latent_fixed": zf,
            "fwd_grad": fwd_grad,
            "bwd_grad": bwd_grad,
            "fwd_grid": fwd_grid,
            "bwd_grid": bwd_grid,
            "warped_moving": warp_mod.warp_trilinear(moving, fwd_grid),
        }
        if moving_seg is not None:
            out["warped_moving_seg"] = warp_mod.warp_trilinear(moving_seg, fwd_grid)
        return out


class RegistrationModel:
    """Inference-facing wrapper around :class:`RegistrationNetwork`.

    Owns the architecture config and exposes numpy/Volume-level operations;
    the raw module stays available as ``.network`` for training.
    """

    def __init__(self, arch: ArchConfig, seed: int | None = None):
        self.arch = arch
        if seed is not None:
            torch.manual_seed(seed)
        self.network = RegistrationNetwork(arch)
        self.network.eval()

    # -- plumbing ----------------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.arch.to_dict(), sort_keys=True).encode())
        for name, p in sorted(self.network.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def _check_volume(self, v: Volume) -> torch.Tensor:
        if v.shape != self.arch.in_shape:
            raise ValueError(f"volume shape {v.shape} != model input {self.arch.in_shape}")
        return torch.from_numpy(v.data)[None, None]

    # -- core operations ---------------------------------------------------

    @torch.no_grad()
    def encode(self, v: Volume) -> LatentCode:
        t = self._check_volume(v)
        z, _ = self.network.encoder(t)
        return LatentCode(z[0], fingerprint=self.fingerprint())

    @torch.no_grad()
    def decode(self, z: LatentCode | np.ndarray | torch.Tensor) -> np.ndarray:
        """Latent (or flat latent vector) -> increment field (3, D, H, W)."""
        if isinstance(z, LatentCode):
            act = z.act
        else:
            act = torch.as_tensor(np.asarray(z), dtype=torch.float32)
        if act.dim() == 1:
            expected = self.arch.latent_dim
            if act.numel() != expected:
                raise ValueError(f"latent vector has {act.numel()} entries, expected {expected}")
            act = act.reshape(self.arch.bottleneck_channels, *self.arch.bottleneck_shape)
        if tuple(act.shape) != (self.arch.bottleneck_channels, *self.arch.bottleneck_shape):
            raise ValueError(f"latent shape {tuple(act.shape)} does not match architecture")
        inc = self.network.decoder(act[None].float())
        return inc[0].numpy()

    @torch.no_grad()
    def register_pair(
        self,
        moving: Volume,
        fixed: Volume,
        moving_seg: SegMap | None = None,
        fixed_seg: SegMap | None = None,
        weights: losses_mod.LossWeights | None = None,
    ) -> RegistrationOutput:
        m = self._check_volume(moving)
        f = self._check_volume(fixed)
        m_oh = f_oh = None
        if moving_seg is not None:
            m_oh = losses_mod.one_hot(moving_seg.labels, moving_seg.label_count + 1)[None]
        if fixed_seg is not None:
            f_oh = losses_mod.one_hot(fixed_seg.labels, fixed_seg.label_count + 1)[None]
        raw = self.network(m, f, m_oh)
        out = RegistrationOutput(
            fwd_grad=raw["fwd_grad"][0],
            bwd_grad=raw["bwd_grad"][0],
            fwd_grid=raw["fwd_grid"][0],
            bwd_grid=raw["bwd_grid"][0],
            warped_moving=raw["warped_moving"][0, 0],
            warped_moving_seg=raw.get("warped_moving_seg", [None])[0],
        )
        if weights is None:
            weights = losses_mod.LossWeights()
        if m_oh is not None and f_oh is not None:
            batched = SimpleNamespace(
                warped_moving=raw["warped_moving"],
                warped_moving_seg=raw["warped_moving_seg"],
                fwd_grad=raw["fwd_grad"], bwd_grad=raw["bwd_grad"],
                fwd_grid=raw["fwd_grid"], bwd_grid=raw["bwd_grid"],
            )
            total, terms = losses_mod.total_loss(batched, f, f_oh, m, m_oh, weights)
            out.total = float(total)
            out.loss_terms = {k: float(v) for k, v in terms.items()}
        return out


# --------------------------------------------------------------------------
# Checkpointing
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    arch: ArchConfig
    parameters: dict[str, np.ndarray]
    epoch: int
    rng_state: bytes


def save_checkpoint(path: str | Path, model: RegistrationModel, epoch: int = 0,
                    rng_state: bytes | None = None) -> None:
    if rng_state is None:
        rng_state = torch.get_rng_state().numpy().tobytes()
    state = model.network.state_dict()
    index = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)
    header = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state.hex(),
        "params": index,
    }
    write_container(path, header, b"".join(chunks))


def load_checkpoint(path: str | Path,
                    expected_arch: ArchConfig | None = None) -> Checkpoint:
    header, payload = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ContainerError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ContainerError(f"{path}: unsupported checkpoint version")
    arch = ArchConfig.from_dict(header["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise ValueError(f"{path}: checkpoint architecture {arch} != expected {expected_arch}")
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise ContainerError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(payload[start:start + n], dtype="<f4")
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(arch, params, int(header["epoch"]),
                      bytes.fromhex(header["rng_state"]))


def model_from_checkpoint(ckpt: Checkpoint) -> RegistrationModel:
    model = RegistrationModel(ckpt.arch)
    state = {k: torch.from_numpy(v) for k, v in ckpt.parameters.items()}
    model.network.load_state_dict(state)
    model.network.eval()
    return model


def load_model(path: str | Path,
               expected_arch: ArchConfig | None = None) -> RegistrationModel:
    return model_from_checkpoint(load_checkpoint(path, expected_arch))
