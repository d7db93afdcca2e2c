"""Multi-task 2D U-Net with a spatial-pyramid-pooled classification branch.

The segmentation path is a five-level encoder/decoder: each encoder level is
two 3x3 conv + BN + ReLU blocks followed by 2x2/2 max pooling, the decoder is
symmetric with learned 2x2 up-convolutions and skip concatenation, and a 1x1
conv emits per-pixel class logits. The classification branch taps the feature
map right after the 4th max pool, applies spatial pyramid pooling to get a
fixed-length vector for any input size, then FC -> ReLU -> dropout -> FC(1)
for a single pre/post-ablation logit.

Inputs must have height/width divisible by 32 (2^5 poolings); see
preprocess.pad_to_multiple_of_32.

Checkpoints use a self-describing container: an 8-byte little-endian header
length, a canonical JSON header (network config, epoch counter, extras, and a
name -> {shape, offset} tensor index), then one contiguous float32
little-endian payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, ConfigurationError, ShapeError

DEPTH = 5  # fixed number of down/up levels


@dataclass
class NetworkConfig:
    base_width: int = 8  # channels at level 1 (64 at full scale)
    in_channels: int = 1
    n_classes: int = 2
    spp_levels: tuple[int, ...] = (1, 2, 4)
    dropout_p: float = 0.5
    fc_hidden: int = 256
    channel_cap: Optional[int] = None  # cap on any level's width (memory guard)

    def validate(self) -> None:
        if self.base_width < 1:
            raise ConfigurationError(f"base_width must be >= 1, got {self.base_width}")
        if not self.spp_levels or any(l < 1 for l in self.spp_levels):
            raise ConfigurationError(f"spp_levels must be nonempty positives, got {self.spp_levels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.fc_hidden < 1:
            raise ConfigurationError(f"fc_hidden must be >= 1, got {self.fc_hidden}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spp_levels"] = list(self.spp_levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        kwargs = dict(d)
        if "spp_levels" in kwargs:
            kwargs["spp_levels"] = tuple(kwargs["spp_levels"])
        return cls(**kwargs)


@dataclass
class ForwardOutput:
    seg_logits: torch.Tensor  # (B, n_classes, H, W)
    class_logit: torch.Tensor  # (B,)


def channel_plan(cfg: NetworkConfig) -> list[int]:
    """Widths of encoder levels 1..5 plus the bottleneck (doubling, capped)."""
    widths = [cfg.base_width * (2 ** k) for k in range(DEPTH + 1)]
    if cfg.channel_cap is not None:
        widths = [min(w, cfg.channel_cap) for w in widths]
    return widths


def spp(feature_map: torch.Tensor, levels: Sequence[int]) -> torch.Tensor:
    """Spatial pyramid pooling: concatenated per-level grid max pools.

    Each level L partitions the map into an LxL grid of near-equal cells
    (cell i spans rows floor(i*h/L) to ceil((i+1)*h/L)) and max-pools per
    cell and channel, so the output length C * sum(L^2) is independent of
    the input's spatial size.
    """
    squeeze = feature_map.dim() == 3
    fm = feature_map.unsqueeze(0) if squeeze else feature_map
    if fm.dim() != 4:
        raise ShapeError(f"spp expects a CxHxW or BxCxHxW map, got {tuple(feature_map.shape)}")
    h, w = fm.shape[-2:]
    parts = []
    for level in levels:
        if level > min(h, w):
            raise ShapeError(f"spp level {level} exceeds feature map size {h}x{w}")
        pooled = F.adaptive_max_pool2d(fm, level)
        parts.append(pooled.flatten(1))
    out = torch.cat(parts, dim=1)
    return out.squeeze(0) if squeeze else out


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each with batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class MultiTaskUNet(nn.Module):
    """Joint segmentation + pre/post-ablation classification network.

    Call .train() / .eval() to select batch vs running BN statistics and to
    enable/disable dropout; forward itself is mode-agnostic.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = channel_plan(cfg)

        self.pool = nn.MaxPool2d(2, stride=2)
        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for k in range(DEPTH):
            self.encoders.append(ConvBlock(in_ch, w[k]))
            in_ch = w[k]
        self.bottleneck = ConvBlock(w[DEPTH - 1], w[DEPTH])

        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        prev = w[DEPTH]
        for k in reversed(range(DEPTH)):
            self.upconvs.append(nn.ConvTranspose2d(prev, w[k], 2, stride=2))
            self.decoders.append(ConvBlock(2 * w[k], w[k]))
            prev = w[k]
        self.out_conv = nn.Conv2d(w[0], cfg.n_classes, 1)

        # Classification taps the pooled output of encoder level 4.
        tap_channels = w[3]
        spp_len = tap_channels * sum(l * l for l in cfg.spp_levels)
        self.fc1 = nn.Linear(spp_len, cfg.fc_hidden)
        self.dropout = nn.Dropout(cfg.dropout_p)
        self.fc2 = nn.Linear(cfg.fc_hidden, 1)

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.dim() != 4:
            raise ShapeError(f"expected a BxCxHxW batch, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(
                f"input {h}x{w} not divisible by 32; apply pad_to_multiple_of_32 first"
            )

        skips = []
        cls_tap = None
        for k, enc in enumerate(self.encoders):
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
            if k == 3:
                cls_tap = x
        x = self.bottleneck(x)

        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        seg_logits = self.out_conv(x)

        v = spp(cls_tap, self.cfg.spp_levels)
        v = self.dropout(F.relu(self.fc1(v)))
        class_logit = self.fc2(v).squeeze(1)
        return ForwardOutput(seg_logits=seg_logits, class_logit=class_logit)


def _fan_in(module: nn.Module) -> int:
    if isinstance(module, nn.Conv2d):
        return module.in_channels * module.kernel_size[0] * module.kernel_size[1]
    if isinstance(module, nn.ConvTranspose2d):
        taps = (module.kernel_size[0] * module.kernel_size[1]) // (
            module.stride[0] * module.stride[1]
        )
        return max(1, module.in_channels * taps)
    if isinstance(module, nn.Linear):
        return module.in_features
    raise TypeError(f"no fan-in rule for {type(module).__name__}")


def init_parameters(cfg: NetworkConfig, seed: int) -> MultiTaskUNet:
    """Build a network with ReLU-appropriate init: N(0, 2/fan_in) weights,
    zero biases, identity batch norm. Deterministic for a given seed.

    The final classification layer starts 10x smaller so the initial
    pre/post logits sit near zero; a full-scale start there produces a
    violent first transient that, under momentum 0.99, drives every hidden
    ReLU negative and permanently kills the branch.
    """
    model = MultiTaskUNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                std = float(np.sqrt(2.0 / _fan_in(m)))
                if m is model.fc2:
                    std *= 0.1
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.num_batches_tracked.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

CKPT_FORMAT = "atriaseg-ckpt-v1"
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: NetworkConfig
    epoch: int  # completed epochs
    tensors: dict[str, np.ndarray]  # float32 arrays, keys like "model.*" / "velocity.*"
    extra: dict = field(default_factory=dict)

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {
            k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")
        }

    def velocity_tensors(self) -> dict[str, np.ndarray]:
        return {
            k[len("velocity."):]: v
            for k, v in self.tensors.items()
            if k.startswith("velocity.")
        }


def model_state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot the full model state (weights + BN stats) as float32 arrays."""
    return {
        f"model.{k}": v.detach().cpu().numpy().astype("<f4")
        for k, v in model.state_dict().items()
    }


def save_checkpoint(
    path: Union[str, Path],
    config: NetworkConfig,
    epoch: int,
    tensors: Mapping[str, np.ndarray],
    extra: Optional[dict] = None,
) -> None:
    """Write the checkpoint container; identical inputs yield identical bytes."""
    names = sorted(tensors)
    index = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CKPT_FORMAT,
        "config": config.to_dict(),
        "epoch": int(epoch),
        "extra": extra or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _LEN.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (header_len,) = _LEN.unpack_from(raw)
    if len(raw) < _LEN.size + header_len:
        raise CheckpointError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")

    payload = raw[_LEN.size + header_len :]
    tensors = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        start = meta["offset"]
        count = int(np.prod(shape)) if shape else 1
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} extends past payload")
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
    return Checkpoint(
        config=NetworkConfig.from_dict(header["config"]),
        epoch=int(header["epoch"]),
        tensors=tensors,
        extra=header.get("extra", {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> MultiTaskUNet:
    """Rebuild the network and load its weights (cast back to native dtypes)."""
    model = MultiTaskUNet(ckpt.config)
    reference = model.state_dict()
    saved = ckpt.model_tensors()
    missing = sorted(set(reference) - set(saved))
    unexpected = sorted(set(saved) - set(reference))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint/model mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}"
        )
    state = {}
    for name, ref in reference.items():
        arr = saved[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} != model {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(state)
    return model


def load_models(paths: Iterable[Union[str, Path]]) -> list[MultiTaskUNet]:
    """Load one model per checkpoint path; configs must agree."""
    models = []
    first_cfg = None
    for p in paths:
        ckpt = load_checkpoint(p)
        if first_cfg is None:
            first_cfg = ckpt.config
        elif ckpt.config != first_cfg:
            raise CheckpointError(f"{p}: ensemble checkpoints have differing configs")
        models.append(model_from_checkpoint(ckpt))
    if not models:
        raise CheckpointError("no checkpoint paths given")
    return models
