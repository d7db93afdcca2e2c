"""Joint training: losses, SGD with momentum, splits, epoch loop, bagging.

The objective is the sum of a pixel-wise softmax cross-entropy over the
segmentation map and a weighted sigmoid cross-entropy over the per-slice
pre/post-ablation logit. Optimization is plain SGD with momentum and weight
decay (decay skipped for biases and batch-norm affine parameters) under a
step learning-rate schedule.

Each epoch reseeds its shuffle/augmentation/dropout streams from
(seed, epoch), so a run interrupted at any epoch boundary and resumed from
`last.ckpt` (which carries parameters, BN statistics and momentum buffers)
replays identically to an uninterrupted run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import inference, metrics
from .augment import (
    AugmentConfig,
    CurriculumSchedule,
    center_crop_or_mirror_pad,
    curriculum_size_for_epoch,
    random_augment,
)
from .errors import ConfigurationError, TrainingError
from .network import (
    MultiTaskUNet,
    NetworkConfig,
    init_parameters,
    load_checkpoint,
    model_from_checkpoint,
    model_state_arrays,
    save_checkpoint,
)
from .preprocess import Slice2D, extract_slices, normalize_intensity
from .volume_io import CaseRecord, LabelVolume, Volume3D, load_label_volume, load_volume


@dataclass
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.99
    weight_decay: float = 0.0005
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50  # epochs per decay step
    cls_loss_weight: float = 1.0  # weight of the classification term; 0 = single-task
    batch_size: int = 8
    epochs: int = 120
    val_fraction: float = 0.2
    seed: int = 0
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_enabled: bool = True
    strict_repro: bool = False

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.cls_loss_weight < 0:
            raise ConfigurationError(f"cls_loss_weight must be >= 0, got {self.cls_loss_weight}")
        if self.lr_decay_every < 1:
            raise ConfigurationError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        self.curriculum.validate()
        self.augment.validate()


@dataclass
class TrainResult:
    out_dir: Path
    best_path: Path
    final_path: Path
    last_path: Path
    log_path: Path
    history: list[dict]
    best_val_dice: float
    best_epoch: int


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: lr0 * factor^(epoch // every)."""
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def segmentation_loss(seg_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over batch and pixels of -log softmax probability of the true class."""
    if seg_logits.shape[-2:] != mask.shape[-2:] or seg_logits.shape[0] != mask.shape[0]:
        raise ConfigurationError(
            f"segmentation logits {tuple(seg_logits.shape)} and mask "
            f"{tuple(mask.shape)} do not align"
        )
    return F.cross_entropy(seg_logits, mask.long())


def classification_loss(class_logit: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean sigmoid cross-entropy, evaluated in the stable log-sum-exp form."""
    return F.binary_cross_entropy_with_logits(class_logit, label.to(class_logit.dtype))


def total_loss(seg: torch.Tensor, cls: torch.Tensor, weight: float) -> torch.Tensor:
    return seg + weight * cls


def sgd_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    velocity: torch.Tensor,
    lr: float,
    momentum: float,
    weight_decay: float,
    apply_decay: bool = True,
    param_name: str = "<param>",
) -> tuple[torch.Tensor, torch.Tensor]:
    """One momentum-SGD update: g = grad + wd*w; v = mu*v + g; w = w - lr*v."""
    if not bool(torch.isfinite(grad).all()):
        raise TrainingError(f"non-finite gradient for parameter {param_name!r}")
    g = grad
    if apply_decay and weight_decay != 0.0:
        g = g + weight_decay * param
    v = momentum * velocity + g
    return param - lr * v, v


def no_decay_parameter_names(model: nn.Module) -> set[str]:
    """Biases and batch-norm affine parameters are exempt from weight decay."""
    names = {n for n, _ in model.named_parameters() if n.split(".")[-1] == "bias"}
    for mod_name, mod in model.named_modules():
        if isinstance(mod, nn.BatchNorm2d):
            for pn, _ in mod.named_parameters(recurse=False):
                names.add(f"{mod_name}.{pn}" if mod_name else pn)
    return names


class MomentumSGD:
    """Velocity state plus the update loop around sgd_step."""

    def __init__(self, model: nn.Module, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = no_decay_parameter_names(model)
        self.velocity = {
            name: torch.zeros_like(p) for name, p in model.named_parameters()
        }

    def step(self, model: nn.Module, lr: float) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if p.grad is None:
                    continue
                new_p, new_v = sgd_step(
                    p,
                    p.grad,
                    self.velocity[name],
                    lr,
                    self.momentum,
                    self.weight_decay,
                    apply_decay=name not in self.no_decay,
                    param_name=name,
                )
                p.copy_(new_p)
                self.velocity[name] = new_v

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            f"velocity.{k}": v.detach().cpu().numpy().astype("<f4")
            for k, v in self.velocity.items()
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            if name not in arrays:
                raise ConfigurationError(f"checkpoint lacks momentum buffer for {name!r}")
            self.velocity[name] = torch.from_numpy(arrays[name].copy()).to(
                self.velocity[name].dtype
            )


def split_cases(
    records: Sequence[CaseRecord], val_fraction: float = 0.2, seed: int = 0
) -> tuple[list[CaseRecord], list[CaseRecord]]:
    """Deterministic case-level split; train gets ceil((1-val_fraction)*N)."""
    if len(records) < 2:
        raise ConfigurationError(f"need at least 2 cases to split, got {len(records)}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = math.ceil((1.0 - val_fraction) * len(records))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return train, val


def bootstrap_resample(records: Sequence[CaseRecord], rng: np.random.Generator) -> list[CaseRecord]:
    """N draws with replacement from the N given cases."""
    idx = rng.integers(0, len(records), size=len(records))
    return [records[i] for i in idx]


def _derive_seed(*parts: int) -> int:
    state = np.random.SeedSequence(list(parts)).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _preflight(records: Sequence[CaseRecord]) -> None:
    if not records:
        raise ConfigurationError("manifest contains no cases")
    for r in records:
        if r.mask_path is None:
            raise ConfigurationError(f"training case {r.case_id!r} has no mask")
        if r.ablation is None:
            raise ConfigurationError(f"training case {r.case_id!r} has no ablation status")


def _load_case(record: CaseRecord) -> tuple[Volume3D, Optional[LabelVolume]]:
    vol = load_volume(record.volume_path)
    if isinstance(vol, LabelVolume):
        raise ConfigurationError(f"case {record.case_id!r}: volume path points at a mask")
    mask = load_label_volume(record.mask_path) if record.mask_path else None
    return vol, mask


def _slice_batch(slices: Sequence[Slice2D]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x = np.stack([s.pixels for s in slices])[:, None].astype(np.float32)
    m = np.stack([s.mask for s in slices]).astype(np.int64)
    y = np.array([s.ablation_label for s in slices], dtype=np.float32)
    return torch.from_numpy(x), torch.from_numpy(m), torch.from_numpy(y)


def _validation_dice(model: MultiTaskUNet, val_data) -> float:
    """Mean foreground Dice over validation cases at full padded size."""
    scores = []
    for vol, gt in val_data:
        pred = inference.threshold_argmax(inference.predict_volume(model, vol))
        scores.append(metrics.dice(pred, gt))
    return float(np.mean(scores)) if scores else float("nan")


def train_loop(
    records: Sequence[CaseRecord],
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    out_dir: Union[str, Path],
    resume: bool = False,
    split: Optional[tuple[Sequence[CaseRecord], Sequence[CaseRecord]]] = None,
) -> TrainResult:
    """Run the full epoch loop and leave best/final/last checkpoints plus a
    JSONL log in out_dir. Fully reproducible for a given config and seed."""
    cfg.validate()
    net_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.jsonl"

    if split is not None:
        train_records, val_records = list(split[0]), list(split[1])
    else:
        train_records, val_records = split_cases(records, cfg.val_fraction, cfg.seed)
    _preflight(train_records)
    _preflight(val_records)

    old_threads = torch.get_num_threads()
    if cfg.strict_repro:
        torch.set_num_threads(1)
    try:
        return _run_epochs(
            train_records, val_records, cfg, net_cfg, out_dir,
            best_path, final_path, last_path, log_path, resume,
        )
    finally:
        torch.set_num_threads(old_threads)


def _run_epochs(
    train_records, val_records, cfg, net_cfg, out_dir,
    best_path, final_path, last_path, log_path, resume,
) -> TrainResult:
    train_slices: list[Slice2D] = []
    for record in train_records:
        vol, mask = _load_case(record)
        train_slices.extend(extract_slices(record, vol, mask))
    val_data = []
    for record in val_records:
        vol, mask = _load_case(record)
        val_data.append((vol, mask))

    start_epoch = 0
    best_val = -1.0
    best_epoch = -1
    history: list[dict] = []
    if resume:
        if not last_path.exists():
            raise ConfigurationError(f"--resume requested but {last_path} does not exist")
        ckpt = load_checkpoint(last_path)
        if ckpt.config != net_cfg:
            raise ConfigurationError("resume checkpoint was trained with a different network config")
        model = model_from_checkpoint(ckpt)
        opt = MomentumSGD(model, cfg.momentum, cfg.weight_decay)
        opt.load_state_arrays(ckpt.velocity_tensors())
        start_epoch = ckpt.epoch
        best_val = float(ckpt.extra.get("best_val_dice", -1.0))
        best_epoch = int(ckpt.extra.get("best_epoch", -1))
        if log_path.exists():
            history = [json.loads(line) for line in log_path.read_text().splitlines() if line]
    else:
        torch.manual_seed(_derive_seed(cfg.seed, 0xC0FFEE))
        model = init_parameters(net_cfg, cfg.seed)
        opt = MomentumSGD(model, cfg.momentum, cfg.weight_decay)
        log_path.write_text("")

    log_fh = open(log_path, "a")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = learning_rate(cfg, epoch)
            crop = curriculum_size_for_epoch(cfg.curriculum, epoch)
            rng = np.random.default_rng([cfg.seed, epoch])
            torch.manual_seed(_derive_seed(cfg.seed, epoch, 1))

            model.train()
            order = rng.permutation(len(train_slices))
            sums = {"L": 0.0, "L_S": 0.0, "L_C": 0.0}
            n_seen = 0
            for lo in range(0, len(order), cfg.batch_size):
                batch_idx = order[lo : lo + cfg.batch_size]
                batch = []
                for i in batch_idx:
                    s = train_slices[i]
                    if cfg.augment_enabled:
                        s = random_augment(s, cfg.augment, rng)
                    s = center_crop_or_mirror_pad(s, crop)
                    batch.append(normalize_intensity(s))
                x, m, y = _slice_batch(batch)
                out = model(x)
                seg_l = segmentation_loss(out.seg_logits, m)
                cls_l = classification_loss(out.class_logit, y)
                loss = total_loss(seg_l, cls_l, cfg.cls_loss_weight)
                model.zero_grad(set_to_none=True)
                loss.backward()
                opt.step(model, lr)
                bn = len(batch)
                sums["L"] += float(loss.detach()) * bn
                sums["L_S"] += float(seg_l.detach()) * bn
                sums["L_C"] += float(cls_l.detach()) * bn
                n_seen += bn

            model.eval()
            val_dice = _validation_dice(model, val_data)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "crop_size": crop,
                "train_L": sums["L"] / n_seen,
                "train_L_S": sums["L_S"] / n_seen,
                "train_L_C": sums["L_C"] / n_seen,
                "val_dice": val_dice,
            }
            history.append(entry)
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()

            if val_dice > best_val:
                best_val = val_dice
                best_epoch = epoch
                save_checkpoint(
                    best_path, net_cfg, epoch + 1, model_state_arrays(model),
                    extra={"val_dice": val_dice},
                )
            tensors = dict(model_state_arrays(model))
            tensors.update(opt.state_arrays())
            save_checkpoint(
                last_path, net_cfg, epoch + 1, tensors,
                extra={"best_val_dice": best_val, "best_epoch": best_epoch},
            )
    finally:
        log_fh.close()

    save_checkpoint(
        final_path, net_cfg, cfg.epochs, model_state_arrays(model),
        extra={"best_val_dice": best_val, "best_epoch": best_epoch},
    )
    if not best_path.exists():  # no epoch ran (resume at end); keep outputs complete
        save_checkpoint(best_path, net_cfg, cfg.epochs, model_state_arrays(model))
    return TrainResult(
        out_dir=out_dir,
        best_path=best_path,
        final_path=final_path,
        last_path=last_path,
        log_path=log_path,
        history=history,
        best_val_dice=best_val,
        best_epoch=best_epoch,
    )


def train_bagging(
    records: Sequence[CaseRecord],
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    out_dir: Union[str, Path],
    n_models: int = 5,
) -> list[TrainResult]:
    """Train n_models networks on independent bootstrap resamples.

    The case-level split is fixed once from cfg.seed; each model draws its
    own resample of the training portion (validation is shared so model
    selection is comparable) and trains under a per-model seed. The resample
    is recorded next to each model's checkpoints for audit.
    """
    if n_models < 2:
        raise ConfigurationError(f"bagging needs n_models >= 2, got {n_models}")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records, val_records = split_cases(records, cfg.val_fraction, cfg.seed)
    _preflight(train_records)
    _preflight(val_records)

    results = []
    for m in range(n_models):
        model_seed = _derive_seed(cfg.seed, m, 0xBA66)
        rng = np.random.default_rng([cfg.seed, m, 0xBA66])
        resampled = bootstrap_resample(train_records, rng)
        model_dir = out_dir / f"model_{m}"
        model_dir.mkdir(parents=True, exist_ok=True)
        (model_dir / "resample.json").write_text(
            json.dumps(
                {"model": m, "seed": model_seed, "cases": [r.case_id for r in resampled]},
                indent=2,
            )
            + "\n"
        )
        model_cfg = replace(cfg, seed=model_seed)
        results.append(
            train_loop(
                records, model_cfg, net_cfg, model_dir,
                split=(resampled, val_records),
            )
        )
    return results
