"""Adversarial day-to-night training of the tracker (generator) and the domain discriminator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from nightadapt.boxes import BoundingBox, BoxTrack, FrameSequence
from nightadapt.discovery import DiscoveryConfig, crop_search, crop_template
from nightadapt.errors import BatchError, ConfigError, DataFormatError
from nightadapt.model import Discriminator, SiameseNet, decode_boxes, score_map_points

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_gt", "l_adv", "l_total", "l_d", "lr")


@dataclass
class TrainConfig:
    lambda_adv: float = 0.01
    base_lr_discriminator: float = 0.005
    base_lr_bridging: float = 0.005
    # None follows base_lr_bridging
    base_lr_backbone: Optional[float] = None
    poly_power: float = 0.8
    epochs: int = 20
    batch_size: int = 16
    steps_per_epoch: int = 20
    source_label: float = 1.0
    target_label: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    # "alternating" (separate G and D phases) or "grl" (one backward pass through the GRL)
    mode: str = "alternating"
    use_da: bool = True
    freeze_backbone: bool = False
    max_frame_gap: int = 100
    # max search-crop shift, as a fraction of the search region side
    search_shift: float = 0.2
    # positive-label region: fraction of the box size around its centre
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0", key="lambda_adv")
        for key in ("base_lr_discriminator", "base_lr_bridging"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0", key=key)
        if self.base_lr_backbone is not None and not self.base_lr_backbone > 0:
            raise ConfigError("base_lr_backbone must be > 0", key="base_lr_backbone")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch_size and steps_per_epoch must be >= 1", key="batch_size")
        if self.mode not in ("alternating", "grl"):
            raise ConfigError(f"unknown training mode {self.mode!r}", key="mode")
        self.adam_betas = tuple(self.adam_betas)

    @property
    def lr_backbone(self) -> float:
        return self.base_lr_bridging if self.base_lr_backbone is None else self.base_lr_backbone

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown training option {key!r}", key=key)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# -- losses -------------------------------------------------------------------

def positive_mask(gt: torch.Tensor, map_size: tuple[int, int], stride: int, search_size: int,
                  fraction: float = 0.5) -> torch.Tensor:
    """``B x H x W`` bool mask of score-map pixels inside the central part of each box.

    A box too small to cover any pixel marks the pixel nearest its centre.
    """
    h, w = map_size
    ys = score_map_points(h, stride, search_size).to(gt.dtype)
    xs = score_map_points(w, stride, search_size).to(gt.dtype)
    cx = gt[:, 0] + gt[:, 2] / 2
    cy = gt[:, 1] + gt[:, 3] / 2
    hx = gt[:, 2] * fraction / 2
    hy = gt[:, 3] * fraction / 2
    inside_x = (xs[None, :] - cx[:, None]).abs() <= hx[:, None]
    inside_y = (ys[None, :] - cy[:, None]).abs() <= hy[:, None]
    mask = inside_y[:, :, None] & inside_x[:, None, :]
    for i in range(len(gt)):
        if not mask[i].any():
            mask[i, (ys - cy[i]).abs().argmin(), (xs - cx[i]).abs().argmin()] = True
    return mask


def box_iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of ``(..., 4)`` box tensors in ``x, y, w, h`` form."""
    iw = (torch.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    return inter / (a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter)


def tracking_loss(cls_map: torch.Tensor, reg_map: torch.Tensor, gt: torch.Tensor, stride: int,
                  search_size: int, positive_fraction: float = 0.5):
    """Class-balanced BCE on the score map plus mean ``1 - IoU`` over positive pixels.

    ``gt`` is ``B x 4`` in search-patch coordinates. Returns ``(total, bce, iou)``.
    """
    if gt.ndim != 2 or gt.shape[1] != 4:
        raise DataFormatError(f"expected B x 4 ground truth, got {tuple(gt.shape)}")
    x1, y1 = gt[:, 0] + gt[:, 2], gt[:, 1] + gt[:, 3]
    if bool(((x1 <= 0) | (y1 <= 0) | (gt[:, 0] >= search_size) | (gt[:, 1] >= search_size)).any()):
        raise DataFormatError("ground-truth box lies outside the search patch")
    logits = cls_map[:, 0]
    pos = positive_mask(gt, tuple(logits.shape[-2:]), stride, search_size, positive_fraction)
    target = pos.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    neg = ~pos
    bce_term = 0.5 * bce[pos].mean() + (0.5 * bce[neg].mean() if neg.any() else 0.5 * bce[pos].mean())
    boxes = decode_boxes(reg_map, stride, search_size).permute(0, 2, 3, 1)
    gt_px = gt[:, None, None, :].expand_as(boxes)
    iou_term = (1.0 - box_iou_tensor(boxes[pos], gt_px[pos])).mean()
    return bce_term + iou_term, bce_term, iou_term


def adversarial_loss(d_target_search: torch.Tensor, d_target_template: torch.Tensor,
                     config: TrainConfig) -> torch.Tensor:
    """Least-squares loss pulling target-domain scores toward the source label."""
    ls = config.source_label
    return ((d_target_search - ls) ** 2).mean() + ((d_target_template - ls) ** 2).mean()


def total_loss(l_gt, l_adv, config: TrainConfig):
    return l_gt + config.lambda_adv * l_adv


def discriminator_loss(d_source_search, d_source_template, d_target_search, d_target_template,
                       config: TrainConfig):
    """Least-squares loss of all four score groups against their true domain labels."""
    ls, lt = config.source_label, config.target_label
    return (((d_source_search - ls) ** 2).mean() + ((d_source_template - ls) ** 2).mean()
            + ((d_target_search - lt) ** 2).mean() + ((d_target_template - lt) ** 2).mean())


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


# -- batches ------------------------------------------------------------------------

@dataclass
class DomainBatch:
    """Paired template/search patches from both domains (``B x 3 x S x S`` float tensors).

    Only source pairs carry a box, given in search-patch coordinates.
    """

    source_templates: torch.Tensor
    source_searches: torch.Tensor
    source_boxes: torch.Tensor
    target_templates: torch.Tensor
    target_searches: torch.Tensor

    def __post_init__(self):
        if len(self.source_templates) == 0 or len(self.target_templates) == 0:
            raise BatchError("a batch needs at least one source and one target pair")
        if len(self.source_boxes) != len(self.source_templates):
            raise BatchError("every source pair needs a box")


@dataclass
class TargetTrack:
    """Frames of one unlabeled sequence plus the boxes to crop from."""

    frames: list[np.ndarray]
    track: Optional[BoxTrack] = None


def _to_tensor(patches: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(patches).astype(np.float32)
    if arr.ndim == 3:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


class PairSampler:
    """Draws template/search pairs from labeled source sequences and target tracks.

    Target tracks without boxes (``track=None``) are cropped at random
    locations, the ablation that replaces object discovery.
    """

    def __init__(self, source: Sequence[FrameSequence], target: Sequence[TargetTrack],
                 crop: DiscoveryConfig, config: TrainConfig, rng: np.random.Generator):
        if not source:
            raise BatchError("no source sequences")
        self.source = [s for s in source if s.ground_truth is not None]
        if len(self.source) != len(source):
            raise DataFormatError("source sequences must carry ground truth")
        self.target = [t for t in target if t.track is None or t.track.present()]
        self.crop = crop
        self.config = config
        self.rng = rng

    def _pick_frames(self, valid: list[int]) -> tuple[int, int]:
        i = valid[self.rng.integers(len(valid))]
        near = [j for j in valid if abs(j - i) <= self.config.max_frame_gap]
        return i, near[self.rng.integers(len(near))]

    def _shift(self, box: BoundingBox) -> tuple[float, float]:
        side = math.sqrt((box.w + self.crop.context_factor * (box.w + box.h))
                         * (box.h + self.crop.context_factor * (box.w + box.h)))
        side *= self.crop.search_size / self.crop.template_size
        return tuple(self.rng.uniform(-1, 1, 2) * self.config.search_shift * side)

    def _pair(self, frame_at, boxes, valid):
        i, j = self._pick_frames(valid)
        z = crop_template(frame_at(i), boxes[i], self.crop)
        x, box = crop_search(frame_at(j), boxes[j], self.crop, self._shift(boxes[j]))
        return z, x, box

    def _random_boxes(self, frame: np.ndarray) -> BoundingBox:
        h, w = frame.shape[:2]
        bw, bh = self.rng.uniform(0.1, 0.3, 2) * (w, h)
        return BoundingBox(self.rng.uniform(0, w - bw), self.rng.uniform(0, h - bh), bw, bh)

    def sample(self, batch_size: int) -> DomainBatch:
        if not self.target:
            raise BatchError("no usable target sequences")
        sz, sx, sb = [], [], []
        for _ in range(batch_size):
            seq = self.source[self.rng.integers(len(self.source))]
            z, x, box = self._pair(seq.frame, seq.ground_truth, list(range(len(seq))))
            sz.append(z)
            sx.append(x)
            sb.append(box.as_tuple())
        tz, tx = [], []
        for _ in range(batch_size):
            tgt = self.target[self.rng.integers(len(self.target))]
            if tgt.track is None:
                i, j = self._pick_frames(list(range(len(tgt.frames))))
                box = self._random_boxes(tgt.frames[i])
                z = crop_template(tgt.frames[i], box, self.crop)
                x, _ = crop_search(tgt.frames[j], box, self.crop)
            else:
                z, x, _ = self._pair(tgt.frames.__getitem__, tgt.track.boxes, tgt.track.present())
            tz.append(z)
            tx.append(x)
        return DomainBatch(_to_tensor(sz), _to_tensor(sx), torch.tensor(sb, dtype=torch.float32),
                           _to_tensor(tz), _to_tensor(tx))


# -- optimisation ------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    l_gt: float
    l_adv: float
    l_total: float
    l_d: Optional[float]
    lr: float

    def row(self) -> list[str]:
        return [str(self.step)] + [("" if v is None else repr(float(v)))
                                   for v in (self.l_gt, self.l_adv, self.l_total, self.l_d, self.lr)]


def generator_parameters(net: SiameseNet, config: TrainConfig):
    groups = []
    if not config.freeze_backbone:
        groups.append({"params": list(net.backbone.parameters()), "base_lr": config.lr_backbone})
    if net.bridge is not None:
        groups.append({"params": list(net.bridge.parameters()), "base_lr": config.base_lr_bridging})
    groups.append({"params": list(net.head.parameters()), "base_lr": config.lr_backbone})
    return groups


class Trainer:
    """Owns the tracker, the discriminator and their optimizers."""

    def __init__(self, net: SiameseNet, disc: Optional[Discriminator], config: TrainConfig):
        self.net = net
        self.disc = disc
        self.config = config
        if config.use_da and disc is None:
            raise ConfigError("domain adaptation needs a discriminator", key="use_da")
        if config.freeze_backbone:
            net.backbone.requires_grad_(False)
        groups = generator_parameters(net, config)
        for g in groups:
            g["lr"] = g["base_lr"]
        self.opt_g = torch.optim.Adam(groups, betas=config.adam_betas, weight_decay=config.weight_decay)
        self.opt_d = None
        if disc is not None and config.use_da:
            self.opt_d = torch.optim.Adam(
                [{"params": list(disc.parameters()), "lr": config.base_lr_discriminator,
                  "base_lr": config.base_lr_discriminator}],
                betas=config.adam_betas, weight_decay=config.weight_decay)
        self.step = 0

    def set_lr(self, step: int) -> float:
        total = self.config.total_steps
        for opt in (self.opt_g, self.opt_d):
            if opt is None:
                continue
            for g in opt.param_groups:
                g["lr"] = poly_lr(min(step, total), total, g["base_lr"], self.config.poly_power)
        return self.opt_g.param_groups[0]["lr"]

    def _source_loss(self, batch: DomainBatch):
        cls, reg, z_s, x_s = self.net(batch.source_templates, batch.source_searches)
        l_gt, _, _ = tracking_loss(cls, reg, batch.source_boxes, self.net.stride,
                                   self.net.config.search_size, self.config.positive_fraction)
        return l_gt, z_s, x_s

    def _target_features(self, batch: DomainBatch):
        z_t = self.net.bridged(self.net.features(batch.target_templates))
        x_t = self.net.bridged(self.net.features(batch.target_searches))
        return z_t, x_t

    def train_step(self, batch: DomainBatch) -> LossRecord:
        lr = self.set_lr(self.step)
        if not self.config.use_da:
            rec = self._step_tracking_only(batch, lr)
        elif self.config.mode == "alternating":
            rec = self._step_alternating(batch, lr)
        else:
            rec = self._step_grl(batch, lr)
        self.step += 1
        return rec

    def _step_tracking_only(self, batch, lr):
        self.net.train()
        l_gt, _, _ = self._source_loss(batch)
        self.opt_g.zero_grad(set_to_none=True)
        l_gt.backward()
        self.opt_g.step()
        v = float(l_gt.detach())
        return LossRecord(self.step, v, 0.0, v, None, lr)

    def _step_alternating(self, batch, lr):
        cfg = self.config
        # phase 1: generator, discriminator frozen and its GRL bypassed
        self.disc.requires_grad_(False)
        self.disc.reverse_gradient = False
        try:
            l_gt, z_s, x_s = self._source_loss(batch)
            z_t, x_t = self._target_features(batch)
            l_adv = adversarial_loss(self.disc(x_t), self.disc(z_t), cfg)
            l_tot = total_loss(l_gt, l_adv, cfg)
            self.opt_g.zero_grad(set_to_none=True)
            l_tot.backward()
            self.opt_g.step()
        finally:
            self.disc.requires_grad_(True)
            self.disc.reverse_gradient = True
        # phase 2: discriminator on detached features, generator untouched
        feats = [t.detach() for t in (x_s, z_s, x_t, z_t)]
        l_d = discriminator_loss(*(self.disc(f) for f in feats), cfg)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()
        g, a = float(l_gt.detach()), float(l_adv.detach())
        return LossRecord(self.step, g, a, g + cfg.lambda_adv * a, float(l_d.detach()), lr)

    def _step_grl(self, batch, lr):
        cfg = self.config
        self.disc.reverse_gradient = True
        self.disc.grl_coeff = cfg.lambda_adv
        l_gt, z_s, x_s = self._source_loss(batch)
        z_t, x_t = self._target_features(batch)
        scores = [self.disc(f) for f in (x_s, z_s, x_t, z_t)]
        l_d = discriminator_loss(*scores, cfg)
        l_adv = adversarial_loss(scores[2].detach(), scores[3].detach(), cfg)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_d.zero_grad(set_to_none=True)
        (l_gt + l_d).backward()
        self.opt_g.step()
        self.opt_d.step()
        g, a = float(l_gt.detach()), float(l_adv.detach())
        return LossRecord(self.step, g, a, g + cfg.lambda_adv * a, float(l_d.detach()), lr)

    def fit(self, sampler: PairSampler, log_path=None, on_epoch_end=None) -> list[LossRecord]:
        records = []
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOSS_COLUMNS)
        try:
            for epoch in range(self.config.epochs):
                for _ in range(self.config.steps_per_epoch):
                    rec = self.train_step(sampler.sample(self.config.batch_size))
                    records.append(rec)
                    if writer is not None:
                        writer.writerow(rec.row())
                log.info("epoch %d: l_gt=%.4f l_adv=%.4f l_d=%s", epoch + 1, rec.l_gt, rec.l_adv,
                         "-" if rec.l_d is None else f"{rec.l_d:.4f}")
                if on_epoch_end is not None:
                    on_epoch_end(epoch + 1)
        finally:
            if fh is not None:
                fh.close()
        return records


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)
