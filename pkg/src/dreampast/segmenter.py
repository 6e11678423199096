"""Incrementally extendable FCN segmenter, pseudo-labelling and the composite objective.

Everything below works in *channel space*: channel 0 is background and channel
k + 1 is ``model.classes[k]`` (classes in learning order). Because new classes
are appended, the old model's channels are a prefix of the new model's.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint

log = logging.getLogger(__name__)


def _block(c_in: int, c_out: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Trunk(nn.Module):
    """Small encoder-decoder with output stride 2; features come out at half resolution."""

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.enc1 = nn.Sequential(_block(3, w, stride=2), _block(w, w))
        self.enc2 = nn.Sequential(_block(w, 2 * w, stride=2), _block(2 * w, 2 * w))
        self.enc3 = nn.Sequential(_block(2 * w, 4 * w, stride=2), _block(4 * w, 4 * w, dilation=2), _block(4 * w, 4 * w, dilation=2))
        self.dec2 = _block(6 * w, 2 * w)
        self.dec1 = _block(3 * w, w)

    def forward(self, x):
        h1 = self.enc1(x)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        h = self.dec2(torch.cat([F.interpolate(h3, size=h2.shape[2:], mode="bilinear", align_corners=False), h2], 1))
        return self.dec1(torch.cat([F.interpolate(h, size=h1.shape[2:], mode="bilinear", align_corners=False), h1], 1))


class SegModel(nn.Module):
    def __init__(self, classes: Sequence[int], image_size: tuple[int, int] = (64, 64), width: int = 32, step: int = 1):
        super().__init__()
        self.classes = [int(c) for c in classes]
        self.image_size = tuple(image_size)
        self.width = width
        self.step = step
        self.trunk = Trunk(width)
        self.head = nn.Conv2d(width, 1 + len(self.classes), 1)

    @property
    def num_channels(self) -> int:
        return 1 + len(self.classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[2:]) != self.image_size:
            raise ValueError(f"input size {tuple(x.shape[2:])} does not match trained resolution {self.image_size}")
        logits = self.head(self.trunk((x - 0.5) / 0.25))
        return F.interpolate(logits, size=x.shape[2:], mode="bilinear", align_corners=False)

    def class_to_channel(self) -> np.ndarray:
        lut = np.zeros(max(self.classes + [0]) + 1, dtype=np.int64)
        for k, c in enumerate(self.classes):
            lut[c] = k + 1
        return lut

    def encode_mask(self, mask: np.ndarray) -> np.ndarray:
        """Class-id mask -> channel indices; ids unknown to the model map to background."""
        mask = np.asarray(mask)
        lut = np.zeros(max(int(mask.max(initial=0)), max(self.classes + [0])) + 1, dtype=np.int64)
        lut[: len(self.class_to_channel())] = self.class_to_channel()
        return lut[mask]

    def decode(self, channels: np.ndarray) -> np.ndarray:
        lut = np.array([0] + self.classes, dtype=np.uint8)
        return lut[np.asarray(channels)]


def images_to_tensor(pixels) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous()


def forward(model: SegModel, image) -> torch.Tensor:
    """Logits (B x K x H x W) for H x W x C image(s) in [0, 1], eval mode, no grad."""
    model.eval()
    with torch.no_grad():
        return model(images_to_tensor(image))


@torch.no_grad()
def predict(model: SegModel, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Class-id masks for a list of H x W x C images."""
    out = []
    model.eval()
    for i in range(0, len(images), batch_size):
        logits = model(images_to_tensor(np.stack(images[i : i + batch_size])))
        out.append(model.decode(logits.argmax(1).numpy()))
    if not out:
        return np.zeros((0, *model.image_size), dtype=np.uint8)
    return np.concatenate(out)


def extend_head(model: SegModel, new_classes: Sequence[int], seed: int = 0, init_std: float = 1e-3) -> SegModel:
    new_classes = [int(c) for c in new_classes]
    overlap = set(new_classes) & set(model.classes)
    if overlap or len(set(new_classes)) != len(new_classes):
        raise ValueError(f"classes {sorted(overlap) or new_classes} are already in the model")
    out = copy.deepcopy(model)
    if not new_classes:
        return out
    k_old, n_new = model.num_channels, len(new_classes)
    head = nn.Conv2d(model.width, k_old + n_new, 1)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
        head.weight[:k_old] = model.head.weight
        head.bias[:k_old] = model.head.bias
        head.weight[k_old:] = torch.randn(head.weight[k_old:].shape, generator=g) * init_std
    out.head = head.to(model.head.weight.dtype)
    out.classes = model.classes + new_classes
    out.step = model.step + 1
    return out


def frozen_copy(model: SegModel) -> SegModel:
    old = copy.deepcopy(model)
    old.eval()
    for p in old.parameters():
        p.requires_grad_(False)
    return old


# -- pseudo-labels ------------------------------------------------------------


@dataclass
class PseudoLabelResult:
    labels: torch.Tensor  # argmax channel of the old model (old channel space)
    confidence: torch.Tensor  # max softmax probability
    area_new: torch.Tensor
    area_old: torch.Tensor
    area_bg: torch.Tensor


def pseudo_label_from_logits(old_logits: torch.Tensor, step_mask: torch.Tensor, conf_threshold: float) -> PseudoLabelResult:
    if not 0.0 < conf_threshold < 1.0:
        raise ValueError(f"conf_threshold must be in (0, 1), got {conf_threshold}")
    prob = old_logits.detach().softmax(1)
    mu, labels = prob.max(1)
    area_bg = step_mask == 0
    area_new = ~area_bg
    area_old = area_bg & (labels != 0) & (mu > conf_threshold)
    return PseudoLabelResult(labels=labels, confidence=mu, area_new=area_new, area_old=area_old, area_bg=area_bg)


def pseudo_label(old_model: SegModel, image, step_mask, conf_threshold: float) -> PseudoLabelResult:
    """`step_mask` is in channel space (0 = background); works on one image or a batch."""
    logits = forward(old_model, image)
    mask = torch.as_tensor(np.asarray(step_mask))
    if mask.ndim == 2:
        mask = mask[None]
    return pseudo_label_from_logits(logits, mask, conf_threshold)


# -- losses ---------------------------------------------------------------------


@dataclass
class LossWeights:
    ce: float = 1.0
    ali: float = 1.0
    kd: float = 1.0
    conf_threshold: float = 0.7
    use_pseudo_labels: bool = True
    replay_ce_only: bool = False

    def validate(self) -> None:
        for name in ("ce", "ali", "kd"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("conf_threshold must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _zero(t: torch.Tensor) -> torch.Tensor:
    return t.sum() * 0.0


def ce_per_pixel(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and (int(labels.max()) >= logits.shape[1] or int(labels.min()) < 0):
        raise ValueError(f"label channel out of range for {logits.shape[1]} channels")
    return F.cross_entropy(logits, labels.long(), reduction="none")


def loss_ce(logits: torch.Tensor, labels: torch.Tensor, area: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over the pixels in `area` (exactly 0 when the area is empty)."""
    n = int(area.sum())
    if n == 0:
        return _zero(logits)
    per = ce_per_pixel(logits, torch.where(area, labels, torch.zeros_like(labels)))
    return (per * area).sum() / n


def loss_kd(logits_new: torch.Tensor, logits_old: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine distance between old and new probabilities over old non-background channels."""
    k_old = logits_old.shape[1]
    if k_old < 2:
        raise ValueError("distillation needs at least one old non-background class")
    p_old = logits_old[:, 1:k_old].softmax(1)
    p_new = logits_new[:, 1:k_old].softmax(1)
    cos = (p_old * p_new).sum(1) / (p_old.norm(dim=1) * p_new.norm(dim=1))
    return 1.0 - cos


def loss_ali(logits_new: torch.Tensor, logits_old: torch.Tensor, area_bg: torch.Tensor) -> torch.Tensor:
    """Per-pixel max new logit minus the old-softmax-weighted average of new old-class logits, on `area_bg`."""
    k_old = logits_old.shape[1]
    omega = logits_old.softmax(1)
    weighted = (omega * logits_new[:, :k_old]).sum(1)
    return (logits_new.max(1).values - weighted) * area_bg


def loss_total(
    logits_new: torch.Tensor,
    logits_old: torch.Tensor | None,
    labels: torch.Tensor,
    pseudo: PseudoLabelResult | None,
    weights: LossWeights,
    old_terms: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Weighted CE + ALI + KD.

    Without an old model (base step, or plain fine-tuning) this is ordinary
    cross-entropy over every pixel. `old_terms` optionally restricts ALI/KD to
    a subset of the batch samples (B-bool).
    """
    weights.validate()
    if logits_old is None:
        ce = F.cross_entropy(logits_new, labels.long())
        total = weights.ce * ce
        return total, {"ce": ce.item(), "ali": 0.0, "kd": 0.0, "total": total.item()}

    if pseudo is None:
        pseudo = pseudo_label_from_logits(logits_old, labels, weights.conf_threshold)
    area_old = pseudo.area_old if weights.use_pseudo_labels else torch.zeros_like(pseudo.area_old)
    target = torch.where(area_old, pseudo.labels, labels)
    ce = loss_ce(logits_new, target, pseudo.area_new | area_old)

    sel = torch.ones(labels.shape[0], dtype=torch.bool) if old_terms is None else old_terms.bool()
    sel_px = sel[:, None, None].expand_as(labels)
    area_ali = pseudo.area_bg & sel_px
    n_ali, n_kd = int(area_ali.sum()), int(sel_px.sum())
    ali = loss_ali(logits_new, logits_old, area_ali).sum() / n_ali if n_ali else _zero(logits_new)
    if logits_old.shape[1] >= 2 and n_kd:
        kd = (loss_kd(logits_new, logits_old) * sel_px).sum() / n_kd
    else:
        kd = _zero(logits_new)
    total = weights.ce * ce + weights.ali * ali + weights.kd * kd
    stats = {"ce": ce.item(), "ali": ali.item(), "kd": kd.item(), "total": total.item(),
             "area_old": int(area_old.sum()), "area_new": int(pseudo.area_new.sum())}
    return total, stats


# -- training -----------------------------------------------------------------------


def poly_lr(base_lr: float, it: int, max_it: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - it / max(max_it, 1)) ** power


def make_optimizer(model: SegModel, lr: float) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=1e-4)


def train_step(
    model: SegModel,
    old_model: SegModel | None,
    batch: dict,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    lr: float,
) -> dict:
    """One SGD step on a batch {"images": Bx3xHxW in [0,1], "labels": BxHxW channels, "replay": B bool}."""
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    x, y = batch["images"], batch["labels"]
    logits = model(x)
    logits_old = None
    pseudo = None
    old_terms = None
    if old_model is not None:
        with torch.no_grad():
            logits_old = old_model(x)
        pseudo = pseudo_label_from_logits(logits_old, y, weights.conf_threshold)
        if weights.replay_ce_only and "replay" in batch:
            old_terms = ~batch["replay"]
    loss, stats = loss_total(logits, logits_old, y, pseudo, weights, old_terms)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} (terms: {stats})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    stats["lr"] = lr
    return stats


@dataclass
class TrainSample:
    pixels: np.ndarray  # H x W x 3 float32
    labels: np.ndarray  # H x W channel indices
    replay: bool = False


def train_segmenter(
    model: SegModel,
    old_model: SegModel | None,
    samples: Sequence[TrainSample],
    weights: LossWeights,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    flip: bool = True,
    on_stats=None,
) -> list[dict]:
    """Poly-scheduled SGD over a uniformly shuffled pool of samples."""
    if not samples:
        return []
    bsz = min(batch_size, len(samples))
    x_all = images_to_tensor(np.stack([s.pixels for s in samples]))
    y_all = torch.as_tensor(np.stack([s.labels for s in samples]), dtype=torch.long)
    r_all = torch.tensor([s.replay for s in samples], dtype=torch.bool)
    n = len(samples)
    per_epoch = math.ceil(n / bsz)
    max_it = epochs * per_epoch
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    opt = make_optimizer(model, lr)
    history = []
    it = 0
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g)
        for b in range(per_epoch):
            idx = perm[b * bsz : (b + 1) * bsz]
            x, y = x_all[idx], y_all[idx]
            if flip:
                f = torch.rand(len(idx), generator=g) < 0.5
                x = torch.where(f[:, None, None, None], x.flip(-1), x)
                y = torch.where(f[:, None, None], y.flip(-1), y)
            stats = train_step(model, old_model, {"images": x, "labels": y, "replay": r_all[idx]}, weights, opt, poly_lr(lr, it, max_it))
            stats.update(epoch=epoch, iter=it, n_replay=int(r_all[idx].sum()), batch=len(idx))
            history.append(stats)
            if on_stats is not None:
                on_stats(stats)
            it += 1
    model.eval()
    return history


# -- persistence ------------------------------------------------------------------


def save_segmenter(path: str | Path, model: SegModel, extra: dict | None = None) -> str:
    header = {
        "kind": "segmenter",
        "classes": model.classes,
        "image_size": list(model.image_size),
        "width": model.width,
        "step": model.step,
    }
    if extra:
        header["extra"] = extra
    return checkpoint.save(path, checkpoint.state_dict_to_numpy(model.state_dict()), header)


def load_segmenter(path: str | Path) -> tuple[SegModel, dict]:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "segmenter":
        raise checkpoint.CheckpointError(f"{path} is not a segmenter checkpoint")
    model = SegModel(header["classes"], tuple(header["image_size"]), header["width"], header["step"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, header
