"""Supervised segmentation loss, Minimum Class Confusion loss and the regime objectives.

MCC on dense outputs: the (B, C, H, W) logits are flattened to a pixel
batch of shape (N, C) and optionally subsampled, then

1. ``probs = softmax(logits / T)``
2. ``w_i ∝ 1 + exp(-H(probs_i))`` rescaled so the weights sum to N
3. ``conf = probs.T @ diag(w) @ probs``
4. each row of ``conf`` divided by its sum
5. ``loss = (sum(conf) - trace(conf)) / C``
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .sampler import MixedBatch

logger = logging.getLogger(__name__)

REGIMES = ("supervised", "combined", "mcc_semi", "mcc_transfer")


@dataclass(frozen=True)
class MccConfig:
    temperature: float = 2.5
    pixel_subsample: Optional[int] = 4096
    per_image: bool = False
    mcc_weight: float = 1.0
    ignore_channel: Optional[int] = None
    detach_weights: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.pixel_subsample is not None and self.pixel_subsample < 1:
            raise ValueError(f"pixel_subsample must be positive, got {self.pixel_subsample}")


def flatten_pixels(logits: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B*H*W, C); 2-D input is returned unchanged."""
    if logits.dim() == 2:
        return logits
    if logits.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) or (N, C) logits, got shape {tuple(logits.shape)}")
    return logits.permute(0, 2, 3, 1).reshape(-1, logits.shape[1])


def temperature_softmax(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    # F.softmax subtracts the row max internally
    return F.softmax(logits / temperature, dim=1)


def entropy_weights(probs: torch.Tensor) -> torch.Tensor:
    """Per-row weights ``1 + exp(-entropy)``, rescaled to sum to the row count."""
    entropy = -torch.special.xlogy(probs, probs).sum(dim=1)
    raw = 1.0 + torch.exp(-entropy)
    return probs.shape[0] * raw / raw.sum()


def class_confusion(probs: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (probs * weights.unsqueeze(1)).t() @ probs


def category_normalize(conf: torch.Tensor) -> torch.Tensor:
    """Divide each row by its sum; an all-zero row becomes the unit vector on its diagonal."""
    row_sums = conf.sum(dim=1, keepdim=True)
    empty = row_sums.squeeze(1) == 0
    if empty.any():
        logger.debug("classes %s absent from all predictions", empty.nonzero().flatten().tolist())
        eye = torch.eye(conf.shape[0], dtype=conf.dtype, device=conf.device)
        safe = torch.where(row_sums == 0, torch.ones_like(row_sums), row_sums)
        return torch.where(empty.unsqueeze(1), eye, conf / safe)
    return conf / row_sums


def _mcc_pixels(pixels: torch.Tensor, temperature: float, detach_weights: bool = False) -> torch.Tensor:
    num_classes = pixels.shape[1]
    if pixels.shape[0] < num_classes:
        raise ValueError(f"MCC needs at least C={num_classes} pixels, got {pixels.shape[0]}")
    probs = temperature_softmax(pixels, temperature)
    weights = entropy_weights(probs.detach() if detach_weights else probs)
    conf = category_normalize(class_confusion(probs, weights))
    return (conf.sum() - conf.trace()) / num_classes


def _subsample(pixels: torch.Tensor, k: Optional[int], generator: Optional[torch.Generator]):
    n = pixels.shape[0]
    if k is None or k >= n:
        return pixels
    idx = torch.randperm(n, generator=generator)[:k]
    return pixels[idx]


def mcc_loss(
    logits: torch.Tensor,
    cfg: MccConfig = MccConfig(),
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Minimum Class Confusion loss on (B, C, H, W) or (N, C) logits; value in [0, 1).

    With ``cfg.ignore_channel`` set, that class channel (the unknown class) is
    dropped before the softmax and the loss runs over the remaining C - 1.
    """
    if cfg.ignore_channel is not None:
        keep = [c for c in range(logits.shape[1]) if c != cfg.ignore_channel]
        logits = logits[:, keep]
    if cfg.per_image and logits.dim() == 4:
        return torch.stack([
            _mcc_pixels(_subsample(flatten_pixels(img.unsqueeze(0)), cfg.pixel_subsample, generator),
                        cfg.temperature, cfg.detach_weights)
            for img in logits
        ]).mean()
    pixels = _subsample(flatten_pixels(logits), cfg.pixel_subsample, generator)
    return _mcc_pixels(pixels, cfg.temperature, cfg.detach_weights)


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = 0) -> torch.Tensor:
    """Pixel-mean cross-entropy over non-ignored pixels; 0 if every pixel is ignored."""
    num_classes = logits.shape[1]
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    labels = labels.long()
    bad = ((labels < 0) | (labels >= num_classes)) & (labels != ignore_index)
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} is not a class index (C={num_classes})")
    valid = int((labels != ignore_index).sum())
    if valid == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="sum") / valid


class ObjectiveTerms(NamedTuple):
    total: torch.Tensor
    supervised: torch.Tensor
    mcc: torch.Tensor


def objective_terms(
    regime: str,
    batch: MixedBatch,
    logits: torch.Tensor,
    cfg: MccConfig = MccConfig(),
    ignore_index: int = 0,
    generator: Optional[torch.Generator] = None,
) -> ObjectiveTerms:
    """Evaluate a regime objective and keep its supervised and MCC parts.

    The whole-batch supervised term of ``mcc_transfer`` is the sum of the
    per-domain terms, so that objective is exactly ``combined`` plus MCC.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    zero = logits.sum() * 0.0
    labels = batch.labels
    if regime == "supervised":
        sn = supervised_loss(logits, labels, ignore_index)
        return ObjectiveTerms(sn, sn, zero)
    if not batch.is_mixed:
        raise ValueError(f"regime {regime!r} needs a half-target/half-source batch")
    t, s = batch.target_slice, batch.source_slice
    sn_target = supervised_loss(logits[t], labels[t], ignore_index)
    if regime == "mcc_semi":
        mcc = mcc_loss(logits[s], cfg, generator)
        return ObjectiveTerms(sn_target + cfg.mcc_weight * mcc, sn_target, mcc)
    sn = sn_target + supervised_loss(logits[s], labels[s], ignore_index)
    if regime == "combined":
        return ObjectiveTerms(sn, sn, zero)
    mcc = mcc_loss(logits[s], cfg, generator)
    return ObjectiveTerms(sn + cfg.mcc_weight * mcc, sn, mcc)


def regime_objective(
    regime: str,
    batch: MixedBatch,
    logits: torch.Tensor,
    cfg: MccConfig = MccConfig(),
    ignore_index: int = 0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    return objective_terms(regime, batch, logits, cfg, ignore_index, generator).total
