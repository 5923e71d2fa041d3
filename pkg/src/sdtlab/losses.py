"""Differentiable training losses over probability and feature tensors.

All functions are pure and operate on batched tensors; teacher-side inputs are
expected to be detached by the caller (teachers never receive gradients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch

from .common import IGNORE_LABEL, InputError, NumericalError

if TYPE_CHECKING:
    from .dts import PseudoLabelMap
    from .unet import FeatureTaps

# Smallest guards that keep float32 gradients finite.
PROB_CLAMP_EPS = 1e-8
DICE_SMOOTH = 1e-5


def _check_probs_and_labels(probs: torch.Tensor, labels: torch.Tensor,
                            ignore_label: int) -> None:
    if probs.ndim != 4:
        raise InputError(f"probs must be (N, K, H, W), got {tuple(probs.shape)}")
    if labels.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise InputError(f"labels shape {tuple(labels.shape)} does not match "
                         f"probs {tuple(probs.shape)}")
    num_classes = probs.shape[1]
    bad = (labels != ignore_label) & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        raise InputError(f"label outside [0, {num_classes}) and != ignore value "
                         f"{ignore_label} encountered")


def pce_loss(probs: torch.Tensor, labels: torch.Tensor,
             ignore_label: int = IGNORE_LABEL, unnormalized: bool = False) -> torch.Tensor:
    """Partial cross-entropy: -log p(true class), restricted to annotated pixels.

    Returns the mean over annotated pixels (or the plain sum with
    `unnormalized=True`); zero when nothing is annotated. Probabilities are
    clamped to [PROB_CLAMP_EPS, 1].
    """
    _check_probs_and_labels(probs, labels, ignore_label)
    annotated = labels != ignore_label
    if not bool(annotated.any()):
        return probs.new_zeros(())
    safe = torch.where(annotated, labels, torch.zeros_like(labels))
    p_true = probs.gather(1, safe.unsqueeze(1).long()).squeeze(1)
    nll = -p_true.clamp(PROB_CLAMP_EPS, 1.0).log()
    nll = nll[annotated]
    return nll.sum() if unnormalized else nll.mean()


def masked_dice_loss(probs: torch.Tensor, labels: torch.Tensor,
                     reliable: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss with all sums restricted to the reliable pixel set.

    Averaged over classes that carry any probability or label mass inside the
    reliable set; fully absent classes would only contribute degenerate
    smoothing-over-smoothing terms and are skipped. Zero when the reliable set
    is empty.
    """
    if reliable.shape != labels.shape:
        raise InputError(f"reliable mask shape {tuple(reliable.shape)} does not "
                         f"match labels {tuple(labels.shape)}")
    _check_probs_and_labels(probs, torch.where(reliable, labels,
                                               torch.full_like(labels, IGNORE_LABEL)),
                            IGNORE_LABEL)
    if not bool(reliable.any()):
        return probs.new_zeros(())
    mask = reliable.to(probs.dtype)
    dice_terms = []
    for cls in range(probs.shape[1]):
        target = ((labels == cls) & reliable).to(probs.dtype)
        pred = probs[:, cls] * mask
        pred_sum = pred.sum()
        target_sum = target.sum()
        if float(pred_sum.detach()) + float(target_sum.detach()) == 0.0:
            continue
        intersection = (pred * target).sum()
        dice_terms.append((2.0 * intersection + smooth) / (pred_sum + target_sum + smooth))
    if not dice_terms:
        return probs.new_zeros(())
    return 1.0 - torch.stack(dice_terms).mean()


def pseudo_loss(student_probs: torch.Tensor, pl: "PseudoLabelMap") -> torch.Tensor:
    """Half CE plus half Dice against the reliable pseudo-labels."""
    ce = pce_loss(student_probs, pl.label_map())
    dice = masked_dice_loss(student_probs, pl.labels, pl.reliable)
    return 0.5 * (ce + dice)


def feature_consistency(f_s: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance plus per-sample cosine distance, averaged half/half.

    Cosine similarity is computed on flattened per-sample vectors (a 1D input
    counts as a single sample); zero-norm vectors get cosine 0 by convention.
    """
    if f_s.shape != f_t.shape:
        raise InputError(f"feature shapes differ: {tuple(f_s.shape)} vs {tuple(f_t.shape)}")
    l1 = (f_s - f_t).abs().mean()
    a = f_s.reshape(1, -1) if f_s.ndim < 2 else f_s.flatten(1)
    b = f_t.reshape(1, -1) if f_t.ndim < 2 else f_t.flatten(1)
    dot = (a * b).sum(dim=1)
    denom = (a.norm(dim=1) * b.norm(dim=1)).clamp_min(1e-12)
    cos_dist = (1.0 - dot / denom).mean()
    return 0.5 * (l1 + cos_dist)


def hico_loss(taps_s: "FeatureTaps", taps_t: "FeatureTaps") -> torch.Tensor:
    """Average feature consistency over the low- and high-level tap pair."""
    return 0.5 * (feature_consistency(taps_s.low, taps_t.low)
                  + feature_consistency(taps_s.high, taps_t.high))


def _as_float(value) -> float:
    if torch.is_tensor(value):
        return float(value.detach())
    return float(value)


@dataclass
class LossBreakdown:
    scribble: float
    pseudo: float
    hico: float
    total: float
    reliable_fraction: float = 0.0
    selected_teacher: str | None = None


def total_loss(scribble, pseudo, hico, reliable_fraction: float = 0.0,
               selected_teacher: str | None = None) -> LossBreakdown:
    """Assemble the scalar breakdown; total is the exact float sum s + p + h.

    Accepts tensors or floats; raises NumericalError naming the first
    non-finite component.
    """
    parts = {name: _as_float(value) for name, value in
             (("scribble", scribble), ("pseudo", pseudo), ("hico", hico))}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {name} loss: {parts}")
    total = parts["scribble"] + parts["pseudo"] + parts["hico"]
    return LossBreakdown(scribble=parts["scribble"], pseudo=parts["pseudo"],
                         hico=parts["hico"], total=total,
                         reliable_fraction=float(reliable_fraction),
                         selected_teacher=selected_teacher)
