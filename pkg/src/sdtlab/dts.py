"""Teacher scoring, dynamic switching, reliable-pixel filtering, selective EMA."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .common import IGNORE_LABEL, ConfigError, InputError, NumericalError
from .losses import PROB_CLAMP_EPS, pce_loss
from .unet import FeatureTaps, ModelOutput, UNet

TEACHER_1 = "T1"
TEACHER_2 = "T2"


@dataclass
class PseudoLabelMap:
    """Hard labels plus the reliability mask produced by confidence filtering."""

    labels: torch.Tensor    # (N, H, W) long
    reliable: torch.Tensor  # (N, H, W) bool
    threshold: float

    def label_map(self, ignore_label: int = IGNORE_LABEL) -> torch.Tensor:
        """Labels with unreliable pixels replaced by the ignore value."""
        return torch.where(self.reliable, self.labels,
                           torch.full_like(self.labels, ignore_label))

    def reliable_fraction(self) -> float:
        return float(self.reliable.float().mean())


@dataclass
class SelectionRecord:
    iteration: int
    selected: str
    loss_t1: float
    loss_t2: float


@dataclass
class TeacherEnsemble:
    """The two EMA teachers plus the per-iteration selection history."""

    teacher1: UNet
    teacher2: UNet | None
    ema_decay: float
    selection_log: list[SelectionRecord] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.teacher2 is not None and self.teacher1.fingerprint != self.teacher2.fingerprint:
            raise InputError("teacher architectures differ (fingerprint mismatch)")

    @property
    def teachers(self) -> list[UNet]:
        return [self.teacher1] if self.teacher2 is None else [self.teacher1, self.teacher2]


def score_teachers(probs_t1: torch.Tensor, probs_t2: torch.Tensor,
                   scribble: torch.Tensor) -> tuple[float, float]:
    """Scribble partial-CE of each teacher over the whole batch."""
    return (float(pce_loss(probs_t1, scribble)), float(pce_loss(probs_t2, scribble)))


def select_teacher(loss_t1: float, loss_t2: float) -> str:
    """Lower scribble loss wins; ties (the 'otherwise' branch) go to teacher 2."""
    if math.isnan(loss_t1) or math.isnan(loss_t2):
        raise NumericalError(f"NaN teacher score: T1={loss_t1}, T2={loss_t2}")
    return TEACHER_1 if loss_t1 < loss_t2 else TEACHER_2


def pick_reliable_pixels(probs: torch.Tensor, threshold: float) -> PseudoLabelMap:
    """Keep pixels whose max class probability reaches the threshold.

    Labels are the argmax (ties resolved to the lowest class index); everything
    below the threshold is marked unreliable and later ignored.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"confidence threshold must be in [0, 1], got {threshold}")
    if probs.ndim != 4:
        raise InputError(f"probs must be (N, K, H, W), got {tuple(probs.shape)}")
    probs = probs.detach()
    max_prob = probs.max(dim=1).values
    labels = probs.argmax(dim=1)
    return PseudoLabelMap(labels=labels, reliable=max_prob >= threshold,
                          threshold=threshold)


@torch.no_grad()
def ema_update(teacher: UNet, student: UNet, decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, parameter-wise."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"EMA decay must be in [0, 1], got {decay}")
    if teacher.fingerprint != student.fingerprint:
        raise InputError("EMA update across different architectures (fingerprint mismatch)")
    for (name_t, p_t), (name_s, p_s) in zip(teacher.named_parameters(),
                                            student.named_parameters()):
        assert name_t == name_s
        # lerp keeps both endpoints exact and never leaves the [teacher, student] hull.
        p_t.lerp_(p_s.to(p_t.dtype), 1.0 - decay)


def _per_sample_pce(probs: torch.Tensor, scribble: torch.Tensor) -> torch.Tensor:
    """Mean scribble NLL per batch element; 0 for elements without annotations."""
    annotated = scribble != IGNORE_LABEL
    safe = torch.where(annotated, scribble, torch.zeros_like(scribble))
    p_true = probs.gather(1, safe.unsqueeze(1).long()).squeeze(1)
    nll = -p_true.clamp(PROB_CLAMP_EPS, 1.0).log() * annotated.to(probs.dtype)
    counts = annotated.sum(dim=(1, 2)).clamp_min(1)
    return nll.sum(dim=(1, 2)) / counts.to(probs.dtype)


def dts_step(ensemble: TeacherEnsemble, out_t1: ModelOutput, out_t2: ModelOutput,
             scribble: torch.Tensor, threshold: float, iteration: int,
             per_sample: bool = False) -> tuple[PseudoLabelMap, FeatureTaps, SelectionRecord]:
    """One dynamic-switching round for a batch.

    Scores both teachers on the scribbles, picks the more reliable one, filters
    its softmax output into pseudo-labels, and hands back its feature taps.
    With `per_sample=True` (experimental) pseudo-labels and taps are assembled
    element-wise from the per-sample winner, while the logged/EMA selection
    stays the batch-level winner.
    """
    probs_t1 = torch.softmax(out_t1.logits.detach(), dim=1)
    probs_t2 = torch.softmax(out_t2.logits.detach(), dim=1)
    loss_t1, loss_t2 = score_teachers(probs_t1, probs_t2, scribble)
    selected = select_teacher(loss_t1, loss_t2)

    if per_sample:
        t1_wins = _per_sample_pce(probs_t1, scribble) < _per_sample_pce(probs_t2, scribble)
        pick = t1_wins.view(-1, 1, 1, 1)
        probs_sel = torch.where(pick, probs_t1, probs_t2)
        taps = FeatureTaps(
            low=torch.where(pick, out_t1.taps.low, out_t2.taps.low),
            high=torch.where(pick, out_t1.taps.high, out_t2.taps.high),
        )
    else:
        winner = out_t1 if selected == TEACHER_1 else out_t2
        probs_sel = probs_t1 if selected == TEACHER_1 else probs_t2
        taps = winner.taps

    pl = pick_reliable_pixels(probs_sel, threshold)
    record = SelectionRecord(iteration=iteration, selected=selected,
                             loss_t1=loss_t1, loss_t2=loss_t2)
    ensemble.selection_log.append(record)
    return pl, taps, record


def write_selection_csv(log: list[SelectionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "selected", "loss_t1", "loss_t2"])
        for rec in log:
            writer.writerow([rec.iteration, rec.selected, repr(rec.loss_t1), repr(rec.loss_t2)])
