"""Training loop: warm-up, dual-teacher guidance, SGD, selective EMA, checkpoints.

Schedule: before `warmup_iters` the student learns from scribbles alone and
both teachers track it by EMA; afterwards each step scores the teachers,
builds reliable pseudo-labels from the winner, adds the feature-consistency
term, and EMA-updates only the winning teacher.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .common import ConfigError, DataError, InputError
from .dts import (PseudoLabelMap, SelectionRecord, TeacherEnsemble, dts_step,
                  ema_update, pick_reliable_pixels, write_selection_csv)
from .losses import LossBreakdown, hico_loss, pce_loss, pseudo_loss, total_loss
from .phantoms import PhantomSample, augment, dataset_fingerprint, load_dataset
from .tensorio import load_tensors, save_model_checkpoint, save_tensors
from .unet import BackboneConfig, FeatureTaps, UNet, build_unet, forward_pass

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}

LOSS_CSV_COLUMNS = ["iteration", "scribble", "pseudo", "hico", "total",
                    "reliable_fraction", "selected"]


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #
@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_iters: int = 30000
    warmup_iters: int = 12000
    batch_size: int = 8
    tau: float = 0.5
    ema_decay: float = 0.999
    seed: int = 0
    eval_every: int = 500
    dtype: str = "float32"
    teachers: str = "dual"          # "dual" | "single"
    policy: str = "dts"             # "dts" | "avg" (dual) | "none" (single)
    prp_enabled: bool = True
    hico_enabled: bool = True
    per_sample_selection: bool = False
    lr_poly_power: float = 0.0      # 0 keeps the learning rate constant
    continuous_aug: bool = False
    debug_checks: bool = False

    def validate(self, num_classes: int | None = None) -> None:
        if self.total_iters <= 0:
            raise ConfigError("total_iters must be positive")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigError(f"warmup_iters must lie in [0, total_iters], "
                              f"got {self.warmup_iters} vs {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        lo = 1.0 / num_classes if num_classes else 0.0
        if not lo <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [{lo:.4g}, 1], got {self.tau}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.dtype not in _TORCH_DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_TORCH_DTYPES)}")
        if self.teachers not in ("dual", "single"):
            raise ConfigError(f"teachers must be 'dual' or 'single', got {self.teachers!r}")
        if self.teachers == "single" and self.policy != "none":
            raise ConfigError("teachers='single' requires policy='none'")
        if self.teachers == "dual" and self.policy not in ("dts", "avg"):
            raise ConfigError("teachers='dual' requires policy 'dts' or 'avg'")

    def torch_dtype(self) -> torch.dtype:
        return _TORCH_DTYPES[self.dtype]


def load_train_config(path: str | Path) -> TrainConfig:
    """Parse a flat `key = value` config file; SDTLAB_SEED overrides the seed."""
    hints = typing.get_type_hints(TrainConfig)
    values: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in hints:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(text, hints[key], key)
    if "SDTLAB_SEED" in os.environ:
        values["seed"] = int(os.environ["SDTLAB_SEED"])
    return TrainConfig(**values)


def _parse_value(text: str, kind, key: str):
    if kind is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: cannot parse bool from {text!r}")
    try:
        return kind(text)
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: {e}") from e


def config_to_text(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(config))


# --------------------------------------------------------------------------- #
# State
# --------------------------------------------------------------------------- #
@dataclass
class TrainState:
    config: TrainConfig
    iteration: int
    student: UNet
    ensemble: TeacherEnsemble
    momentum_buffers: dict[str, torch.Tensor]
    rng: np.random.Generator
    epoch_order: np.ndarray
    epoch_pos: int
    loss_history: list[LossBreakdown] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    best_val: float | None = None
    best_iter: int = -1


def init_train_state(config: TrainConfig, num_classes: int,
                     backbone: BackboneConfig | None = None) -> TrainState:
    config.validate(num_classes=num_classes)
    dtype = config.torch_dtype()
    if backbone is None:
        backbone = BackboneConfig(num_classes=num_classes)
    student = build_unet(backbone, config.seed, dtype)
    # Teachers start from their own seeds; identical twins plus the tie rule
    # would permanently starve teacher 1 of EMA updates.
    teacher1 = build_unet(backbone, config.seed + 1, dtype)
    teacher2 = build_unet(backbone, config.seed + 2, dtype) if config.teachers == "dual" else None
    ensemble = TeacherEnsemble(teacher1=teacher1, teacher2=teacher2,
                               ema_decay=config.ema_decay)
    buffers = {name: torch.zeros_like(p) for name, p in student.named_parameters()}
    return TrainState(config=config, iteration=0, student=student, ensemble=ensemble,
                      momentum_buffers=buffers, rng=np.random.default_rng(config.seed),
                      epoch_order=np.empty(0, dtype=np.int64), epoch_pos=0)


def next_batch(state: TrainState, train_samples: list[PhantomSample]
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Next augmented batch under shuffled epoch sampling (partial tails dropped)."""
    n = len(train_samples)
    bs = state.config.batch_size
    if bs > n:
        raise ConfigError(f"batch_size {bs} exceeds training set size {n}")
    if state.epoch_pos + bs > len(state.epoch_order):
        state.epoch_order = state.rng.permutation(n)
        state.epoch_pos = 0
    idx = state.epoch_order[state.epoch_pos:state.epoch_pos + bs]
    state.epoch_pos += bs
    picked = [augment(train_samples[int(i)], state.rng,
                      continuous=state.config.continuous_aug) for i in idx]
    images = torch.from_numpy(np.stack([s.image for s in picked])[:, None, :, :])
    scribbles = torch.from_numpy(np.stack([s.scribble for s in picked]).astype(np.int64))
    return images.to(state.config.torch_dtype()), scribbles


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #
@torch.no_grad()
def sgd_update(weights: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               buffers: dict[str, torch.Tensor], lr: float, momentum: float,
               weight_decay: float) -> None:
    """Classic SGD with coupled weight decay, in place:

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
    """
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(w)
        if g.shape != w.shape:
            raise InputError(f"gradient shape mismatch for {name!r}")
        effective = g + weight_decay * w if weight_decay else g
        buf = buffers[name]
        buf.mul_(momentum).add_(effective)
        w.sub_(lr * buf)


def _current_lr(config: TrainConfig, iteration: int) -> float:
    if config.lr_poly_power <= 0:
        return config.lr
    return config.lr * (1.0 - iteration / config.total_iters) ** config.lr_poly_power


def _params_digest(net: UNet) -> str:
    h = hashlib.sha256()
    for _, p in sorted(net.state_dict().items()):
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- #
# Steps
# --------------------------------------------------------------------------- #
def _warmup_ema_decay(config: TrainConfig, iteration: int) -> float:
    # Standard mean-teacher ramp so teachers are competent when switching
    # starts; after warm-up the configured decay applies unmodified.
    return min(config.ema_decay, (iteration + 1) / (iteration + 10))


def _teacher_guidance(state: TrainState, images: torch.Tensor, scribble: torch.Tensor
                      ) -> tuple[PseudoLabelMap, FeatureTaps, SelectionRecord | None, list[UNet]]:
    """Forward the teacher(s) and derive pseudo-labels, taps, and EMA targets."""
    cfg = state.config
    threshold = cfg.tau if cfg.prp_enabled else 0.0
    ens = state.ensemble
    out1 = forward_pass(ens.teacher1, images, train_mode=False)
    if cfg.teachers == "single":
        pl = pick_reliable_pixels(torch.softmax(out1.logits, dim=1), threshold)
        return pl, out1.taps, None, [ens.teacher1]
    out2 = forward_pass(ens.teacher2, images, train_mode=False)
    if cfg.policy == "avg":
        probs = 0.5 * (torch.softmax(out1.logits, dim=1) + torch.softmax(out2.logits, dim=1))
        taps = FeatureTaps(low=0.5 * (out1.taps.low + out2.taps.low),
                           high=0.5 * (out1.taps.high + out2.taps.high))
        pl = pick_reliable_pixels(probs, threshold)
        return pl, taps, None, ens.teachers
    pl, taps, record = dts_step(ens, out1, out2, scribble, threshold,
                                iteration=state.iteration,
                                per_sample=cfg.per_sample_selection)
    winner = ens.teacher1 if record.selected == "T1" else ens.teacher2
    return pl, taps, record, [winner]


def train_step(state: TrainState, images: torch.Tensor,
               scribbles: torch.Tensor) -> LossBreakdown:
    """One optimization step; returns the recorded loss breakdown."""
    cfg = state.config
    t = state.iteration
    warmup = t < cfg.warmup_iters

    student_out = forward_pass(state.student, images, train_mode=True)
    student_probs = torch.softmax(student_out.logits, dim=1)
    scribble_term = pce_loss(student_probs, scribbles)

    if warmup:
        backward_total = scribble_term
        breakdown = total_loss(scribble_term, 0.0, 0.0)
        ema_targets = state.ensemble.teachers
        ema_decay = _warmup_ema_decay(cfg, t)
    else:
        pl, teacher_taps, record, ema_targets = _teacher_guidance(state, images, scribbles)
        pseudo_term = pseudo_loss(student_probs, pl)
        if cfg.hico_enabled:
            hico_term = hico_loss(student_out.taps, teacher_taps)
        else:
            hico_term = torch.zeros((), dtype=images.dtype)
        backward_total = scribble_term + pseudo_term + hico_term
        breakdown = total_loss(scribble_term, pseudo_term, hico_term,
                               reliable_fraction=pl.reliable_fraction(),
                               selected_teacher=record.selected if record else None)
        ema_decay = cfg.ema_decay

    before = [_params_digest(tn) for tn in state.ensemble.teachers] if cfg.debug_checks else None

    state.student.zero_grad(set_to_none=True)
    backward_total.backward()
    params = dict(state.student.named_parameters())
    grads = {name: p.grad for name, p in params.items()}
    sgd_update(params, grads, state.momentum_buffers,
               lr=_current_lr(cfg, t), momentum=cfg.momentum,
               weight_decay=cfg.weight_decay)

    if cfg.debug_checks:
        after = [_params_digest(tn) for tn in state.ensemble.teachers]
        if before != after:
            raise AssertionError("teacher weights changed through backprop/optimizer")

    for teacher in ema_targets:
        ema_update(teacher, state.student, ema_decay)

    state.iteration += 1
    state.loss_history.append(breakdown)
    return breakdown


# --------------------------------------------------------------------------- #
# State serialization (resume support)
# --------------------------------------------------------------------------- #
def save_train_state(state: TrainState, path: str | Path) -> None:
    tensors: dict[str, torch.Tensor] = {}
    for prefix, net in [("student", state.student)] + [
            (f"teacher{i + 1}", tn) for i, tn in enumerate(state.ensemble.teachers)]:
        for name, value in net.state_dict().items():
            tensors[f"{prefix}/{name}"] = value
    for name, buf in state.momentum_buffers.items():
        tensors[f"momentum/{name}"] = buf
    meta = {
        "kind": "state",
        "fingerprint": state.student.fingerprint,
        "backbone": {**asdict(state.student.config),
                     "widths": list(state.student.config.widths)},
        "config": asdict(state.config),
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "epoch_order": state.epoch_order.tolist(),
        "epoch_pos": state.epoch_pos,
        "selection_log": [asdict(r) for r in state.ensemble.selection_log],
        "loss_history": [asdict(b) for b in state.loss_history],
        "val_history": state.val_history,
        "best_val": state.best_val,
        "best_iter": state.best_iter,
    }
    save_tensors(path, tensors, meta)


def load_train_state(path: str | Path) -> TrainState:
    from .tensorio import load_params_into
    from .unet import BackboneConfig, UNet

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "state":
        raise DataError(f"{path} is not a full training state checkpoint")
    config = TrainConfig(**meta["config"])
    bcfg_dict = dict(meta["backbone"])
    bcfg_dict["widths"] = tuple(bcfg_dict["widths"])
    backbone = BackboneConfig(**bcfg_dict)

    def rebuild(prefix: str) -> UNet:
        net = UNet(backbone)
        load_params_into(net, tensors, prefix=f"{prefix}/")
        return net

    student = rebuild("student")
    teacher1 = rebuild("teacher1")
    teacher2 = rebuild("teacher2") if config.teachers == "dual" else None
    ensemble = TeacherEnsemble(
        teacher1=teacher1, teacher2=teacher2, ema_decay=config.ema_decay,
        selection_log=[SelectionRecord(**r) for r in meta["selection_log"]])
    buffers = {name[len("momentum/"):]: torch.from_numpy(arr)
               for name, arr in tensors.items() if name.startswith("momentum/")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        config=config, iteration=meta["iteration"], student=student, ensemble=ensemble,
        momentum_buffers=buffers, rng=rng,
        epoch_order=np.asarray(meta["epoch_order"], dtype=np.int64),
        epoch_pos=meta["epoch_pos"],
        loss_history=[LossBreakdown(**b) for b in meta["loss_history"]],
        val_history=meta["val_history"], best_val=meta["best_val"],
        best_iter=meta["best_iter"])


def load_student(path: str | Path) -> UNet:
    """Load the student network from either a model or a full-state checkpoint."""
    from .tensorio import load_model_checkpoint, load_params_into
    from .unet import BackboneConfig, UNet

    tensors, meta = load_tensors(path)
    if meta.get("kind") == "state":
        bcfg_dict = dict(meta["backbone"])
        bcfg_dict["widths"] = tuple(bcfg_dict["widths"])
        net = UNet(BackboneConfig(**bcfg_dict))
        load_params_into(net, tensors, prefix="student/")
        return net
    return load_model_checkpoint(path)


# --------------------------------------------------------------------------- #
# Full runs
# --------------------------------------------------------------------------- #
def _write_loss_csv(history: list[LossBreakdown], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_COLUMNS)
        for i, b in enumerate(history):
            writer.writerow([i, repr(b.scribble), repr(b.pseudo), repr(b.hico),
                             repr(b.total), repr(b.reliable_fraction),
                             b.selected_teacher or ""])


def _config_mismatch(a: TrainConfig, b: TrainConfig) -> list[str]:
    skip = {"total_iters"}  # resuming may extend the schedule
    return [f.name for f in fields(TrainConfig)
            if f.name not in skip and getattr(a, f.name) != getattr(b, f.name)]


def run(config: TrainConfig, dataset_dir: str | Path, out_dir: str | Path,
        resume_from: str | Path | None = None) -> dict:
    """Train to completion; writes checkpoints, CSV logs, and train_meta.json."""
    started = time.monotonic()
    samples, manifest = load_dataset(dataset_dir)
    num_classes = manifest["num_classes"]
    config.validate(num_classes=num_classes)
    train_samples = samples.get("train", [])
    val_samples = samples.get("val", [])
    if not train_samples:
        raise DataError("dataset has no training samples")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_train_state(resume_from)
        mismatched = _config_mismatch(state.config, config)
        if mismatched:
            raise ConfigError(f"resume config differs from checkpoint on: {mismatched}")
        state.config = replace(state.config, total_iters=config.total_iters)
    else:
        state = init_train_state(config, num_classes=num_classes)
    cfg = state.config

    from .evalkit import evaluate_split  # local import to avoid a module cycle

    def maybe_validate() -> None:
        if not val_samples:
            return
        report = evaluate_split(state.student, val_samples)
        entry = {"iteration": state.iteration, "mean_dice": report.mean}
        state.val_history.append(entry)
        if state.best_val is None or report.mean > state.best_val:
            state.best_val = report.mean
            state.best_iter = state.iteration
            save_model_checkpoint(out / "best.ckpt", state.student,
                                  {"iteration": state.iteration, "val_dice": report.mean})

    try:
        while state.iteration < cfg.total_iters:
            images, scribbles = next_batch(state, train_samples)
            train_step(state, images, scribbles)
            if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.total_iters:
                maybe_validate()
    finally:
        # Emit artifacts even on abort so non-finite failures stay inspectable.
        _write_loss_csv(state.loss_history, out / "loss.csv")
        write_selection_csv(state.ensemble.selection_log, out / "selection.csv")

    if not val_samples:
        save_model_checkpoint(out / "best.ckpt", state.student,
                              {"iteration": state.iteration, "val_dice": None})
    save_train_state(state, out / "last.ckpt")

    meta = {
        "config": asdict(cfg),
        "iterations_run": state.iteration,
        "dataset_hash": dataset_fingerprint(dataset_dir),
        "num_classes": num_classes,
        "best_val_dice": state.best_val,
        "best_iter": state.best_iter,
        "final_loss": asdict(state.loss_history[-1]) if state.loss_history else None,
        "val_history": state.val_history,
        "wall_time_s": time.monotonic() - started,
    }
    with open(out / "train_meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta
