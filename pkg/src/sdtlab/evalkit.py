"""Dice evaluation, the component ablation harness, gradient oracles, reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .common import DataError, InputError
from .dts import PseudoLabelMap
from .losses import feature_consistency, hico_loss, masked_dice_loss, pce_loss, pseudo_loss
from .phantoms import CLASS_NAMES, IGNORE_LABEL, PhantomSample, dataset_fingerprint, load_dataset
from .trainer import TrainConfig, load_student, run
from .unet import FeatureTaps, UNet, forward_pass, model_dtype

GRADCHECK_TOLERANCE = 1e-4


# --------------------------------------------------------------------------- #
# Dice metric
# --------------------------------------------------------------------------- #
@dataclass
class DiceReport:
    per_class: dict[int, float]  # foreground classes present in pred or truth
    mean: float                  # arithmetic mean over the included classes
    n_samples: int


def dice_score(pred_mask: np.ndarray, true_mask: np.ndarray, num_classes: int) -> DiceReport:
    """Per-foreground-class overlap 2|P∩T| / (|P|+|T|).

    Classes absent from both masks are excluded from the per-class map and the
    mean (scoring them 1.0 would inflate slices lacking a structure).
    """
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise InputError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    per_class: dict[int, float] = {}
    for cls in range(1, num_classes):
        pred = pred_mask == cls
        true = true_mask == cls
        denom = int(pred.sum()) + int(true.sum())
        if denom == 0:
            continue
        per_class[cls] = 2.0 * int((pred & true).sum()) / denom
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    n_samples = pred_mask.shape[0] if pred_mask.ndim == 3 else 1
    return DiceReport(per_class=per_class, mean=mean, n_samples=n_samples)


def evaluate_volume(net: UNet, volume: np.ndarray) -> np.ndarray:
    """Slice-by-slice argmax predictions, no post-processing, order preserved."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise InputError(f"volume must be (D, H, W), got {volume.shape}")
    preds = []
    for d in range(volume.shape[0]):
        x = torch.from_numpy(volume[d][None, None].astype(np.float32))
        x = x.to(model_dtype(net))
        out = forward_pass(net, x, train_mode=False)
        logits = out.logits[0].cpu().numpy()
        # numpy argmax resolves ties to the lowest class index
        preds.append(np.argmax(logits, axis=0).astype(np.uint8))
    return np.stack(preds)


def evaluate_split(net: UNet, samples: list[PhantomSample]) -> DiceReport:
    """Aggregate Dice over a whole split, treating the samples as one stack."""
    if not samples:
        raise InputError("cannot evaluate an empty split")
    volume = np.stack([s.image for s in samples])
    truth = np.stack([s.dense_mask for s in samples])
    pred = evaluate_volume(net, volume)
    return dice_score(pred, truth, net.config.num_classes)


# --------------------------------------------------------------------------- #
# Ablation harness
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class AblationRow:
    teachers: str  # "single" | "dual"
    policy: str    # "none" | "avg" | "dts"
    prp: bool
    hico: bool

    def label(self) -> str:
        flags = f"{'prp' if self.prp else 'noprp'}-{'hico' if self.hico else 'nohico'}"
        return f"{self.teachers}-{self.policy}-{flags}"


# The seven component combinations of the effectiveness study.
ABLATION_ROWS: tuple[AblationRow, ...] = (
    AblationRow("single", "none", prp=False, hico=False),
    AblationRow("single", "none", prp=True, hico=True),
    AblationRow("dual", "avg", prp=True, hico=True),
    AblationRow("dual", "dts", prp=False, hico=False),
    AblationRow("dual", "dts", prp=True, hico=False),
    AblationRow("dual", "dts", prp=False, hico=True),
    AblationRow("dual", "dts", prp=True, hico=True),
)


@dataclass
class AblationResult:
    row: AblationRow
    report: DiceReport
    run_dir: str


@dataclass
class AblationGrid:
    results: list[AblationResult]
    dataset_hash: str
    seed: int


def _class_header(num_classes: int) -> list[str]:
    if num_classes == 4:
        return [CLASS_NAMES[c] for c in range(1, 4)]
    return [f"class{c}" for c in range(1, num_classes)]


def run_ablation(config: TrainConfig, dataset_dir: str | Path,
                 out_dir: str | Path) -> AblationGrid:
    """Train all seven rows on identical data/seed and collect test-split Dice.

    Fairness is asserted by hashing: every row must consume the same dataset
    bytes and the same seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, manifest = load_dataset(dataset_dir)
    if not samples.get("test"):
        raise DataError("ablation needs a test split")
    expected_hash = dataset_fingerprint(dataset_dir)

    results: list[AblationResult] = []
    for row in ABLATION_ROWS:
        row_cfg = replace(config, teachers=row.teachers, policy=row.policy,
                          prp_enabled=row.prp, hico_enabled=row.hico)
        row_dir = out / row.label()
        meta = run(row_cfg, dataset_dir, row_dir)
        if meta["dataset_hash"] != expected_hash or row_cfg.seed != config.seed:
            raise DataError(f"ablation fairness violated for row {row.label()}: "
                            f"dataset hash or seed drifted")
        net = load_student(row_dir / "best.ckpt")
        report = evaluate_split(net, samples["test"])
        results.append(AblationResult(row=row, report=report, run_dir=str(row_dir)))

    grid = AblationGrid(results=results, dataset_hash=expected_hash, seed=config.seed)
    _write_ablation_csv(grid, manifest["num_classes"], out / "ablation.csv")
    _write_ablation_md(grid, manifest["num_classes"], out / "ablation.md")
    return grid


def _write_ablation_csv(grid: AblationGrid, num_classes: int, path: Path) -> None:
    names = _class_header(num_classes)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["teachers", "policy", "prp", "hico", *names, "mean"])
        for res in grid.results:
            dice = [f"{res.report.per_class.get(c, float('nan')):.4f}"
                    for c in range(1, num_classes)]
            writer.writerow([res.row.teachers, res.row.policy,
                             int(res.row.prp), int(res.row.hico),
                             *dice, f"{res.report.mean:.4f}"])
        writer.writerow([])
        writer.writerow(["dataset_hash", grid.dataset_hash, "seed", grid.seed])


def _write_ablation_md(grid: AblationGrid, num_classes: int, path: Path) -> None:
    names = _class_header(num_classes)
    display = list(reversed(names)) if num_classes == 4 else names  # LV, MYO, RV
    lines = ["| No. T | PL | PRP | HiCo | " + " | ".join(display) + " | Avg |",
             "|---" * (4 + len(display) + 1) + "|"]
    for res in grid.results:
        policy = {"none": "Teacher", "avg": "Avg", "dts": "DTS"}[res.row.policy]
        order = (range(num_classes - 1, 0, -1) if num_classes == 4
                 else range(1, num_classes))
        dice = [f"{100 * res.report.per_class.get(c, float('nan')):.1f}" for c in order]
        lines.append(
            f"| {res.row.teachers.capitalize()} | {policy} "
            f"| {'yes' if res.row.prp else 'no'} | {'yes' if res.row.hico else 'no'} "
            f"| " + " | ".join(dice) + f" | {100 * res.report.mean:.1f} |")
    lines.append("")
    lines.append(f"dataset hash `{grid.dataset_hash[:16]}`, seed {grid.seed}")
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- #
# Gradient oracle suite
# --------------------------------------------------------------------------- #
@dataclass
class GradCheckResult:
    loss_name: str
    max_rel_err: float
    tolerance: float
    n_inputs: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def finite_difference_grad(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central finite differences, element by element, in the input's dtype."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        f_plus = float(fn(x))
        flat[i] = orig - step
        f_minus = float(fn(x))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(x.shape)


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    value = fn(x)
    value.backward()
    return torch.zeros_like(x) if x.grad is None else x.grad.detach()


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    denom = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float(((a - b).abs() / denom).max())


def _random_probs(rng: np.random.Generator, shape) -> torch.Tensor:
    logits = torch.from_numpy(rng.normal(0.0, 1.2, size=shape))
    return torch.softmax(logits, dim=1)


def _random_labels(rng: np.random.Generator, shape, num_classes: int,
                   ignore_fraction: float) -> torch.Tensor:
    labels = rng.integers(0, num_classes, size=shape)
    labels[rng.random(shape) < ignore_fraction] = IGNORE_LABEL
    return torch.from_numpy(labels.astype(np.int64))


def _separated_features(rng: np.random.Generator, shape) -> tuple[torch.Tensor, torch.Tensor]:
    # Keep every element pair at least 0.05 apart: the finite-difference probe
    # must not cross the L1 kink (exact ties are a documented exclusion).
    f_t = torch.from_numpy(rng.normal(0.0, 1.0, size=shape))
    delta = torch.from_numpy(rng.normal(0.0, 0.5, size=shape))
    delta = torch.where(delta >= 0, delta + 0.05, delta - 0.05)
    return f_t + delta, f_t


def gradcheck_suite(n_inputs: int = 20, shape: tuple[int, ...] = (2, 3, 8, 8),
                    step: float = 1e-5, seed: int = 0,
                    tolerance: float = GRADCHECK_TOLERANCE) -> list[GradCheckResult]:
    """Compare autograd gradients of every loss against central finite
    differences on random double-precision inputs; reports the worst relative
    error per loss."""
    rng = np.random.default_rng(seed)
    num_classes = shape[1]
    n_batch = shape[0]
    worst = {name: 0.0 for name in
             ("pce_loss", "masked_dice_loss", "pseudo_loss", "feature_consistency", "hico_loss")}

    def record(name: str, fn, x: torch.Tensor) -> None:
        err = max_relative_error(analytic_grad(fn, x), finite_difference_grad(fn, x, step))
        worst[name] = max(worst[name], err)

    for _ in range(n_inputs):
        probs = _random_probs(rng, shape)
        labels = _random_labels(rng, (shape[0], shape[2], shape[3]), num_classes, 0.3)
        record("pce_loss", lambda p: pce_loss(p, labels), probs)

        dense = _random_labels(rng, (shape[0], shape[2], shape[3]), num_classes, 0.0)
        reliable = torch.from_numpy(rng.random((shape[0], shape[2], shape[3])) < 0.6)
        if not bool(reliable.any()):
            reliable[0, 0, 0] = True
        record("masked_dice_loss",
               lambda p: masked_dice_loss(p, dense, reliable), _random_probs(rng, shape))

        pl = PseudoLabelMap(labels=dense, reliable=reliable, threshold=0.5)
        record("pseudo_loss", lambda p: pseudo_loss(p, pl), _random_probs(rng, shape))

        f_s, f_t = _separated_features(rng, shape)
        record("feature_consistency", lambda f: feature_consistency(f, f_t), f_s)

        low_s, low_t = _separated_features(rng, shape)
        high_s, high_t = _separated_features(rng, shape)
        taps_t = FeatureTaps(low=low_t, high=high_t)

        def hico_fn(z: torch.Tensor) -> torch.Tensor:
            return hico_loss(FeatureTaps(low=z[:n_batch], high=z[n_batch:]), taps_t)

        record("hico_loss", hico_fn, torch.cat([low_s, high_s], dim=0))

    return [GradCheckResult(loss_name=name, max_rel_err=err, tolerance=tolerance,
                            n_inputs=n_inputs) for name, err in worst.items()]


# --------------------------------------------------------------------------- #
# Run reports
# --------------------------------------------------------------------------- #
def _read_loss_csv(path: Path) -> dict[str, list]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out: dict[str, list] = {key: [] for key in rows[0]} if rows else {}
    for row in rows:
        for key, value in row.items():
            out[key].append(value if key == "selected" else float(value))
    return out


def emit_report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict[str, str]:
    """Render a markdown summary plus loss/selection/reliability plots."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_path = Path(run_dir)
    out = Path(out_dir) if out_dir else run_path
    out.mkdir(parents=True, exist_ok=True)

    loss_csv = run_path / "loss.csv"
    if not loss_csv.exists():
        raise DataError(f"missing artifact: {loss_csv}")
    meta_path = run_path / "train_meta.json"
    if not meta_path.exists():
        raise DataError(f"missing artifact: {meta_path}")
    series = _read_loss_csv(loss_csv)
    with open(meta_path) as f:
        meta = json.load(f)

    iters = series.get("iteration", [])
    artifacts: dict[str, str] = {}

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("scribble", "pseudo", "hico", "total"):
        ax.plot(iters, series.get(key, []), label=key, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")
    fig.tight_layout()
    loss_png = out / "loss_curves.png"
    fig.savefig(loss_png, dpi=120)
    plt.close(fig)
    artifacts["loss_curves"] = str(loss_png)

    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(iters, series.get("reliable_fraction", []), color="tab:green", linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("reliable fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("pseudo-label reliability over time")
    fig.tight_layout()
    frac_png = out / "reliable_fraction.png"
    fig.savefig(frac_png, dpi=120)
    plt.close(fig)
    artifacts["reliable_fraction"] = str(frac_png)

    sel_png = out / "teacher_selection.png"
    artifacts["teacher_selection"] = str(sel_png)
    _plot_selection(run_path / "selection.csv", sel_png, plt)

    report_md = out / "report.md"
    artifacts["report"] = str(report_md)
    final = meta.get("final_loss") or {}
    lines = [
        "# Training run summary",
        "",
        f"- run directory: `{run_path}`",
        f"- iterations: {meta.get('iterations_run')}",
        f"- best validation mean Dice: {_fmt(meta.get('best_val_dice'))} "
        f"(iteration {meta.get('best_iter')})",
        f"- final total loss: {_fmt(final.get('total'))}",
        f"- final reliable fraction: {_fmt(final.get('reliable_fraction'))}",
        f"- wall time: {meta.get('wall_time_s', 0.0):.1f} s",
        "",
        "## Artifacts",
        "",
    ]
    lines += [f"- {name}: `{path}`" for name, path in artifacts.items() if name != "report"]
    report_md.write_text("\n".join(lines) + "\n")
    return artifacts


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return f"{value:.4f}"


def _plot_selection(selection_csv: Path, out_png: Path, plt, n_bins: int = 20) -> None:
    rows = []
    if selection_csv.exists():
        with open(selection_csv, newline="") as f:
            rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(7, 3))
    if rows:
        iters = np.array([int(r["iteration"]) for r in rows])
        chose_t1 = np.array([r["selected"] == "T1" for r in rows])
        edges = np.linspace(iters.min(), iters.max() + 1, n_bins + 1)
        centers, frac_t1 = [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            in_bin = (iters >= lo) & (iters < hi)
            if in_bin.any():
                centers.append(0.5 * (lo + hi))
                frac_t1.append(float(chose_t1[in_bin].mean()))
        centers = np.array(centers)
        frac_t1 = np.array(frac_t1)
        width = (edges[1] - edges[0]) * 0.9
        ax.bar(centers, frac_t1, width=width, label="T1", color="tab:blue")
        ax.bar(centers, 1.0 - frac_t1, width=width, bottom=frac_t1, label="T2",
               color="tab:orange")
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no teacher switching recorded (warm-up only run)",
                ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("iteration")
    ax.set_ylabel("selection fraction")
    ax.set_ylim(0, 1)
    ax.set_title("teacher selection frequency")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
