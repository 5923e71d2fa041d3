"""Command-line entry point: synth / train / eval / ablate / gradcheck / report.

Exit codes: 0 success, 1 runtime failure (I/O, numerics), 2 usage or
configuration error. The SDTLAB_SEED environment variable overrides the seed
from any training config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .common import ConfigError, SdtlabError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdtlab",
        description="Scribble-supervised dual-teacher segmentation lab on synthetic "
                    "cardiac phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and save a phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int, default=200, help="training samples")
    p.add_argument("--n-val", type=int, default=20, help="validation samples")
    p.add_argument("--n-test", type=int, default=50, help="test samples")
    p.add_argument("--size", type=int, default=64, help="square image size, multiple of 16")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--classes", type=int, default=4, help="number of classes (2..4)")
    p.add_argument("--png", action="store_true", help="also export preview PNGs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run a full training")
    p.add_argument("--config", required=True, help="flat key=value training config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", default=None, help="full-state checkpoint to resume from")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True, help="model or full-state checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the seven component combinations")
    p.add_argument("--config", required=True, help="flat key=value training config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="ablation output directory")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle for all losses")
    p.add_argument("--inputs", type=int, default=20, help="random inputs per loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render summary markdown and plots for a run")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--out", default=None, help="where to write (defaults to run dir)")
    p.set_defaults(func=cmd_report)

    return parser


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_synth(args) -> int:
    from .phantoms import DatasetSpec, export_preview_pngs, generate_dataset, save_dataset

    spec = DatasetSpec(num_classes=args.classes, image_size=args.size,
                       n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                       seed=args.seed)
    spec.validate()
    samples = generate_dataset(spec)
    manifest = save_dataset(args.out, samples, spec)
    if args.png:
        export_preview_pngs(args.out, Path(args.out) / "previews")
    counts = {split: len(ids) for split, ids in manifest["splits"].items()}
    print(f"dataset written to {args.out}")
    print(f"  classes={manifest['num_classes']} size={manifest['height']}x{manifest['width']} "
          f"seed={manifest['seed']}")
    print(f"  splits: {counts}")
    return 0


def cmd_train(args) -> int:
    from .trainer import load_train_config, run

    config = load_train_config(args.config)
    meta = run(config, args.data, args.out, resume_from=args.resume)
    if args.json:
        print(json.dumps(meta, indent=2, sort_keys=True))
        return 0
    print(f"run complete: {meta['iterations_run']} iterations in "
          f"{meta['wall_time_s']:.1f} s")
    final = meta.get("final_loss") or {}
    print(f"  final losses: scribble={final.get('scribble'):.4f} "
          f"pseudo={final.get('pseudo'):.4f} hico={final.get('hico'):.4f} "
          f"total={final.get('total'):.4f}")
    if meta.get("best_val_dice") is not None:
        print(f"  best val mean Dice: {meta['best_val_dice']:.4f} "
              f"at iteration {meta['best_iter']}")
    print(f"  artifacts in {args.out}")
    return 0


def _print_dice(report, num_classes: int) -> None:
    from .phantoms import CLASS_NAMES

    for cls in sorted(report.per_class):
        name = CLASS_NAMES.get(cls, f"class{cls}") if num_classes == 4 else f"class{cls}"
        print(f"  {name:>6}: {report.per_class[cls]:.4f}")
    print(f"  {'mean':>6}: {report.mean:.4f}  ({report.n_samples} slices)")


def cmd_eval(args) -> int:
    from .evalkit import evaluate_split
    from .phantoms import load_dataset
    from .trainer import load_student

    net = load_student(args.ckpt)
    samples, manifest = load_dataset(args.data)
    split = samples.get(args.split, [])
    if not split:
        raise SdtlabError(f"split {args.split!r} is empty in {args.data}")
    report = evaluate_split(net, split)
    if args.json:
        print(json.dumps({"split": args.split, "n_samples": report.n_samples,
                          "per_class": {str(k): v for k, v in report.per_class.items()},
                          "mean": report.mean}, indent=2, sort_keys=True))
        return 0
    print(f"Dice on {args.split} split:")
    _print_dice(report, manifest["num_classes"])
    return 0


def cmd_ablate(args) -> int:
    from .evalkit import run_ablation
    from .trainer import load_train_config

    config = load_train_config(args.config)
    grid = run_ablation(config, args.data, args.out)
    if args.json:
        payload = {
            "dataset_hash": grid.dataset_hash,
            "seed": grid.seed,
            "rows": [{**asdict(res.row),
                      "per_class": {str(k): v for k, v in res.report.per_class.items()},
                      "mean": res.report.mean,
                      "run_dir": res.run_dir} for res in grid.results],
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    print((Path(args.out) / "ablation.md").read_text())
    return 0


def cmd_gradcheck(args) -> int:
    from .evalkit import gradcheck_suite

    results = gradcheck_suite(n_inputs=args.inputs, seed=args.seed)
    if args.json:
        print(json.dumps([{**asdict(r), "passed": r.passed} for r in results],
                         indent=2, sort_keys=True))
    else:
        for r in results:
            status = "pass" if r.passed else "FAIL"
            print(f"{r.loss_name:>20}: max rel err {r.max_rel_err:.3e} "
                  f"(tol {r.tolerance:.0e}, {r.n_inputs} inputs)  {status}")
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args) -> int:
    from .evalkit import emit_report

    artifacts = emit_report(args.run, args.out)
    for name, path in artifacts.items():
        print(f"{name}: {path}")
    return 0


# --------------------------------------------------------------------------- #
def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (SdtlabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
