"""Acceptance suite: one test per criterion, run in order.

Each test prints a single PASS line on success (visible with `pytest -s` or
`-rA`); failures carry the measured numbers in the assertion message.
"""

import csv
import time

import numpy as np
import pytest
import torch

from conftest import tiny_net
from oracles import IGNORE, pce_pixel_loop, prp_scan
from sdtlab.dts import (TeacherEnsemble, dts_step, ema_update,
                        pick_reliable_pixels, score_teachers, select_teacher)
from sdtlab.evalkit import (ABLATION_ROWS, evaluate_split, gradcheck_suite,
                            run_ablation)
from sdtlab.phantoms import (DatasetSpec, dataset_fingerprint, generate_dataset,
                             load_dataset, save_dataset)
from sdtlab.trainer import TrainConfig, load_student, run
from sdtlab.unet import forward_pass

# Frozen margin for the directional experiment (criterion 7): confirmed on
# seeds 0, 1, 2 before being pinned here.
BENCHMARK_SEED = 0
MARGIN_POINTS = 5.0

BENCH_SPEC = DatasetSpec(num_classes=4, image_size=64, n_train=200, n_val=0,
                         n_test=50, seed=BENCHMARK_SEED)
BENCH_CONFIG = TrainConfig(total_iters=2000, warmup_iters=500, batch_size=8,
                           tau=0.5, ema_decay=0.999, lr=0.01, momentum=0.9,
                           weight_decay=1e-4, seed=BENCHMARK_SEED, eval_every=500)


def _flat_params(net) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def _net_bytes(net) -> bytes:
    return b"".join(p.detach().numpy().tobytes() for _, p in sorted(net.state_dict().items()))


# --------------------------------------------------------------------------- #
# criterion 1: gradient oracle
# --------------------------------------------------------------------------- #
def test_c1_gradient_oracle():
    started = time.monotonic()
    results = gradcheck_suite(n_inputs=20, shape=(2, 3, 8, 8), step=1e-5, seed=0)
    elapsed = time.monotonic() - started
    for r in results:
        assert r.max_rel_err < 1e-4, \
            f"{r.loss_name}: max rel err {r.max_rel_err:.3e} >= 1e-4"
    checked = {r.loss_name for r in results}
    assert {"pce_loss", "masked_dice_loss", "feature_consistency", "hico_loss"} <= checked
    assert elapsed < 120.0, f"gradient oracle took {elapsed:.1f}s (budget 120s)"
    print(f"\n[criterion 1] PASS — gradient oracle, worst rel err "
          f"{max(r.max_rel_err for r in results):.2e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------- #
# criterion 2: DTS equivalence against a brute-force argmin
# --------------------------------------------------------------------------- #
def test_c2_dts_selection_equivalence():
    rng = np.random.default_rng(2)
    agreements = 0
    for _ in range(100):
        probs_t1 = torch.softmax(torch.from_numpy(rng.normal(size=(2, 4, 8, 8))), dim=1)
        probs_t2 = torch.softmax(torch.from_numpy(rng.normal(size=(2, 4, 8, 8))), dim=1)
        scribble = rng.integers(0, 4, size=(2, 8, 8))
        scribble[rng.random((2, 8, 8)) < 0.5] = IGNORE
        scribble_t = torch.from_numpy(scribble.astype(np.int64))

        l1, l2 = score_teachers(probs_t1, probs_t2, scribble_t)
        oracle_1 = pce_pixel_loop(probs_t1.numpy(), scribble)
        oracle_2 = pce_pixel_loop(probs_t2.numpy(), scribble)
        assert l1 == pytest.approx(oracle_1, abs=1e-6)
        assert l2 == pytest.approx(oracle_2, abs=1e-6)
        oracle_pick = "T1" if oracle_1 < oracle_2 else "T2"  # tie -> T2
        agreements += select_teacher(l1, l2) == oracle_pick
    assert agreements == 100, f"selection agreed on {agreements}/100 batches"
    print("\n[criterion 2] PASS — teacher selection matched the brute-force "
          "argmin on 100/100 batches")


# --------------------------------------------------------------------------- #
# criterion 3: PRP equivalence and monotone shrinkage
# --------------------------------------------------------------------------- #
def test_c3_prp_equivalence():
    rng = np.random.default_rng(3)
    probs = torch.softmax(torch.from_numpy(rng.normal(size=(1, 4, 25, 40))), dim=1)
    assert probs.shape[2] * probs.shape[3] == 1000
    for threshold in (0.5, 0.9):
        pl = pick_reliable_pixels(probs, threshold)
        labels, reliable = prp_scan(probs.numpy(), threshold)
        assert np.array_equal(pl.reliable.numpy(), reliable), f"mask differs at tau={threshold}"
        assert np.array_equal(pl.labels.numpy()[reliable], labels[reliable]), \
            f"labels differ at tau={threshold}"

    previous = None
    for threshold in np.arange(0.30, 0.951, 0.05):
        mask = pick_reliable_pixels(probs, float(round(threshold, 2))).reliable.numpy()
        if previous is not None:
            assert np.all(previous | ~mask), \
                f"reliable set is not shrinking at tau={threshold:.2f}"
        previous = mask
    print("\n[criterion 3] PASS — PRP matched the per-pixel scan at tau 0.5/0.9 "
          "and shrank monotonically over the 0.30..0.95 sweep")


# --------------------------------------------------------------------------- #
# criterion 4: EMA dynamics
# --------------------------------------------------------------------------- #
def test_c4_ema_dynamics():
    decay = 0.999
    teacher = tiny_net(0, dtype=torch.float64)
    student = tiny_net(1, dtype=torch.float64)
    initial = float((_flat_params(teacher) - _flat_params(student)).norm())
    checkpoints = {1, 10, 100}
    for n in range(1, 101):
        ema_update(teacher, student, decay)
        if n in checkpoints:
            distance = float((_flat_params(teacher) - _flat_params(student)).norm())
            expected = decay**n * initial
            rel = abs(distance - expected) / expected
            assert rel < 1e-6, f"n={n}: relative error {rel:.3e}"

    # selective updates: the losing teacher's bytes must never move
    rng = np.random.default_rng(4)
    student = tiny_net(2)
    t1, t2 = tiny_net(3), tiny_net(4)
    ensemble = TeacherEnsemble(teacher1=t1, teacher2=t2, ema_decay=decay)
    seen = set()
    for i in range(100):
        images = torch.from_numpy(rng.normal(size=(2, 1, 16, 16)).astype(np.float32))
        scribble = rng.integers(0, 4, size=(2, 16, 16))
        scribble[rng.random((2, 16, 16)) < 0.5] = IGNORE
        out1 = forward_pass(t1, images, train_mode=False)
        out2 = forward_pass(t2, images, train_mode=False)
        _, _, record = dts_step(ensemble, out1, out2,
                                torch.from_numpy(scribble.astype(np.int64)),
                                0.5, iteration=i)
        winner, loser = (t1, t2) if record.selected == "T1" else (t2, t1)
        loser_before = _net_bytes(loser)
        ema_update(winner, student, decay)
        assert _net_bytes(loser) == loser_before, f"non-selected teacher moved at step {i}"
        seen.add(record.selected)
        with torch.no_grad():
            for p in student.parameters():
                p.add_(torch.from_numpy(
                    rng.normal(scale=0.02, size=tuple(p.shape)).astype(np.float32)))
    assert seen == {"T1", "T2"}, "both teachers should win at least once in 100 steps"
    print("\n[criterion 4] PASS — EMA distance tracked decay^n within 1e-6 and the "
          "non-selected teacher stayed bit-identical over 100 switching steps")


# --------------------------------------------------------------------------- #
# criteria 5 and 6 share two short double-precision runs
# --------------------------------------------------------------------------- #
@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("twin_runs")
    spec = DatasetSpec(num_classes=4, image_size=32, n_train=12, n_val=0,
                       n_test=4, seed=6)
    data_a, data_b = root / "data_a", root / "data_b"
    save_dataset(data_a, generate_dataset(spec), spec)
    save_dataset(data_b, generate_dataset(spec), spec)
    config = TrainConfig(total_iters=50, warmup_iters=25, batch_size=4,
                         eval_every=25, seed=6, dtype="float64")
    run(config, data_a, root / "run_a")
    run(config, data_a, root / "run_b")
    return root


def _loss_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_c5_loss_assembly(twin_runs):
    rows = _loss_rows(twin_runs / "run_a" / "loss.csv")
    assert len(rows) == 50
    for row in rows:
        iteration = int(row["iteration"])
        scribble = float(row["scribble"])
        pseudo = float(row["pseudo"])
        hico = float(row["hico"])
        total = float(row["total"])
        assert total == scribble + pseudo + hico, f"sum mismatch at iter {iteration}"
        assert min(scribble, pseudo, hico) >= 0.0, f"negative component at iter {iteration}"
        if iteration < 25:
            assert pseudo == 0.0 and hico == 0.0, f"warm-up leak at iter {iteration}"
    assert any(float(r["pseudo"]) > 0 for r in rows[25:]), \
        "post-warm-up rows never produced pseudo supervision"
    print("\n[criterion 5] PASS — every logged step satisfied total = scribble + "
          "pseudo + hico exactly, with warm-up components at exact zero")


def test_c6_determinism(twin_runs):
    loss_a = (twin_runs / "run_a" / "loss.csv").read_bytes()
    loss_b = (twin_runs / "run_b" / "loss.csv").read_bytes()
    assert loss_a == loss_b, "identical config/seed produced different trajectories"
    sel_a = (twin_runs / "run_a" / "selection.csv").read_bytes()
    sel_b = (twin_runs / "run_b" / "selection.csv").read_bytes()
    assert sel_a == sel_b
    assert dataset_fingerprint(twin_runs / "data_a") == \
        dataset_fingerprint(twin_runs / "data_b"), "dataset bytes not reproducible"
    print("\n[criterion 6] PASS — twin 50-step double-precision runs were "
          "bit-identical and dataset generation reproduced the same bytes")


# --------------------------------------------------------------------------- #
# criterion 7: directional end-to-end benchmark
# --------------------------------------------------------------------------- #
def test_c7_directional_end_to_end(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    data = root / "data"
    save_dataset(data, generate_dataset(BENCH_SPEC), BENCH_SPEC)
    samples, _ = load_dataset(data)

    def train_and_score(config, out_dir):
        started = time.monotonic()
        run(config, data, out_dir)
        wall = time.monotonic() - started
        net = load_student(out_dir / "best.ckpt")
        return evaluate_split(net, samples["test"]).mean, wall

    baseline_cfg = TrainConfig(**{**BENCH_CONFIG.__dict__,
                                  "warmup_iters": BENCH_CONFIG.total_iters})
    baseline_dice, baseline_wall = train_and_score(baseline_cfg, root / "baseline")
    full_dice, full_wall = train_and_score(BENCH_CONFIG, root / "full")

    assert baseline_wall < 1800, f"baseline run took {baseline_wall:.0f}s"
    assert full_wall < 1800, f"full run took {full_wall:.0f}s"
    margin = 100.0 * (full_dice - baseline_dice)
    assert margin >= MARGIN_POINTS, (
        f"full {full_dice:.4f} vs scribble-only {baseline_dice:.4f}: margin "
        f"{margin:.1f} Dice points < {MARGIN_POINTS}")
    print(f"\n[criterion 7] PASS — full method {100 * full_dice:.1f} vs scribble-only "
          f"{100 * baseline_dice:.1f} mean Dice (+{margin:.1f} points; "
          f"runs {baseline_wall:.0f}s / {full_wall:.0f}s)")


# --------------------------------------------------------------------------- #
# criterion 8: ablation harness
# --------------------------------------------------------------------------- #
def test_c8_ablation_harness(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    data = root / "data"
    spec = DatasetSpec(num_classes=4, image_size=32, n_train=12, n_val=4,
                       n_test=6, seed=8)
    save_dataset(data, generate_dataset(spec), spec)
    config = TrainConfig(total_iters=30, warmup_iters=10, batch_size=4,
                         eval_every=10, seed=8)
    grid = run_ablation(config, data, root / "grid")

    assert len(grid.results) == 7
    assert tuple(res.row for res in grid.results) == ABLATION_ROWS
    for res in grid.results:
        assert res.report.per_class, f"row {res.row.label()} has no dice entries"
        assert np.isfinite(res.report.mean), f"row {res.row.label()} mean not finite"
    assert grid.dataset_hash == dataset_fingerprint(data)
    assert (root / "grid" / "ablation.csv").exists()
    assert (root / "grid" / "ablation.md").exists()
    table = (root / "grid" / "ablation.md").read_text()
    assert table.count("\n| ") >= 7
    print("\n[criterion 8] PASS — ablation harness produced the seven component "
          "rows with populated Dice columns and a passing fairness hash")
