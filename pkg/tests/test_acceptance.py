"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py`` (lines go to stdout).
Criterion 9 needs externally supplied data and is skipped otherwise.
"""
from __future__ import annotations

import csv
import itertools
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _tables import MAIN_STAGE, REFINEMENT_STAGE, trace_standard_model  # noqa: E402
from dpdnet.cli import _load_inputs, run  # noqa: E402
from dpdnet.confmap import TargetSpec, extract_peaks, render_target  # noqa: E402
from dpdnet.data import rescale_labels, read_manifest  # noqa: E402
from dpdnet.evaluation import CountTally, benchmark_fps, compute_metrics, f1_from_rates  # noqa: E402
from dpdnet.layers import (  # noqa: E402
    BatchNorm, Concatenate, Conv2D, Conv2DTranspose, Cropping2D, MaxPool2D, ReLU,
    SeparableConv2D, Sigmoid, UpSampling2D, ZeroPadding2D,
)
from dpdnet.model import (  # noqa: E402
    STANDARD, DPDNet, ResidualBlockSpec, build_decoding_block, build_encoding_block, load_checkpoint,
)
from dpdnet.synth import SceneConfig, generate_scene  # noqa: E402
from dpdnet.tensor import Tensor, grad_check, precision, set_deterministic  # noqa: E402
from dpdnet.training import predict_maps, render_targets  # noqa: E402

RESULTS: list[str] = []

# pinned thresholds
SHAPE_SECONDS = 60
LAYER_GRAD_TOL, BLOCK_GRAD_TOL, GRAD_SECONDS = 1e-5, 1e-4, 300
OVERFIT_LOSS_RATIO, OVERFIT_F1, OVERFIT_SECONDS = 0.10, 95.0, 1800
PAPER_F1, PAPER_F1_TOL = 99.87, 0.005
ROUNDTRIP_SEEDS, ROUNDTRIP_SECONDS = 100, 60
FPS_SPREAD = 0.20

# desk-scale overfit recipe
OVERFIT_FRAMES, OVERFIT_SEED, TRAIN_SEED = 32, 7, 1
OVERFIT_ARGS = ["--variant", "fast", "--filter-scale", "0.25", "--epochs", "50", "--batch", "4",
                "--seed", str(TRAIN_SEED), "--deterministic"]
MATCH_RADIUS = 2 * STANDARD.sigma          # 2 sigma in native 212x256 pixels


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] AC{number} {title}: {detail}"
    RESULTS.append(line)
    print(line)


# ----------------------------------------------------------------------------- shared pipeline

def _pipeline(root: Path) -> dict:
    """synth -> train -> infer -> eval through the command line."""
    data, model, det, ev = (root / n for n in ("data", "model", "infer", "eval"))
    start = time.perf_counter()
    codes = [
        run(["synth", "--frames", str(OVERFIT_FRAMES), "--people", "1..4", "--seed", str(OVERFIT_SEED),
             "--out", str(data)]),
        run(["train", "--manifest", str(data / "manifest.jsonl"), *OVERFIT_ARGS, "--out", str(model)]),
        run(["infer", "--manifest", str(data / "manifest.jsonl"), "--checkpoint", str(model / "model.dpdn"),
             "--seed", str(TRAIN_SEED), "--deterministic", "--out", str(det)]),
        run(["eval", "--manifest", str(data / "manifest.jsonl"), "--detections", str(det / "detections.csv"),
             "--match-radius", str(MATCH_RADIUS), "--seed", str(TRAIN_SEED), "--deterministic", "--out", str(ev)]),
    ]
    return {"codes": codes, "seconds": time.perf_counter() - start, "data": data, "model": model,
            "infer": det, "eval": ev}


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("overfit"))


@pytest.fixture(scope="module")
def overfit_rerun(tmp_path_factory, overfit_run):
    return _pipeline(tmp_path_factory.mktemp("overfit_again"))


# ----------------------------------------------------------------------------- criteria

def test_ac1_shape_chain_fidelity():
    start = time.perf_counter()
    trace, main, refined = trace_standard_model(DPDNet(STANDARD, 1.0, seed=0).eval())
    seconds = time.perf_counter() - start
    wrong = [f"{n}={trace.get(n, (None,))[1:]}!={hwc}" for n, hwc in MAIN_STAGE + REFINEMENT_STAGE
             if trace.get(n, (None,))[1:] != hwc]
    ok = not wrong and main == refined == (1, 212, 256, 1) and seconds < SHAPE_SECONDS
    rows = len(MAIN_STAGE) + len(REFINEMENT_STAGE)
    report(1, "shape-chain fidelity", ok,
           f"{rows - len(wrong)}/{rows} table rows match, outputs {main} and {refined}, {seconds:.1f}s"
           + (f"; mismatches {wrong}" if wrong else ""))
    assert ok


def _layer_cases(rng):
    return {
        "Conv2D": (Conv2D(3, 2, 3, 1, rng), (1, 4, 4, 3)),
        "Conv2D/s2": (Conv2D(3, 2, 3, 2, rng), (1, 4, 4, 3)),
        "SeparableConv2D": (SeparableConv2D(3, 2, 3, 1, rng), (1, 4, 4, 3)),
        "Conv2DTranspose": (Conv2DTranspose(3, 2, 3, 2, rng), (1, 2, 2, 3)),
        "BatchNorm": (BatchNorm(3), (2, 4, 4, 3)),
        "ReLU": (ReLU(), (1, 4, 4, 3)),
        "Sigmoid": (Sigmoid(), (1, 4, 4, 3)),
        "MaxPool2D": (MaxPool2D(2), (1, 4, 4, 3)),
        "UpSampling2D": (UpSampling2D(2), (1, 2, 2, 3)),
        "Cropping2D": (Cropping2D(((1, 0), (0, 1))), (1, 4, 4, 3)),
        "ZeroPadding2D": (ZeroPadding2D((1, 1)), (1, 3, 3, 3)),
    }


def test_ac2_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    layer_err = {name: grad_check(layer, shape, seed=1) for name, (layer, shape) in _layer_cases(rng).items()}
    with precision("float64"):
        other = Tensor(rng.standard_normal((1, 4, 4, 1)))
    cat = Concatenate()
    layer_err["Concatenate"] = grad_check(lambda x: cat(x, other), (1, 4, 4, 2), seed=1)
    block_err = {}
    for direction, flavor, stride in [("encoding", "standard", 1), ("encoding", "standard", 2),
                                      ("decoding", "standard", 2), ("decoding", "separable", 2),
                                      ("decoding", "separable", 1)]:
        spec = ResidualBlockSpec((2, 2, 3), 3, stride, direction, flavor)
        build = build_encoding_block if direction == "encoding" else build_decoding_block
        shape = (2, 4, 4, 3) if direction == "encoding" else (2, 2, 2, 3)
        block_err[f"{direction}/{flavor}/s{stride}"] = grad_check(build(3, spec, rng), shape, seed=1)
    seconds = time.perf_counter() - start
    worst_layer = max(layer_err.values())
    worst_block = max(block_err.values())
    ok = worst_layer < LAYER_GRAD_TOL and worst_block < BLOCK_GRAD_TOL and seconds < GRAD_SECONDS
    report(2, "gradient correctness", ok,
           f"{len(layer_err)} layer kinds max rel err {worst_layer:.2e} (< {LAYER_GRAD_TOL:g}), "
           f"{len(block_err)} composed blocks max {worst_block:.2e} (< {BLOCK_GRAD_TOL:g}), {seconds:.1f}s")
    assert ok


def _totals(metrics_csv: Path) -> dict:
    return {r["condition"]: r for r in csv.DictReader(open(metrics_csv))}["Totals"]


def test_ac3_desk_scale_overfit(overfit_run):
    r = overfit_run
    losses = [float(row["train_loss"]) for row in csv.DictReader(open(r["model"] / "train_log.csv"))]
    totals = _totals(r["eval"] / "metrics.csv")
    f1 = float(totals["F1"])
    ratio = losses[-1] / losses[0]
    ok = (r["codes"] == [0, 0, 0, 0] and len(losses) <= 50 and ratio < OVERFIT_LOSS_RATIO
          and f1 >= OVERFIT_F1 and r["seconds"] < OVERFIT_SECONDS)
    report(3, "desk-scale overfit", ok,
           f"loss {losses[0]:.1f} -> {losses[-1]:.1f} (ratio {ratio:.4f} < {OVERFIT_LOSS_RATIO}), "
           f"F1 {f1:.2f}% (>= {OVERFIT_F1}) at radius {MATCH_RADIUS:g}, "
           f"TP/FP/FN {totals['TP']}/{totals['FP']}/{totals['FN']}, {r['seconds']:.0f}s")
    assert ok


def test_ac4_refinement_benefit(overfit_run):
    manifest = read_manifest(overfit_run["data"] / "manifest.jsonl")
    model = load_checkpoint(overfit_run["model"] / "model.dpdn")
    size = model.variant.input_size
    inputs = _load_inputs(manifest, size)
    labels = [rescale_labels(rec.heads, manifest.native_size, size) for rec in manifest.records]
    targets = render_targets(labels, size, model.variant.sigma)
    main, refined = predict_maps(model, inputs)
    n = len(inputs)
    mse_main = float(((main.astype(np.float64) - targets) ** 2).reshape(n, -1).sum(axis=1).mean())
    mse_ref = float(((refined.astype(np.float64) - targets) ** 2).reshape(n, -1).sum(axis=1).mean())
    ok = mse_ref <= mse_main
    report(4, "refinement benefit", ok, f"refined MSE {mse_ref:.3f} <= main MSE {mse_main:.3f} (lambda=1)")
    assert ok


def test_ac5_metrics_oracle_equivalence(overfit_run):
    mismatches = 0
    for tp, fp, fn in itertools.product(range(51), repeat=3):
        m = compute_metrics(CountTally(tp, fp, fn))
        n_det, n_gt = tp + fp, tp + fn
        want = {
            "precision": Fraction(100 * tp, n_det) if n_det else None,
            "recall": Fraction(100 * tp, n_gt) if n_gt else None,
            "fnr": Fraction(100 * fn, n_gt) if n_gt else None,
            "fpr": Fraction(100 * fp, n_gt) if n_gt else None,
            "f1": Fraction(200 * tp, 2 * tp + fp + fn) if n_det and n_gt else None,
        }
        for key, value in want.items():
            got = getattr(m, key)
            if (value is None) != (got is None) or (value is not None and got != float(value)):
                mismatches += 1
        if (m.err is None) != (n_gt == 0) or (m.err is not None and m.err != m.fnr + m.fpr):
            mismatches += 1
    identity_rows = 0
    for row in csv.DictReader(open(overfit_run["eval"] / "metrics.csv")):
        if row["ERR"] != "NA":
            identity_rows += 1
            mismatches += float(row["ERR"]) != float(row["FNR"]) + float(row["FPR"])
    f1 = f1_from_rates(99.99, 99.75)
    ok = mismatches == 0 and abs(f1 - PAPER_F1) <= PAPER_F1_TOL
    report(5, "metrics oracle equivalence", ok,
           f"{51 ** 3} tallies, {mismatches} mismatches; ERR=FNR+FPR on {identity_rows} emitted rows; "
           f"F1(99.99, 99.75) = {f1:.4f}")
    assert ok


def test_ac6_confidence_map_round_trip():
    start = time.perf_counter()
    sigma = STANDARD.sigma
    failures = []
    for seed in range(ROUNDTRIP_SEEDS):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 11))
        pts: list[tuple[float, float]] = []
        while len(pts) < k:
            p = (float(rng.uniform(0, 211)), float(rng.uniform(0, 255)))
            if all(np.hypot(p[0] - a, p[1] - b) >= 4 * sigma for a, b in pts):
                pts.append(p)
        m = render_target(pts, TargetSpec(sigma), 212, 256)
        peaks = extract_peaks(m, 0.5, 3, 2 * sigma)[:, :2]
        found = all(len(peaks) and np.hypot(*(peaks - p).T).min() <= 1.0 for p in pts)
        if not found or len(peaks) != k:
            failures.append(seed)
    seconds = time.perf_counter() - start
    ok = not failures and seconds < ROUNDTRIP_SECONDS
    report(6, "confidence-map round trip", ok,
           f"{ROUNDTRIP_SEEDS - len(failures)}/{ROUNDTRIP_SEEDS} seeds recover all K<=10 centres within 1 px "
           f"with no spurious peaks, {seconds:.1f}s" + (f"; failing seeds {failures[:10]}" if failures else ""))
    assert ok


def test_ac7_complexity_independence():
    from threadpoolctl import threadpool_limits

    from dpdnet.data import prepare_input
    from dpdnet.estimator import detect_frames

    model = DPDNet(STANDARD, 1.0, seed=0).eval()
    streams = {}
    for people in (1, 5):
        cfg = SceneConfig(people=(people, people))
        streams[people] = [generate_scene(cfg, 1000 * people + i)[0] for i in range(10)]

    def infer(frame):
        x = prepare_input(frame, STANDARD.input_size).depth[None, :, :, None]
        return detect_frames(model, x, frame.shape, batch_size=1)

    with threadpool_limits(limits=1):
        means = {p: benchmark_fps(infer, s, warmup=2).mean_seconds for p, s in streams.items()}
    spread = abs(means[1] - means[5]) / min(means.values())
    ok = spread < FPS_SPREAD
    report(7, "complexity independence", ok,
           f"mean frame time 1 person {means[1] * 1e3:.1f} ms, 5 people {means[5] * 1e3:.1f} ms, "
           f"difference {spread:.1%} (< {FPS_SPREAD:.0%})")
    assert ok


def _strip_seconds(train_log: Path) -> str:
    return "".join(line.rsplit(",", 1)[0] + "\n" for line in train_log.read_text().splitlines())


def test_ac8_determinism(overfit_run, overfit_rerun):
    a, b = overfit_run, overfit_rerun
    files = {
        "checkpoint": ("model", "model.dpdn"),
        "detections": ("infer", "detections.csv"),
        "metrics.csv": ("eval", "metrics.csv"),
        "metrics.txt": ("eval", "metrics.txt"),
        "manifest": ("data", "manifest.jsonl"),
    }
    same = {k: (a[d] / f).read_bytes() == (b[d] / f).read_bytes() for k, (d, f) in files.items()}
    # wall-clock seconds are the only non-reproducible column of the training log
    same["train_log losses"] = _strip_seconds(a["model"] / "train_log.csv") == \
        _strip_seconds(b["model"] / "train_log.csv")
    ok = all(same.values()) and b["codes"] == [0, 0, 0, 0]
    report(8, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok


def test_ac9_external_dataset_tables(tmp_path):
    """Optional: set DPDNET_EXTERNAL_MANIFEST (and DPDNET_EXTERNAL_CHECKPOINT) to run."""
    manifest = os.environ.get("DPDNET_EXTERNAL_MANIFEST")
    checkpoint = os.environ.get("DPDNET_EXTERNAL_CHECKPOINT")
    if not manifest or not checkpoint:
        RESULTS.append("[SKIP] AC9 external dataset tables: no external manifest supplied (not gating)")
        pytest.skip("no external manifest/checkpoint supplied")
    code = run(["eval", "--manifest", manifest, "--checkpoint", checkpoint, "--out", str(tmp_path)])
    text = (tmp_path / "metrics.txt").read_text() if code == 0 else ""
    ok = code == 0 and "Totals" in text
    report(9, "external dataset tables (not gating)", ok, f"eval exit code {code}")
    assert ok


if __name__ == "__main__":
    set_deterministic(False)
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
