"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

The desk pipeline runs twice through the CLI with seed 7; the first run feeds
the accuracy, ordering and ramp criteria, the pair feeds the determinism check.
"""
import csv
import io
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from trackid.checkpoint import encode, load_checkpoint
from trackid.cli import main
from trackid.config import RunConfig
from trackid.data import load_dataset, save_dataset
from trackid.errors import FormatError, TrackidError
from trackid.fusion import fuse, fuse_geomean, fuse_logsum, fuse_mean, fuse_product, fuse_topn, RULES
from trackid.training import train_end_to_end

HERE = os.path.dirname(__file__)
STAGES = ("generate", "pretrain", "finetune", "train", "train-fusion", "eval")
# wall-clock logs and rendered images are not part of the determinism contract
NONDETERMINISTIC = ("timing.log",)


def run_pipeline(out_dir) -> float:
    t = time.perf_counter()
    for stage in STAGES:
        code = main([stage, "--seed", "7", "--out", str(out_dir)], out=io.StringIO())
        assert code == 0, f"stage {stage} exited {code}"
    return time.perf_counter() - t


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_a")
    elapsed = run_pipeline(root)
    return root, elapsed


@pytest.fixture(scope="module")
def desk_again(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_b")
    run_pipeline(root)
    return root


def summary(root) -> dict[str, float]:
    with open(root / "reports" / "summary.csv") as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}


def report_bytes(root) -> dict[str, bytes]:
    out = {}
    for sub in ("reports", "checkpoints", "data"):
        for name in sorted(os.listdir(root / sub)):
            if name in NONDETERMINISTIC or name.endswith(".png"):
                continue
            out[f"{sub}/{name}"] = (root / sub / name).read_bytes()
    return out


# -- 1: gradient suite ------------------------------------------------------------

def test_criterion_1_gradient_suite(verdict):
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           os.path.join(HERE, "test_gradients.py")],
                          capture_output=True, text=True)
    elapsed = time.perf_counter() - t
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict("1", proc.returncode == 0 and elapsed < 120,
            f"finite-difference suite '{tail}' in {elapsed:.1f}s (budget 120s, rel err < 1e-3)")


# -- 2: fusion oracle suite -------------------------------------------------------

def random_stochastic(rng) -> np.ndarray:
    n, m = int(rng.integers(1, 33)), int(rng.integers(2, 82))
    S = rng.dirichlet(np.full(m, rng.choice([0.05, 0.3, 1.0, 5.0])), n)
    # floored so a 32-row product stays above float64 underflow
    S = np.maximum(S, 1e-9)
    return S / S.sum(axis=1, keepdims=True)


def test_criterion_2_fusion_oracles(verdict):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    failures = []
    for i in range(200):
        S = random_stochastic(rng)
        a = fuse_product(S).argmax()
        if not a == fuse_logsum(S).argmax() == fuse_geomean(S).argmax():
            failures.append((i, "argmax agreement"))
        perm = rng.permutation(len(S))
        for rule in RULES:
            if not np.array_equal(fuse(S, rule).scores, fuse(S[perm], rule).scores):
                failures.append((i, f"permutation {rule}"))
        if np.abs(fuse_topn(S, len(S)).scores - fuse_mean(S).scores).max() > 1e-12:
            failures.append((i, "topn(N) != mean"))
        row = S[:1]
        k = int(np.argmax(row[0]))
        if any(fuse(row, rule).argmax() != k for rule in RULES):
            failures.append((i, "N=1 degeneracy"))
    elapsed = time.perf_counter() - t
    verdict("2", not failures and elapsed < 10,
            f"200 matrices, {len(failures)} violations {failures[:3]}, {elapsed:.2f}s (budget 10s)")


# -- 3: freezing and transfer -----------------------------------------------------

def test_criterion_3_freezing_and_checkpoints(desk, verdict, tmp_path):
    root, _ = desk
    cfg = RunConfig.resolve(overrides={"out": str(root)})
    finetuned = load_checkpoint(root / "checkpoints" / "finetune.tidc")
    train = load_dataset(root / "data" / "train")
    ckpt, _ = train_end_to_end(train, finetuned, cfg.model_config(), cfg.stage_plan(), iters=100)
    base = {k: v for k, v in finetuned.params.items() if k.startswith("base.")}
    changed = [k for k, v in base.items() if ckpt.params[k].tobytes() != v.tobytes()]
    head = [k for k in ckpt.params if not k.startswith("base.")]

    stored = {}
    for stage in ("pretrain", "finetune", "sequence", "fusion"):
        path = root / "checkpoints" / f"{stage}.tidc"
        stored[stage] = encode(load_checkpoint(path)) == path.read_bytes()
    ok = bool(base) and bool(head) and not changed and all(stored.values())
    verdict("3", ok, f"{len(base)} frozen base tensors, {len(changed)} changed after 100 steps "
                     f"({len(head)} trainable head tensors); "
                     f"checkpoint round-trips byte-identical {stored}")


# -- 4: determinism -----------------------------------------------------------------

def test_criterion_4_determinism(desk, desk_again, verdict):
    a, b = report_bytes(desk[0]), report_bytes(desk_again)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differing and "reports/metrics.csv" in a and "reports/summary.csv" in a
    verdict("4", ok, f"{len(a)} files compared across two seed-7 runs, differing: {differing}")


# -- 5: desk-scale end-to-end -----------------------------------------------------

def test_criterion_5a_sequence_accuracy(desk, verdict):
    root, elapsed = desk
    s = summary(root)
    acc = s["resnet-lstm-mean_tracklet_accuracy"]
    verdict("5a", acc >= 0.85, f"ResNet+LSTM mean-fusion tracklet accuracy {acc:.2%} (>= 85%), "
                               f"pipeline {elapsed / 60:.1f} min (budget 30 min)")
    assert elapsed <= 30 * 60


def test_criterion_5b_tracklet_beats_frame(desk, verdict):
    s = summary(desk[0])
    pairs = {m: (s[f"{m}_tracklet_accuracy"], s[f"{m}_frame_accuracy"])
             for m in ("resnet-lstm-mean", "resnet10-frame-only")}
    ok = all(t >= f for t, f in pairs.values())
    verdict("5b", ok, "tracklet vs frame accuracy " +
            ", ".join(f"{m} {t:.2%} vs {f:.2%}" for m, (t, f) in pairs.items()))


def test_criterion_5c_sequence_beats_frame_only(desk, verdict):
    s = summary(desk[0])
    seq, frame = s["resnet-lstm-mean_tracklet_accuracy"], s["resnet10-frame-only_tracklet_accuracy"]
    verdict("5c", seq - frame >= 0.05, f"frame-only {frame:.2%} < ResNet+LSTM {seq:.2%}, "
                                       f"margin {100 * (seq - frame):.2f} points (>= 5)")


def test_criterion_5d_fusion_network(desk, verdict):
    s = summary(desk[0])
    cnn, mean = s["resnet-lstm-1dcnn_tracklet_accuracy"], s["resnet-lstm-mean_tracklet_accuracy"]
    c_cnn, c_mean, n = s["confusable_cnn_accuracy"], s["confusable_mean_accuracy"], s["confusable_n"]
    ok = cnn >= mean - 0.005 and n > 0 and c_cnn > c_mean
    verdict("5d", ok, f"test: 1D-CNN {cnn:.2%} vs mean {mean:.2%} (>= mean - 0.5); "
                      f"confusable stress subset (n={int(n)}): 1D-CNN {c_cnn:.2%} vs mean {c_mean:.2%}")


# -- 6: confidence ramp ---------------------------------------------------------------

def test_criterion_6_confidence_ramp(desk, verdict):
    s = summary(desk[0])
    early, late = s["ramp_early"], s["ramp_late"]
    verdict("6", late > early, f"mean confidence positions 12-15 {late:.4f} > positions 0-3 {early:.4f}")


# -- 7: data and format suite -------------------------------------------------------

def categorized(fn) -> str:
    try:
        fn()
    except FormatError:
        return "FormatError"
    except TrackidError as e:
        return type(e).__name__
    except Exception as e:  # an uncategorized failure is a crash
        return f"crash {type(e).__name__}"
    return "accepted"


def test_criterion_7_formats(desk, verdict, tmp_path):
    root, _ = desk
    results = {}

    store = load_dataset(root / "data" / "test")
    save_dataset(store, tmp_path / "copy")
    results["dataset round-trip"] = (
        (tmp_path / "copy.trkb").read_bytes() == (root / "data" / "test.trkb").read_bytes()
        and (tmp_path / "copy.manifest").read_text().splitlines()[2:]
        == (root / "data" / "test.manifest").read_text().splitlines()[2:])
    ck_path = root / "checkpoints" / "sequence.tidc"
    results["checkpoint round-trip"] = encode(load_checkpoint(ck_path)) == ck_path.read_bytes()

    blob = (root / "data" / "test.trkb").read_bytes()
    manifest = (root / "data" / "test.manifest").read_text()
    ck = ck_path.read_bytes()

    def dataset_with(payload):
        (tmp_path / "bad.manifest").write_text(manifest.replace("test.trkb", "bad.trkb"))
        (tmp_path / "bad.trkb").write_bytes(payload)
        return lambda: load_dataset(tmp_path / "bad")

    def checkpoint_with(payload):
        (tmp_path / "bad.tidc").write_bytes(payload)
        return lambda: load_checkpoint(tmp_path / "bad.tidc")

    outcomes = {
        "dataset bad magic": categorized(dataset_with(b"XXXX" + blob[4:])),
        "dataset truncated": categorized(dataset_with(blob[:len(blob) // 2])),
        "checkpoint bad magic": categorized(checkpoint_with(b"XXXX" + ck[4:])),
        "checkpoint truncated": categorized(checkpoint_with(ck[:len(ck) // 2])),
    }
    rng = np.random.default_rng(7)
    for i in range(20):
        cut = int(rng.integers(0, len(ck)))
        outcomes[f"checkpoint cut {i}"] = categorized(checkpoint_with(ck[:cut]))
    ok = all(results.values()) and all(v == "FormatError" for v in outcomes.values())
    bad = {k: v for k, v in outcomes.items() if v != "FormatError"}
    verdict("7", ok, f"{results}, {len(outcomes)} corrupted inputs all FormatError, exceptions: {bad}")

