"""Accuracy metrics, confusion matrices, per-frame traces and method comparisons."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClassScheme, Store
from .errors import ConfigError
from .fusion import fuse, fuse_mean, fusion_probs, write_score_csv
from .models import score_tracklet, window_bounds

# a fused vector counts as confusable when no class holds half the mass and
# a runner-up holds a meaningful share
CONFUSABLE_TOP = 0.5
CONFUSABLE_SECOND = 0.15


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    classes: tuple[int, ...]

    @classmethod
    def build(cls, truth: Sequence[int], pred: Sequence[int], classes: Sequence[int]) -> "ConfusionMatrix":
        M = len(classes)
        counts = np.zeros((M, M), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, int), np.asarray(pred, int)), 1)
        return cls(counts, tuple(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def write_csv(self, path):
        """Header row and column carry raw labels; rows are ground truth."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth\\pred"] + [str(c) for c in self.classes])
            for c, row in zip(self.classes, self.counts):
                w.writerow([str(c)] + [str(int(v)) for v in row])


@dataclass
class EvalResult:
    method: str
    tracklet_accuracy: float
    frame_accuracy: float
    tracklet_cm: ConfusionMatrix
    frame_cm: ConfusionMatrix
    predictions: np.ndarray
    n: int
    test_set: str = ""


def score_store(net, store: Store) -> list[np.ndarray]:
    return [score_tracklet(net, r.frames) for r in store.records]


def evaluate_scores(scores: Sequence[np.ndarray], store: Store, method: str = "mean",
                    topn: int = 5, fusion_net=None, test_set: str = "",
                    name: str | None = None) -> EvalResult:
    """Tracklet and per-frame accuracy from precomputed score matrices.

    ``method`` is a fusion rule name, or ``"cnn"`` for the fusion network on
    mean-rule vectors; ``name`` labels the result (defaults to ``method``).
    Every frame is judged against its tracklet's label.
    """
    labels = store.labels()
    classes = store.classes
    if scores and scores[0].shape[1] != len(classes):
        raise ConfigError(
            f"model emits {scores[0].shape[1]} classes but the dataset has {len(classes)}")
    if method == "cnn":
        if fusion_net is None:
            raise ConfigError("method 'cnn' needs a fusion network")
        F = np.stack([fuse_mean(S).scores for S in scores])
        preds = fusion_probs(fusion_net, F).argmax(axis=1)
    else:
        preds = np.array([fuse(S, method, topn).argmax() for S in scores], dtype=np.int64)
    frame_truth = np.concatenate([np.full(len(S), l) for S, l in zip(scores, labels)])
    frame_pred = np.concatenate([S.argmax(axis=1) for S in scores])
    tcm = ConfusionMatrix.build(labels, preds, classes)
    fcm = ConfusionMatrix.build(frame_truth, frame_pred, classes)
    return EvalResult(name or method, tcm.accuracy(), fcm.accuracy(), tcm, fcm, preds, len(labels), test_set)


def evaluate(net, store: Store, method: str = "mean", topn: int = 5, fusion_net=None) -> EvalResult:
    """Score every tracklet with ``net`` and evaluate (inference mode, no side effects)."""
    if net.cfg.num_classes != len(store.classes):
        raise ConfigError("class scheme mismatch between model and dataset")
    return evaluate_scores(score_store(net, store), store, method, topn, fusion_net)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    frame: int
    predicted: int
    confidence: float
    window: int
    position: int


def trace_scores(S: np.ndarray, scheme: ClassScheme | None = None, window: int = 16) -> list[TraceRecord]:
    out = []
    for w, (s, e) in enumerate(window_bounds(len(S), window)):
        for t in range(s, e):
            k = int(S[t].argmax())
            out.append(TraceRecord(t, scheme.raw(k) if scheme else k, float(S[t, k]), w, t - s))
    return out


def trace_tracklet(net, frames, scheme: ClassScheme | None = None) -> tuple[list[TraceRecord], np.ndarray]:
    S = score_tracklet(net, frames)
    return trace_scores(S, scheme, net.cfg.window), S


def write_trace_csv(records: Sequence[TraceRecord], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "predicted", "confidence", "window", "position"])
        for r in records:
            w.writerow([r.frame, r.predicted, f"{r.confidence:.8g}", r.window, r.position])


def export_trace(net, frames, scheme: ClassScheme, stem) -> list[TraceRecord]:
    """Write ``<stem>.trace.csv`` and its ``<stem>.scores.csv`` companion."""
    records, S = trace_tracklet(net, frames, scheme)
    write_trace_csv(records, f"{stem}.trace.csv")
    write_score_csv(S, scheme.raw_labels, f"{stem}.scores.csv")
    return records


def ramp_profile(scores: Sequence[np.ndarray], window: int = 16) -> np.ndarray:
    """Mean top-class confidence at each within-window position."""
    total = np.zeros(window)
    count = np.zeros(window)
    for S in scores:
        for s, e in window_bounds(len(S), window):
            total[:e - s] += S[s:e].max(axis=1)
            count[:e - s] += 1
    return total / np.maximum(count, 1)


# ---------------------------------------------------------------------------
# confusable stress subset
# ---------------------------------------------------------------------------

def confusable_mask(fused: np.ndarray, top: float = CONFUSABLE_TOP,
                    second: float = CONFUSABLE_SECOND) -> np.ndarray:
    """Rows whose fused scores split mass: best < ``top`` and runner-up >= ``second``."""
    s = -np.sort(-np.asarray(fused), axis=1)
    return (s[:, 0] < top) & (s[:, 1] >= second)


# ---------------------------------------------------------------------------
# comparison report
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    method: str
    accuracy: float
    n: int


def compare_report(results: Sequence[EvalResult | ComparisonRow]) -> list[ComparisonRow]:
    """Rank methods by accuracy, descending; equal accuracies order by name."""
    if len(results) < 2:
        raise ConfigError("a comparison needs at least two methods")
    sets = {getattr(r, "test_set", "") for r in results}
    sizes = {r.n for r in results}
    if len(sets) > 1 or len(sizes) > 1:
        raise ConfigError("methods were evaluated on different test sets")
    rows = [ComparisonRow(r.method, r.accuracy if isinstance(r, ComparisonRow) else r.tracklet_accuracy, r.n)
            for r in results]
    return sorted(rows, key=lambda r: (-r.accuracy, r.method))


def write_comparison(rows: Sequence[ComparisonRow], csv_path, txt_path=None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "method", "accuracy", "n"])
        for i, r in enumerate(rows, 1):
            w.writerow([i, r.method, f"{r.accuracy:.6f}", r.n])
    if txt_path:
        with open(txt_path, "w") as fh:
            fh.write(format_comparison(rows) + "\n")


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    width = max(len("method"), *(len(r.method) for r in rows))
    lines = [f"{'method':<{width}}  accuracy", f"{'-' * width}  --------"]
    lines += [f"{r.method:<{width}}  {100 * r.accuracy:7.2f}%" for r in rows]
    return "\n".join(lines)
