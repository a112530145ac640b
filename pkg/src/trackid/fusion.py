"""Late score-level fusion of a tracklet's per-frame confidence scores."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

EPS = 1e-12
RULES = ("mean", "median", "product", "logsum", "geomean", "topn")


@dataclass(frozen=True)
class FusedScore:
    scores: np.ndarray
    rule: str

    def argmax(self) -> int:
        return argmax_lowest(self.scores)


def argmax_lowest(v: np.ndarray) -> int:
    # np.argmax already returns the first maximum, i.e. the lowest class index
    return int(np.argmax(v))


def check_score_matrix(S, atol: float = 1e-6) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] < 1:
        raise DimensionError(f"score matrix must be [N>=1, M], got {S.shape}", axis="N")
    if np.any(S < 0) or np.any(S > 1 + atol):
        raise ValueError("score entries must lie in [0, 1]")
    if not np.allclose(S.sum(axis=1), 1.0, atol=atol):
        raise ValueError("score rows must sum to 1")
    return S


def _canonical(S: np.ndarray) -> np.ndarray:
    # reducing over column-sorted values makes every rule bit-exactly
    # invariant to the order of the frames
    return np.sort(S, axis=0)


def fuse_mean(S) -> FusedScore:
    S = check_score_matrix(S)
    return FusedScore(_canonical(S).mean(axis=0), "mean")


def fuse_median(S) -> FusedScore:
    S = check_score_matrix(S)
    return FusedScore(np.median(S, axis=0), "median")


def fuse_product(S) -> FusedScore:
    """Per-class product of floored scores; underflows for long tracklets, so
    only its argmax is meaningful."""
    S = check_score_matrix(S)
    return FusedScore(np.prod(_canonical(S) + EPS, axis=0), "product")


def fuse_logsum(S) -> FusedScore:
    S = check_score_matrix(S)
    return FusedScore(np.log(_canonical(S) + EPS).sum(axis=0), "logsum")


def fuse_geomean(S) -> FusedScore:
    # exp(mean log) equals prod**(1/N) without underflow
    S = check_score_matrix(S)
    return FusedScore(np.exp(np.log(_canonical(S) + EPS).mean(axis=0)), "geomean")


def fuse_topn(S, n: int) -> FusedScore:
    S = check_score_matrix(S)
    N = S.shape[0]
    if not 1 <= n <= N:
        raise ValueError(f"top-n needs 1 <= n <= {N}, got {n}")
    top = -np.sort(-S, axis=0)[:n]
    return FusedScore(top.mean(axis=0), "topn")


def fuse(S, rule: str = "mean", topn: int = 5) -> FusedScore:
    if rule == "topn":
        return fuse_topn(S, min(topn, np.asarray(S).shape[0]))
    try:
        fn: Callable = {"mean": fuse_mean, "median": fuse_median, "product": fuse_product,
                        "logsum": fuse_logsum, "geomean": fuse_geomean}[rule]
    except KeyError:
        raise ValueError(f"unknown fusion rule {rule!r}; choose from {RULES}") from None
    return fn(S)


def fusion_probs(net, fused: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Softmax output of the fusion network for a batch of mean-rule vectors."""
    x = np.atleast_2d(np.asarray(fused, dtype=np.float32))
    if x.shape[1] != net.num_classes:
        raise DimensionError(
            f"fused vector has {x.shape[1]} classes, fusion net expects {net.num_classes}", axis="M")
    was = net.training
    net.eval()
    try:
        with ad.no_grad():
            return ad.softmax(net(Tensor(x))).data
    finally:
        net.train(was)


def classify_fused(fused: FusedScore | np.ndarray, net) -> int:
    if isinstance(fused, FusedScore):
        if fused.rule != "mean":
            raise ValueError("the fusion classifier consumes mean-rule scores only")
        fused = fused.scores
    return argmax_lowest(fusion_probs(net, fused)[0])


def predict_tracklet(net, tracklet, fusion_net=None, rule: str = "mean",
                     topn: int = 5) -> tuple[int, float]:
    """Score, fuse and decide.  Returns ``(class index, confidence)``.

    With ``fusion_net`` the mean-rule vector is classified by the 1-D CNN and
    the confidence is its softmax output; otherwise the fused vector's argmax.
    """
    from .models import score_tracklet

    S = score_tracklet(net, tracklet)
    if fusion_net is not None:
        probs = fusion_probs(fusion_net, fuse_mean(S).scores)[0]
        k = argmax_lowest(probs)
        return k, float(probs[k])
    fused = fuse(S, rule, topn)
    k = fused.argmax()
    return k, float(fused.scores[k])


def write_score_csv(S: np.ndarray, labels: Sequence[int], path: str | os.PathLike):
    """One row per frame, header row of raw class labels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([str(l) for l in labels])
        for row in np.asarray(S):
            w.writerow([f"{v:.8g}" for v in row])


def read_score_csv(path: str | os.PathLike) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = [int(x) for x in rows[0]]
    return labels, np.array([[float(v) for v in r] for r in rows[1:]])
