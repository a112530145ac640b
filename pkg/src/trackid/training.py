"""SGD with momentum and a step-down schedule, window sampling, crop
augmentation, and the four training stages of the pipeline."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Prng, Tensor
from .checkpoint import Checkpoint, load_into
from .data import Store
from .errors import ConfigError, DimensionError, NumericError, PrerequisiteError
from .fusion import fuse_mean
from .imaging import augment_crop
from .layers import Module
from .models import (FusionCNN, ModelConfig, ResNet10, ResNetLSTM, base_mask, freeze,
                     score_tracklet, transfer_weights)

log = logging.getLogger(__name__)

STAGES = ("pretrain-digits", "finetune-frames", "end-to-end", "train-fusion")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr0: float = 0.005
    momentum: float = 0.9
    gamma: float = 0.1
    step_interval: int = 0  # 0 disables the step-down
    lr: float = field(init=False)
    step: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = self.lr0

    def lr_at(self, k: int) -> float:
        if self.step_interval <= 0:
            return self.lr0
        return self.lr0 * self.gamma ** (k // self.step_interval)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """``v <- momentum*v - lr*g``; ``p <- p + v``, in place; then advance the schedule."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name} {p.shape}", axis=name)
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= p.dtype.type(state.momentum)
        v -= p.dtype.type(state.lr) * g
        p += v
    state.step += 1
    state.lr = state.lr_at(state.step)


class SGD:
    """Binds an :class:`OptimizerState` to a network's trainable parameters."""

    def __init__(self, net: Module, state: OptimizerState):
        self.net = net
        self.state = state
        frozen = getattr(net, "frozen_names", set())
        self.params = [(n, p) for n, p in net.named_parameters()
                       if p.requires_grad and n not in frozen]

    def zero_grad(self):
        self.net.zero_grad()

    def step(self):
        sgd_step({n: p.data for n, p in self.params},
                 {n: p.grad for n, p in self.params}, self.state)


# ---------------------------------------------------------------------------
# sampling and augmentation
# ---------------------------------------------------------------------------

def sample_window(tracklet, window: int, prng: Prng) -> tuple[int, np.ndarray]:
    """Uniform random start in ``[0, N - window]``; returns ``(start, frames)``."""
    frames = getattr(tracklet, "frames", tracklet)
    n = len(frames)
    if n < window:
        raise DimensionError(f"tracklet of {n} frames is shorter than window {window}", axis="N")
    start = int(prng.integers(0, n - window + 1))
    return start, frames[start:start + window]


def crop_for(cfg: ModelConfig, frames: np.ndarray, prng: Prng | None, mode: str) -> np.ndarray:
    return augment_crop(frames, (cfg.input_h, cfg.input_w), (cfg.precrop_h, cfg.precrop_w), prng, mode)


# ---------------------------------------------------------------------------
# stage plan and metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StagePlan:
    seed: int = 7
    batch_size: int = 16
    lr: float = 0.005
    momentum: float = 0.9
    gamma: float = 0.1
    pretrain_iters: int = 600
    finetune_iters: int = 900
    e2e_iters: int = 600
    fusion_epochs: int = 120


@dataclass
class MetricsLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, step: int, stage: str, lr: float, loss: float, accuracy: float | None = None):
        self.rows.append((step, stage, lr, loss, accuracy))

    def extend(self, other: "MetricsLog"):
        self.rows.extend(other.rows)

    def write(self, path, append: bool = False):
        exists = append and os.path.exists(path)
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not exists:
                w.writerow(["step", "stage", "lr", "loss", "accuracy"])
            for step, stage, lr, loss, acc in self.rows:
                w.writerow([step, stage, f"{lr:.6g}", f"{loss:.6f}",
                            "" if acc is None else f"{acc:.6f}"])

    def last_accuracy(self, stage: str) -> float | None:
        accs = [r[4] for r in self.rows if r[1] == stage and r[4] is not None]
        return accs[-1] if accs else None


def _optimizer(net: Module, plan: StagePlan, iters: int) -> SGD:
    interval = max(1, iters // 3)
    return SGD(net, OptimizerState(plan.lr, plan.momentum, plan.gamma, interval))


def _train_loop(name: str, net: Module, iters: int, batches, plan: StagePlan,
                epoch_len: int) -> MetricsLog:
    """Shared loop: ``batches(step)`` yields ``(loss_tensor, n_correct, n_seen)``."""
    opt = _optimizer(net, plan, iters)
    metrics = MetricsLog()
    net.train()
    correct = seen = 0
    for step in range(iters):
        lr = opt.state.lr
        opt.zero_grad()
        loss, c, n = batches(step)
        if not math.isfinite(loss.item()):
            raise NumericError(f"{name}: loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        correct += c
        seen += n
        acc = None
        if (step + 1) % epoch_len == 0 or step + 1 == iters:
            acc = correct / max(seen, 1)
            correct = seen = 0
        metrics.add(step, name, lr, loss.item(), acc)
    net.eval()
    return metrics


def _epoch_order(n: int, prng: Prng, step: int, batch: int) -> np.ndarray:
    """Indices for ``step``: a fresh permutation per pass over the data."""
    per_epoch = max(1, n // batch)
    epoch, k = divmod(step, per_epoch)
    perm = prng.split(epoch).permutation(n)
    return perm[k * batch:(k + 1) * batch]


def _frame_classifier_stage(name: str, net: ResNet10, store: Store, labels: np.ndarray,
                            iters: int, plan: StagePlan, prng: Prng) -> MetricsLog:
    images = np.stack([r.frames[0] for r in store.records])
    cfg = net.cfg
    bs = min(plan.batch_size, len(images))

    def batches(step):
        idx = _epoch_order(len(images), prng.split(0), step, bs)
        x = np.stack([crop_for(cfg, images[i], prng.split(1, step, j), "train")
                      for j, i in enumerate(idx)])
        probs = ad.softmax(net(Tensor(x)))
        loss = ad.cross_entropy(probs, labels[idx])
        correct = int((probs.data.argmax(axis=1) == labels[idx]).sum())
        return loss, correct, len(idx)

    return _train_loop(name, net, iters, batches, plan, max(1, len(images) // bs))


def pretrain_digits(digits: Store, cfg: ModelConfig, plan: StagePlan) -> tuple[Checkpoint, MetricsLog]:
    """Train a 10-way frame classifier on single-digit crops."""
    prng = Prng(plan.seed).split(100)
    net = ResNet10(cfg.with_classes(10), prng.split(0))
    labels = np.array([r.label for r in digits.records], dtype=np.int64)
    metrics = _frame_classifier_stage("pretrain-digits", net, digits, labels,
                                      plan.pretrain_iters, plan, prng.split(1))
    return Checkpoint.from_network(net, {"kind": "resnet10", "classes": 10}), metrics


def finetune_frames(frames: Store, pretrained: Checkpoint, cfg: ModelConfig,
                    plan: StagePlan) -> tuple[Checkpoint, MetricsLog]:
    """Fine-tune every layer on single player frames with an M-way head."""
    if pretrained is None:
        raise PrerequisiteError("finetune-frames needs the pretrain-digits checkpoint",
                                stage="pretrain-digits")
    prng = Prng(plan.seed).split(200)
    net = ResNet10(cfg, prng.split(0))
    transfer_weights(pretrained, net, {"base.": "base."})
    labels = frames.labels()
    metrics = _frame_classifier_stage("finetune-frames", net, frames, labels,
                                      plan.finetune_iters, plan, prng.split(1))
    return Checkpoint.from_network(net, {"kind": "resnet10", "classes": cfg.num_classes}), metrics


def build_sequence_model(finetuned: Checkpoint, cfg: ModelConfig, prng: Prng) -> ResNetLSTM:
    net = ResNetLSTM(cfg, prng)
    report = transfer_weights(finetuned, net, {"base.": "base."})
    log.info("transfer: %d copied, %d skipped", len(report.copied), len(report.skipped))
    freeze(net, base_mask(net))
    return net


def train_end_to_end(train: Store, finetuned: Checkpoint, cfg: ModelConfig,
                     plan: StagePlan, iters: int | None = None,
                     net: ResNetLSTM | None = None) -> tuple[Checkpoint, MetricsLog]:
    """LSTM + head on random 16-frame windows; the ResNet base stays frozen."""
    if finetuned is None and net is None:
        raise PrerequisiteError("end-to-end training needs the finetune-frames checkpoint",
                                stage="finetune-frames")
    prng = Prng(plan.seed).split(300)
    if net is None:
        net = build_sequence_model(finetuned, cfg, prng.split(0))
    iters = plan.e2e_iters if iters is None else iters
    records = train.records
    labels = train.labels()
    bs = min(plan.batch_size, len(records))
    W = cfg.window
    sample_prng = prng.split(1)

    def batches(step):
        idx = _epoch_order(len(records), sample_prng.split(0), step, bs)
        wins = []
        for j, i in enumerate(idx):
            pr = sample_prng.split(1, step, j)
            _, frames = sample_window(records[i], W, pr.split(0))
            wins.append(crop_for(cfg, frames, pr.split(1), "train"))
        x = Tensor(np.stack(wins))
        logits = net(x, prng=prng.split(2, step))
        probs = ad.softmax(ad.reshape(logits, (len(idx) * W, cfg.num_classes)))
        y = np.repeat(labels[idx], W)
        loss = ad.cross_entropy(probs, y)
        correct = int((probs.data.argmax(axis=1) == y).sum())
        return loss, correct, len(y)

    metrics = _train_loop("end-to-end", net, iters, batches, plan, max(1, len(records) // bs))
    return Checkpoint.from_network(net, {"kind": "resnet_lstm", "classes": cfg.num_classes}), metrics


def fusion_training_set(seq_net: Module, store: Store) -> tuple[np.ndarray, np.ndarray]:
    """One mean-rule score vector per tracklet, paired with its class index."""
    X = np.stack([fuse_mean(score_tracklet(seq_net, r.frames)).scores for r in store.records])
    return X.astype(np.float32), store.labels()


def train_fusion(X: np.ndarray, y: np.ndarray, num_classes: int,
                 plan: StagePlan) -> tuple[Checkpoint, MetricsLog, FusionCNN]:
    prng = Prng(plan.seed).split(400)
    net = FusionCNN(num_classes, prng.split(0))
    bs = min(plan.batch_size, len(X))
    per_epoch = max(1, len(X) // bs)
    iters = plan.fusion_epochs * per_epoch

    def batches(step):
        idx = _epoch_order(len(X), prng.split(1), step, bs)
        probs = ad.softmax(net(Tensor(X[idx])))
        loss = ad.cross_entropy(probs, y[idx])
        return loss, int((probs.data.argmax(axis=1) == y[idx]).sum()), len(idx)

    metrics = _train_loop("train-fusion", net, iters, batches, plan, per_epoch)
    return Checkpoint.from_network(net, {"kind": "fusion_cnn", "classes": num_classes}), metrics, net


def load_network(ckpt: Checkpoint, cfg: ModelConfig) -> Module:
    kind = ckpt.config.get("kind")
    classes = int(ckpt.config.get("classes", cfg.num_classes))
    if kind == "resnet10":
        net = ResNet10(cfg.with_classes(classes))
    elif kind == "resnet_lstm":
        net = ResNetLSTM(cfg.with_classes(classes))
    elif kind == "fusion_cnn":
        net = FusionCNN(classes)
    else:
        raise ConfigError(f"checkpoint has unknown kind {kind!r}")
    load_into(net, ckpt)
    net.eval()
    return net
