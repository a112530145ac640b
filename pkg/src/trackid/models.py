"""Network assembly: the ResNet-10 frame classifier, ResNet+LSTM sequence
model and the 1-D CNN fusion classifier, plus tracklet scoring, weight
transfer and freezing."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Prng, Tensor
from .checkpoint import Checkpoint
from .errors import ConfigError, DimensionError
from .imaging import augment_crop
from .layers import (BatchNorm, Conv1d, Conv2d, Linear, LSTM, Module, ResidualStack)


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 224
    input_w: int = 224
    precrop_h: int = 240
    precrop_w: int = 320
    stage_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    width_factor: float = 1.0
    num_classes: int = 81
    lstm_hidden: int = 256
    window: int = 16
    dropout: float = 0.5

    def __post_init__(self):
        if self.width_factor <= 0:
            raise ConfigError(f"width_factor must be > 0, got {self.width_factor}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_h > self.precrop_h or self.input_w > self.precrop_w:
            raise ConfigError("input size must not exceed the pre-crop size")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_factor))) for w in self.stage_widths)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.lstm_hidden * self.width_factor)))

    def with_classes(self, m: int) -> "ModelConfig":
        return replace(self, num_classes=m)

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PAPER_MODEL = ModelConfig()
DESK_MODEL = ModelConfig(input_h=32, input_w=32, precrop_h=36, precrop_w=36,
                         width_factor=0.25, num_classes=12)


class ResNetBase(Module):
    """Input batchnorm, conv1 7×7/2, bn+relu, maxpool 3×3/2, four residual
    stacks and global average pooling.  Output: one feature vector per frame."""

    def __init__(self, cfg: ModelConfig, prng: Prng):
        super().__init__()
        w = cfg.widths
        self.input_bn = BatchNorm(3)
        self.conv1 = Conv2d(3, w[0], 7, stride=2, pad=3, prng=prng.split(0))
        self.bn1 = BatchNorm(w[0])
        self.stacks = [
            ResidualStack(w[0], w[0], 1, prng.split(1)),
            ResidualStack(w[0], w[1], 2, prng.split(2)),
            ResidualStack(w[1], w[2], 2, prng.split(3)),
            ResidualStack(w[2], w[3], 2, prng.split(4)),
        ]

    def forward(self, x: Tensor) -> Tensor:
        x = self.input_bn(x)
        x = ad.maxpool2d(ad.relu(self.bn1(self.conv1(x))), 3, 2)
        for stack in self.stacks:
            x = stack(x)
        return ad.global_avgpool(x)

    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


class ResNet10(Module):
    """Frame-only classifier: base -> linear -> logits."""

    kind = "resnet10"

    def __init__(self, cfg: ModelConfig, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.cfg = cfg
        self.base = ResNetBase(cfg, prng.split(0))
        self.classifier = Linear(cfg.feature_dim, cfg.num_classes, prng.split(1))

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.base(x))

    def features(self, x: Tensor) -> Tensor:
        return self.base(x)


class ResNetLSTM(Module):
    """Sequence model: base features per frame -> LSTM -> dropout -> linear.

    ``forward`` takes ``[B, T, C, H, W]`` and returns per-frame logits ``[B, T, M]``.
    """

    kind = "resnet_lstm"

    def __init__(self, cfg: ModelConfig, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.cfg = cfg
        self.base = ResNetBase(cfg, prng.split(0))
        self.lstm = LSTM(cfg.feature_dim, cfg.hidden, prng.split(1))
        self.fc = Linear(cfg.hidden, cfg.num_classes, prng.split(2))
        self.dropout_prng = prng.split(3)

    def encode(self, frames: Tensor) -> Tensor:
        if self.base.is_frozen() and not frames.requires_grad:
            with ad.no_grad():
                return self.base(frames)
        return self.base(frames)

    def forward(self, x: Tensor, prng: Prng | None = None) -> Tensor:
        if x.ndim != 5:
            raise DimensionError(f"ResNetLSTM expects [B,T,C,H,W], got {x.shape}", axis="rank")
        B, T = x.shape[:2]
        feats = self.encode(ad.reshape(x, (B * T,) + x.shape[2:]))
        h = self.lstm(ad.reshape(feats, (B, T, feats.shape[1])))
        h = ad.dropout(h, self.cfg.dropout, self.training, prng or self.dropout_prng)
        logits = self.fc(ad.reshape(h, (B * T, self.cfg.hidden)))
        return ad.reshape(logits, (B, T, self.cfg.num_classes))


class FusionCNN(Module):
    """1-D CNN over a length-M score vector with two residual sums.

    conv1(3,20) -> conv2_1(3,50) -> conv2_2(3,50) -> sum -> conv3_1(3,70)
    -> conv3_2(3,70) -> sum -> conv4(2,70) -> maxpool(2,2) -> fc 256 -> relu
    -> fc 256 -> relu -> fc M.  Convolutions carry no activation between them.
    """

    kind = "fusion_cnn"

    def __init__(self, num_classes: int = 81, prng: Prng | None = None):
        super().__init__()
        prng = prng or Prng(0)
        self.num_classes = M = num_classes
        self.conv1 = Conv1d(1, 20, 3, 1, prng.split(0))
        self.conv2_1 = Conv1d(20, 50, 3, 1, prng.split(1))
        self.conv2_2 = Conv1d(50, 50, 3, 1, prng.split(2))
        self.conv3_1 = Conv1d(50, 70, 3, 1, prng.split(3))
        self.conv3_2 = Conv1d(70, 70, 3, 1, prng.split(4))
        self.conv4 = Conv1d(70, 70, 2, 1, prng.split(5))
        self.conv4_len = self.conv4.out_length(M)
        self.pool_len = (self.conv4_len - 2) // 2 + 1
        self.flat_dim = 70 * self.pool_len
        self.fc1 = Linear(self.flat_dim, 256, prng.split(6))
        self.fc2 = Linear(256, 256, prng.split(7))
        self.fc3 = Linear(256, M, prng.split(8))

    def forward(self, x: Tensor) -> Tensor:
        """``x[N, M]`` score vectors -> logits ``[N, M]``."""
        if x.ndim != 2 or x.shape[1] != self.num_classes:
            raise DimensionError(
                f"fusion net expects [N, {self.num_classes}] input, got {x.shape}", axis="M")
        h = self.conv1(ad.reshape(x, (x.shape[0], 1, x.shape[1])))
        a = self.conv2_1(h)
        h = ad.eltwise_add(a, self.conv2_2(a))
        a = self.conv3_1(h)
        h = ad.eltwise_add(a, self.conv3_2(a))
        h = ad.maxpool1d(self.conv4(h), 2, 2)
        h = ad.relu(self.fc1(ad.reshape(h, (h.shape[0], self.flat_dim))))
        h = ad.relu(self.fc2(h))
        return self.fc3(h)


def build_resnet10(cfg: ModelConfig, prng: Prng | None = None) -> ResNet10:
    return ResNet10(cfg, prng)


def build_resnet_lstm(cfg: ModelConfig, prng: Prng | None = None) -> ResNetLSTM:
    return ResNetLSTM(cfg, prng)


def build_fusion_cnn(num_classes: int = 81, prng: Prng | None = None) -> FusionCNN:
    return FusionCNN(num_classes, prng)


# ---------------------------------------------------------------------------
# inference over tracklets
# ---------------------------------------------------------------------------

def preprocess(frames: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Eval-mode resize + centre crop of raw frames ``[..., C, H, W]``."""
    return augment_crop(np.asarray(frames, dtype=np.float32), (cfg.input_h, cfg.input_w),
                        (cfg.precrop_h, cfg.precrop_w), mode="eval")


def window_bounds(n: int, window: int = 16) -> list[tuple[int, int]]:
    """Consecutive non-overlapping ``[start, stop)`` windows; the last may be short."""
    if n < 1:
        raise DimensionError("tracklet must contain at least one frame", axis="N")
    return [(s, min(s + window, n)) for s in range(0, n, window)]


def score_tracklet(net: Module, frames: np.ndarray) -> np.ndarray:
    """Per-frame softmax scores ``[N, M]`` for one tracklet's raw frames.

    The sequence model sees consecutive windows with freshly zeroed LSTM
    state; the frame-only model scores every frame independently.
    """
    frames = getattr(frames, "frames", frames)
    frames = np.asarray(frames, dtype=np.float32)
    cfg = net.cfg
    was_training = net.training
    net.eval()
    rows = []
    try:
        with ad.no_grad():
            for s, e in window_bounds(len(frames), cfg.window):
                x = Tensor(preprocess(frames[s:e], cfg))
                if isinstance(net, ResNetLSTM):
                    logits = net(ad.reshape(x, (1,) + x.shape))
                    probs = ad.softmax(ad.reshape(logits, (e - s, cfg.num_classes)))
                else:
                    probs = ad.softmax(net(x))
                rows.append(probs.data)
    finally:
        net.train(was_training)
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# weight transfer and freezing
# ---------------------------------------------------------------------------

@dataclass
class TransferReport:
    copied: list[str] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"copied: {n}" for n in self.copied]
        out += [f"skipped: {n} ({why})" for n, why in self.skipped.items()]
        return out


def _named_state(net: Module):
    """``name -> (getter, setter)`` over parameters and buffers."""
    entries = {}
    for name, p in net.named_parameters():
        entries[name] = (p.data, lambda a, p=p: setattr(p, "data", a))
    stack = [("", net)]
    while stack:
        prefix, m = stack.pop()
        for k in m._buffers:
            entries[prefix + k] = (m._buffers[k], lambda a, m=m, k=k: m._buffers.__setitem__(k, a))
        for cname, child in m.children():
            stack.append((f"{prefix}{cname}.", child))
    return entries


def transfer_weights(source: Checkpoint, target: Module,
                     name_map: dict[str, str] | None = None) -> TransferReport:
    """Copy parameters (and normalization statistics) from ``source`` into ``target``.

    ``name_map`` rewrites target-name prefixes to source-name prefixes; when
    given, target names outside every mapped prefix are skipped.
    """
    report = TransferReport()
    for name, (current, setter) in _named_state(target).items():
        if name_map is None:
            src = name
        else:
            src = None
            for t_prefix, s_prefix in name_map.items():
                if name.startswith(t_prefix):
                    src = s_prefix + name[len(t_prefix):]
                    break
            if src is None:
                report.skipped[name] = "not mapped"
                continue
        if src not in source.params:
            report.skipped[name] = "not in source"
            continue
        arr = source.params[src]
        if arr.shape != current.shape:
            raise DimensionError(
                f"transfer shape mismatch for {name}: source {arr.shape} vs target {current.shape}",
                axis=name)
        setter(np.array(arr, dtype=current.dtype))
        report.copied.append(name)
    return report


def freeze(net: Module, mask: Iterable[str]) -> set[str]:
    """Exclude the named parameters from updates.

    Normalization layers whose affine parameters are all frozen also stop
    updating their running statistics.
    """
    mask = set(mask)
    params = dict(net.named_parameters())
    unknown = mask - set(params)
    if unknown:
        raise KeyError(f"cannot freeze unknown parameters: {sorted(unknown)[:3]}")
    for name in mask:
        params[name].requires_grad = False
        params[name].zero_grad()
    for prefix, m in _walk(net):
        if isinstance(m, BatchNorm):
            own = {f"{prefix}gamma", f"{prefix}beta"}
            if own <= mask:
                m.frozen = True
    net.frozen_names = set(getattr(net, "frozen_names", set())) | mask
    return mask


def base_mask(net: Module) -> set[str]:
    return {n for n, _ in net.named_parameters() if n.startswith("base.")}


def _walk(net: Module, prefix: str = ""):
    yield prefix, net
    for name, child in net.children():
        yield from _walk(child, f"{prefix}{name}.")
