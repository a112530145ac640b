"""Deterministic synthetic jersey-number tracklets.

Frames are rendered from a built-in 5×7 digit font onto a torso-like patch
over a rink-like background.  Each tracklet follows one player; whether the
number shows in a frame is driven by a two-state persistence chain, so
visible and hidden frames come in runs.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Prng
from .errors import ConfigError, FormatError

REFEREE = 0
UNKNOWN = 100

GLYPHS = {
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}
GLYPH_BITMAPS = {k: np.array([[c == "1" for c in row] for row in v]) for k, v in GLYPHS.items()}
GLYPH_W, GLYPH_H, GLYPH_GAP = 5, 7, 1

JERSEY_COLORS = np.array([
    [0.80, 0.10, 0.12], [0.10, 0.20, 0.60], [0.05, 0.05, 0.08], [0.95, 0.95, 0.95],
    [0.10, 0.45, 0.20], [0.95, 0.55, 0.05], [0.45, 0.10, 0.45], [0.95, 0.80, 0.10],
], dtype=np.float32)

VISIBLE, HIDDEN, PARTIAL = "v", "o", "p"


# ---------------------------------------------------------------------------
# class scheme
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassScheme:
    """Referee (raw 0), the jersey numbers, unknown (raw 100) -> indices 0..M-1."""

    numbers: tuple[int, ...]

    def __post_init__(self):
        nums = tuple(self.numbers)
        if len(set(nums)) != len(nums):
            raise ConfigError("jersey numbers must be distinct")
        for n in nums:
            if not 1 <= n <= 98:
                raise ConfigError(f"jersey number {n} outside 1..98 (99 is retired)")

    @property
    def raw_labels(self) -> tuple[int, ...]:
        return (REFEREE,) + tuple(self.numbers) + (UNKNOWN,)

    @property
    def num_classes(self) -> int:
        return len(self.numbers) + 2

    def index(self, raw: int) -> int:
        try:
            return self.raw_labels.index(int(raw))
        except ValueError:
            raise KeyError(f"raw label {raw} not in class scheme") from None

    def raw(self, index: int) -> int:
        return self.raw_labels[index]

    @classmethod
    def from_raw(cls, raw_labels: Sequence[int]) -> "ClassScheme":
        raw_labels = [int(r) for r in raw_labels]
        if raw_labels[0] != REFEREE or raw_labels[-1] != UNKNOWN:
            raise ConfigError("class list must start with referee (0) and end with unknown (100)")
        return cls(tuple(raw_labels[1:-1]))


DESK_NUMBERS = (3, 4, 5, 8, 14, 15, 27, 41, 45, 72)
PAPER_NUMBERS = tuple(range(1, 80))


# ---------------------------------------------------------------------------
# dataset specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 7
    numbers: tuple[int, ...] = DESK_NUMBERS
    tracklets_per_class: int = 42
    skew: float = 0.0
    min_len: int = 16
    max_len: int = 40
    frame_h: int = 32
    frame_w: int = 32
    occlusion_prob: float = 0.3
    occlusion_run: float = 4.0
    partial_prob: float = 0.5
    min_visible: float = 0.25
    rotation_deg: float = 8.0
    scale_jitter: float = 0.12
    shift_px: float = 1.5
    blur_sigma: float = 0.5
    noise: float = 0.03
    test_fraction: float = 0.2
    digit_set_size: int = 2000
    frame_set_size: int = 2400
    occlude_first: int = 0

    def __post_init__(self):
        if self.min_len < 16:
            raise ConfigError("tracklets must be at least 16 frames long")
        if self.max_len < self.min_len:
            raise ConfigError("max_len must be >= min_len")
        if self.frame_h < 24 or self.frame_w < 24:
            raise ConfigError("frames must be at least 24×24")
        if not 0.0 <= self.skew < 1.0:
            raise ConfigError("skew must be in [0, 1)")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ConfigError("occlusion_prob must be in [0, 1)")
        if self.occlusion_run < 1.0:
            raise ConfigError("occlusion_run must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")

    @property
    def scheme(self) -> ClassScheme:
        return ClassScheme(tuple(self.numbers))

    def class_counts(self) -> list[int]:
        """Tracklets per class index: ``max(1, round(n0 * (1 - skew) ** k))``."""
        n0 = self.tracklets_per_class
        return [max(1, int(round(n0 * (1.0 - self.skew) ** k)))
                for k in range(self.scheme.num_classes)]

    def with_(self, **kw) -> "DatasetSpec":
        return replace(self, **kw)


PAPER_DATA = DatasetSpec(numbers=PAPER_NUMBERS, frame_h=240, frame_w=320, max_len=200,
                         tracklets_per_class=80, skew=0.03)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class FrameStyle:
    jersey: np.ndarray
    digit: np.ndarray
    background: float
    referee: bool = False
    torso_dx: float = 0.0
    torso_dy: float = 0.0
    hidden_side: int = -1  # digit covered in partial frames; -1 picks per frame


@dataclass
class FrameMeta:
    digit_mask: np.ndarray
    digits: list[tuple[str, float, float]] = field(default_factory=list)
    occluder: bool = False


def random_style(prng: Prng, referee: bool = False) -> FrameStyle:
    if referee:
        jersey = np.array([0.95, 0.95, 0.95], np.float32)
        digit = np.array([0.05, 0.05, 0.05], np.float32)
    else:
        jersey = JERSEY_COLORS[int(prng.integers(0, len(JERSEY_COLORS)))]
        lum = float(jersey.mean())
        digit = (np.array([0.08, 0.08, 0.08], np.float32) if lum > 0.55
                 else np.array([0.97, 0.97, 0.97], np.float32))
    return FrameStyle(jersey=jersey, digit=digit, background=float(prng.uniform(0.78, 0.92)),
                      referee=referee, torso_dx=float(prng.uniform(-1.5, 1.5)),
                      torso_dy=float(prng.uniform(-1.5, 1.5)),
                      hidden_side=int(prng.integers(0, 2)))


def _digit_coverage(text: str, h: int, w: int, center: tuple[float, float], cell: float,
                    angle: float, keep: Sequence[bool]) -> tuple[np.ndarray, list]:
    """Anti-aliased coverage in [0,1] of ``text`` (2×2 supersampled)."""
    n = len(text)
    total_w = n * GLYPH_W + (n - 1) * GLYPH_GAP
    cy, cx = center
    ca, sa = np.cos(angle), np.sin(angle)
    cov = np.zeros((h, w), np.float32)
    for oy in (0.25, 0.75):
        for ox in (0.25, 0.75):
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
            dy, dx = yy + oy - cy, xx + ox - cx
            # rotate into glyph frame, then to glyph cell units
            u = (ca * dx + sa * dy) / cell + total_w / 2.0
            v = (-sa * dx + ca * dy) / cell + GLYPH_H / 2.0
            for i, ch in enumerate(text):
                if not keep[i]:
                    continue
                x0 = i * (GLYPH_W + GLYPH_GAP)
                gx = np.floor(u - x0).astype(int)
                gy = np.floor(v).astype(int)
                inside = (gx >= 0) & (gx < GLYPH_W) & (gy >= 0) & (gy < GLYPH_H)
                bm = GLYPH_BITMAPS[ch]
                hit = np.zeros((h, w), bool)
                hit[inside] = bm[gy[inside], gx[inside]]
                cov += 0.25 * hit
    centers = []
    for i, ch in enumerate(text):
        gxc = i * (GLYPH_W + GLYPH_GAP) + GLYPH_W / 2.0 - total_w / 2.0
        ddx = gxc * cell
        centers.append((ch, cy + sa * ddx, cx + ca * ddx))
    return np.minimum(cov, 1.0), centers


def render_frame(label, style: FrameStyle, visible: bool | str, prng: Prng,
                 h: int = 32, w: int = 32, spec: DatasetSpec | None = None,
                 return_meta: bool = False):
    """Render one ``[3, h, w]`` frame with values in ``[0, 1]``.

    ``label`` is a jersey number, a digit string, or ``"referee"``.
    ``visible`` may be a bool or one of the per-frame codes ``v``/``o``/``p``
    (``p``: a two-digit number with one digit covered).
    """
    spec = spec or DatasetSpec()
    if h < 24 or w < 24:
        raise ValueError("frames must be at least 24×24")
    code = visible if isinstance(visible, str) else (VISIBLE if visible else HIDDEN)
    referee = label == "referee" or style.referee
    text = "" if referee else str(label)
    if not referee and (not text.isdigit() or not 1 <= len(text) <= 2):
        raise ValueError(f"unsupported glyph text {label!r}")

    img = np.empty((3, h, w), np.float32)
    img[:] = style.background
    # a faint rink line across the lower third
    line_y = int(h * 0.78)
    img[:, line_y:line_y + max(1, h // 24)] = np.array([0.25, 0.35, 0.85], np.float32)[:, None, None]

    # torso patch
    sx = float(prng.uniform(-spec.shift_px, spec.shift_px))
    sy = float(prng.uniform(-spec.shift_px, spec.shift_px))
    tw, th = 0.72 * w, 0.78 * h
    tcx, tcy = w / 2 + style.torso_dx + sx, h / 2 + style.torso_dy + sy
    x0, x1 = int(round(tcx - tw / 2)), int(round(tcx + tw / 2))
    y0, y1 = int(round(tcy - th / 2)), int(round(tcy + th / 2))
    x0, y0 = max(x0, 0), max(y0, 0)
    img[:, y0:y1, x0:x1] = style.jersey[:, None, None]
    if referee:
        stripe = max(2, w // 14)
        cols = np.arange(x0, min(x1, w))
        dark = ((cols - x0) // stripe) % 2 == 1
        img[:, y0:y1, cols[dark]] = 0.06

    meta = FrameMeta(digit_mask=np.zeros((h, w), bool))
    if text and code in (VISIBLE, PARTIAL):
        keep = [True] * len(text)
        if code == PARTIAL and len(text) == 2:
            side = style.hidden_side if style.hidden_side in (0, 1) else int(prng.integers(0, 2))
            keep[side] = False
        scale = 1.0 + float(prng.uniform(-spec.scale_jitter, spec.scale_jitter))
        cell = scale * 0.36 * h / GLYPH_H
        angle = np.deg2rad(float(prng.uniform(-spec.rotation_deg, spec.rotation_deg)))
        center = (tcy - 0.04 * h, tcx)
        cov, centers = _digit_coverage(text, h, w, center, cell, angle, keep)
        img = img * (1 - cov) + style.digit[:, None, None] * cov
        meta.digit_mask = cov > 0.5
        meta.digits = [c for c, k in zip(centers, keep) if k]
        if not all(keep):
            _, hy, hx = centers[keep.index(False)]
            half_w, half_h = 0.6 * GLYPH_W * cell, 0.6 * GLYPH_H * cell
            ys = slice(max(int(hy - half_h), 0), max(int(np.ceil(hy + half_h)), 0))
            xs = slice(max(int(hx - half_w), 0), max(int(np.ceil(hx + half_w)), 0))
            img[:, ys, xs] = float(prng.uniform(0.1, 0.5))
            meta.digit_mask[ys, xs] = False
            meta.occluder = True
    elif text and code == HIDDEN:
        # number turned away or blocked: occluder or bare jersey
        meta.occluder = bool(prng.random() < 0.5)
        if meta.occluder:
            _draw_occluder(img, (tcy, tcx), h, w, prng)
    elif referee and code == HIDDEN and prng.random() < 0.5:
        _draw_occluder(img, (tcy, tcx), h, w, prng)
        meta.occluder = True

    if spec.blur_sigma > 0:
        img = gaussian_filter(img, sigma=(0, spec.blur_sigma, spec.blur_sigma), mode="nearest")
    if spec.noise > 0:
        img = img + prng.normal(0.0, spec.noise, img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return (img, meta) if return_meta else img


def _draw_occluder(img, center, h, w, prng: Prng):
    cy, cx = center
    oh = int(h * float(prng.uniform(0.35, 0.55)))
    ow = int(w * float(prng.uniform(0.55, 0.85)))
    y0 = int(cy - oh / 2 + prng.uniform(-2, 2))
    x0 = int(cx - ow / 2 + prng.uniform(-2, 2))
    tone = float(prng.uniform(0.1, 0.5))
    img[:, max(y0, 0):max(y0 + oh, 0), max(x0, 0):max(x0 + ow, 0)] = tone


# ---------------------------------------------------------------------------
# tracklets and datasets
# ---------------------------------------------------------------------------

@dataclass
class Tracklet:
    id: int
    label: int
    frames: np.ndarray
    visibility: str = ""

    def __len__(self):
        return len(self.frames)


@dataclass
class Store:
    records: list[Tracklet]
    classes: tuple[int, ...]

    def __len__(self):
        return len(self.records)

    @property
    def scheme(self) -> ClassScheme:
        return ClassScheme.from_raw(self.classes)

    def labels(self) -> np.ndarray:
        scheme = self.scheme
        return np.array([scheme.index(r.label) for r in self.records], dtype=np.int64)


@dataclass
class Dataset:
    train: Store
    test: Store

    @property
    def scheme(self) -> ClassScheme:
        return self.train.scheme


def visibility_chain(n: int, spec: DatasetSpec, prng: Prng) -> list[bool]:
    """Two-state persistence chain with stationary hidden fraction ``occlusion_prob``
    and mean hidden run length ``occlusion_run``."""
    p_show = 1.0 / spec.occlusion_run
    q = spec.occlusion_prob
    p_hide = min(1.0, q * p_show / (1.0 - q)) if q > 0 else 0.0
    draws = prng.random(n + 1)
    state = draws[0] >= q
    out = []
    for t in range(n):
        if t > 0:
            state = (draws[t] >= p_hide) if state else (draws[t] < p_show)
        out.append(bool(state))
    return out


def generate_tracklet(label: int, length: int, spec: DatasetSpec, prng: Prng,
                      tracklet_id: int = 0) -> Tracklet:
    if length < 16:
        raise ValueError(f"tracklet length must be >= 16, got {length}")
    referee = label == REFEREE
    unknown = label == UNKNOWN
    style = random_style(prng.split(0), referee=referee)
    if unknown:
        codes = [HIDDEN] * length
        text = str(int(prng.split(1).integers(10, 99)))
    elif referee:
        codes = [VISIBLE if v else HIDDEN for v in visibility_chain(length, spec, prng.split(2))]
        text = "referee"
    else:
        text = str(label)
        for attempt in range(64):
            vis = visibility_chain(length, spec, prng.split(2, attempt))
            if spec.occlude_first:
                vis[:spec.occlude_first] = [False] * min(spec.occlude_first, length)
            if np.mean(vis) >= spec.min_visible:
                break
        else:
            vis = [t >= spec.occlude_first for t in range(length)]
        # each player keeps its own tendency to show only one digit
        partial_rate = min(1.0, float(prng.split(3, 0).uniform(0.0, 2.0 * spec.partial_prob)))
        pr = prng.split(3).random(length)
        codes = []
        for t, v in enumerate(vis):
            if not v:
                codes.append(HIDDEN)
            elif len(text) == 2 and pr[t] < partial_rate:
                codes.append(PARTIAL)
            else:
                codes.append(VISIBLE)
    frames = np.empty((length, 3, spec.frame_h, spec.frame_w), np.float32)
    for t, code in enumerate(codes):
        frames[t] = render_frame(text, style, code, prng.split(4, t), spec.frame_h, spec.frame_w, spec)
    vis_codes = "".join(HIDDEN if (referee or unknown) else c for c in codes)
    return Tracklet(tracklet_id, int(label), frames, vis_codes)


def generate_dataset(spec: DatasetSpec, threads: int = 1) -> Dataset:
    """Render every tracklet (from its own split stream) and split train/test."""
    root = Prng(spec.seed)
    scheme = spec.scheme
    jobs = []
    for k, count in enumerate(spec.class_counts()):
        raw = scheme.raw(k)
        for _ in range(count):
            jobs.append(raw)
    lengths = root.split(1).integers(spec.min_len, spec.max_len + 1, len(jobs))

    def make(i):
        return generate_tracklet(jobs[i], int(lengths[i]), spec, root.split(2, i), tracklet_id=i)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            tracklets = list(pool.map(make, range(len(jobs))))
    else:
        tracklets = [make(i) for i in range(len(jobs))]
    order = root.split(3).permutation(len(tracklets))
    n_test = int(round(spec.test_fraction * len(tracklets)))
    test_ids = set(int(i) for i in order[:n_test])
    classes = scheme.raw_labels
    train = Store([t for t in tracklets if t.id not in test_ids], classes)
    test = Store([t for t in tracklets if t.id in test_ids], classes)
    return Dataset(train, test)


def generate_digit_set(spec: DatasetSpec, n: int | None = None) -> Store:
    """Single-digit crops, ten classes (raw labels 0..9); the pretraining set."""
    n = spec.digit_set_size if n is None else n
    root = Prng(spec.seed).split(10)
    labels = root.split(0).integers(0, 10, n)
    records = []
    for i in range(n):
        pr = root.split(1, i)
        style = random_style(pr.split(0))
        img = render_frame(str(int(labels[i])), style, True, pr.split(1), spec.frame_h, spec.frame_w, spec)
        records.append(Tracklet(i, int(labels[i]), img[None], VISIBLE))
    return Store(records, tuple(range(10)))


def generate_frame_set(spec: DatasetSpec, n: int | None = None) -> Store:
    """Single player frames with the number fully visible, jersey-number classes only."""
    n = spec.frame_set_size if n is None else n
    root = Prng(spec.seed).split(11)
    numbers = spec.scheme.numbers
    picks = root.split(0).integers(0, len(numbers), n)
    records = []
    for i in range(n):
        pr = root.split(1, i)
        style = random_style(pr.split(0))
        label = numbers[int(picks[i])]
        img = render_frame(str(label), style, True, pr.split(1), spec.frame_h, spec.frame_w, spec)
        records.append(Tracklet(i, int(label), img[None], VISIBLE))
    return Store(records, spec.scheme.raw_labels)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"TRKB"
BLOB_VERSION = 1
_HEADER = struct.Struct("<6I")
MANIFEST_TAG = "# trackid-manifest v1"


def _paths(path) -> tuple[str, str]:
    path = os.fspath(path)
    stem = path[:-len(".manifest")] if path.endswith(".manifest") else path
    return stem + ".manifest", stem + ".trkb"


def save_dataset(store: Store, path):
    """Write ``<path>.manifest`` (text, one record per tracklet) and ``<path>.trkb``."""
    manifest_path, blob_path = _paths(path)
    lines = [MANIFEST_TAG,
             f"# blob = {os.path.basename(blob_path)}",
             "# classes = " + ",".join(str(c) for c in store.classes),
             "# id label frames offset visibility"]
    offset = 8
    with open(blob_path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<I", BLOB_VERSION))
        for r in store.records:
            frames = np.asarray(r.frames, dtype="<f4")
            n, c, h, w = frames.shape
            fh.write(_HEADER.pack(r.id, r.label, n, c, h, w))
            fh.write(np.ascontiguousarray(frames).tobytes())
            lines.append(f"{r.id} {r.label} {n} {offset} {r.visibility or '-'}")
            offset += _HEADER.size + frames.nbytes
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Store:
    manifest_path, blob_path = _paths(path)
    with open(manifest_path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_TAG:
        raise FormatError(f"{manifest_path}: missing manifest tag", kind="header")
    classes = None
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# classes ="):
                body = line.split("=", 1)[1].strip()
                classes = tuple(int(c) for c in body.split(",")) if body else ()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{manifest_path}:{ln}: expected 5 fields", kind="header")
        try:
            rid, label, n, off = (int(p) for p in parts[:4])
        except ValueError:
            raise FormatError(f"{manifest_path}:{ln}: non-integer field", kind="header") from None
        entries.append((rid, label, n, off, "" if parts[4] == "-" else parts[4]))
    if classes is None:
        raise FormatError(f"{manifest_path}: no class list", kind="header")

    with open(blob_path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8 or buf[:4] != BLOB_MAGIC:
        raise FormatError(f"{blob_path}: bad magic {buf[:4]!r}", kind="magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != BLOB_VERSION:
        raise FormatError(f"{blob_path}: unsupported version {version}", kind="version")

    records = []
    pos = 8
    for rid, label, n, off, vis in entries:
        if off != pos:
            raise FormatError(f"record {rid}: manifest offset {off} != blob offset {pos}",
                              kind="mismatch")
        if pos + _HEADER.size > len(buf):
            raise FormatError(f"record {rid}: header truncated", kind="truncated")
        bid, blabel, bn, c, h, w = _HEADER.unpack_from(buf, pos)
        if (bid, blabel, bn) != (rid, label, n):
            raise FormatError(f"record {rid}: manifest ({rid},{label},{n}) vs blob ({bid},{blabel},{bn})",
                              kind="mismatch")
        pos += _HEADER.size
        nbytes = 4 * n * c * h * w
        if pos + nbytes > len(buf):
            raise FormatError(f"record {rid}: payload truncated", kind="truncated")
        frames = np.frombuffer(buf, dtype="<f4", count=n * c * h * w, offset=pos)
        records.append(Tracklet(rid, label, frames.reshape(n, c, h, w).astype(np.float32), vis))
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{blob_path}: {len(buf) - pos} trailing bytes not in manifest",
                          kind="mismatch")
    return Store(records, classes)


def spec_fields() -> list[str]:
    return [f.name for f in fields(DatasetSpec)]
