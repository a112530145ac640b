"""Frame preprocessing shared by training and inference: bilinear resize and crop."""
from __future__ import annotations

import numpy as np

from .autodiff import Prng


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``[..., H, W]`` with half-pixel-centred bilinear interpolation."""
    H, W = img.shape[-2:]
    if (H, W) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * H / out_h - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * W / out_w - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(img.dtype)[:, None]
    wx = (xs - x0).astype(img.dtype)[None, :]
    top = img[..., y0, :][..., x0] * (1 - wx) + img[..., y0, :][..., x1] * wx
    bot = img[..., y1, :][..., x0] * (1 - wx) + img[..., y1, :][..., x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def augment_crop(frames: np.ndarray, out_size: tuple[int, int], precrop: tuple[int, int],
                 prng: Prng | None = None, mode: str = "eval") -> np.ndarray:
    """Resize ``[..., C, H, W]`` to ``precrop`` then crop ``out_size``.

    ``mode="train"`` draws one random offset (shared by every frame passed in,
    so a window stays spatially coherent); ``mode="eval"`` takes the centre.
    """
    ph, pw = precrop
    oh, ow = out_size
    if oh > ph or ow > pw:
        raise ValueError(f"crop {out_size} larger than pre-crop size {precrop}")
    resized = resize_bilinear(frames, ph, pw)
    if mode == "train":
        if prng is None:
            raise ValueError("train-mode crop needs a Prng")
        top = int(prng.integers(0, ph - oh + 1))
        left = int(prng.integers(0, pw - ow + 1))
    elif mode == "eval":
        top, left = (ph - oh) // 2, (pw - ow) // 2
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return np.ascontiguousarray(resized[..., top:top + oh, left:left + ow])
