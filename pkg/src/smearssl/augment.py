"""View generation: random resized crops plus a small named augmentation
chain (flip, color jitter, grayscale, blur, solarize), all on float images in
[0, 1]. Replaces the pixel-level recipe of the upstream framework with a
configurable ordered chain; local crops stay available but default to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class CropSpec:
    global_crops: int = 2
    global_size: int = 64
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_crops: int = 0
    local_size: int = 32
    local_scale: tuple[float, float] = (0.1, 0.4)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: float = 0.3
    grayscale_p: float = 0.1
    blur_p: float = 0.3
    blur_sigma: float = 1.0
    solarize_p: float = 0.1
    solarize_threshold: float = 0.5

    def __post_init__(self):
        if self.global_crops < 2:
            raise ParameterError("need at least 2 global crops")
        if self.local_crops < 0:
            raise ParameterError("local_crops must be >= 0")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ParameterError(f"{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")
        if self.global_size < 1 or self.local_size < 1:
            raise ParameterError("crop sizes must be >= 1")
        for name in ("flip_p", "jitter_p", "grayscale_p", "blur_p", "solarize_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter_strength < 0 or self.blur_sigma <= 0:
            raise ParameterError("jitter_strength must be >= 0 and blur_sigma > 0")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """[H,W,C] float32 -> [out_h,out_w,C], half-pixel-center sampling. The
    identity geometry returns the input unchanged so identity pipelines stay
    bit-exact."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :, None]
    a = img[y0[:, None], x0[None, :]]
    b = img[y0[:, None], x1[None, :]]
    c = img[y1[:, None], x0[None, :]]
    d = img[y1[:, None], x1[None, :]]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def random_resized_crop(img: np.ndarray, size: int, scale: tuple[float, float],
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a random area fraction at the source aspect ratio, then resize.
    scale == (1, 1) selects the full frame, so the op reduces to a resize."""
    h, w = img.shape[:2]
    s = float(rng.uniform(scale[0], scale[1]))
    ch = max(1, int(round(h * np.sqrt(s))))
    cw = max(1, int(round(w * np.sqrt(s))))
    ch, cw = min(ch, h), min(cw, w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return resize_bilinear(img[y0:y0 + ch, x0:x0 + cw], size, size)


def color_jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    fb = float(rng.uniform(1 - strength, 1 + strength))
    fc = float(rng.uniform(1 - strength, 1 + strength))
    fs = float(rng.uniform(1 - strength, 1 + strength))
    out = img * fb
    mean = out.mean(dtype=np.float64)
    out = (out - mean) * fc + mean
    luma = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    out = (out - luma[..., None]) * fs + luma[..., None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    luma = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return np.repeat(luma[..., None], 3, axis=2)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel = (kernel / kernel.sum()).astype(np.float32)
    pad = [(radius, radius), (0, 0), (0, 0)]
    out = np.pad(img, pad, mode="reflect")
    out = np.einsum("k,khwc->hwc", kernel,
                    np.stack([out[i:i + img.shape[0]] for i in range(2 * radius + 1)]))
    out = np.pad(out, [(0, 0), (radius, radius), (0, 0)], mode="reflect")
    out = np.einsum("k,hkwc->hwc", kernel,
                    np.stack([out[:, i:i + img.shape[1]] for i in range(2 * radius + 1)], axis=1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(np.float32)


def _augment_chain(view: np.ndarray, spec: CropSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.flip_p > 0 and rng.random() < spec.flip_p:
        view = view[:, ::-1].copy()
    if spec.jitter_p > 0 and rng.random() < spec.jitter_p:
        view = color_jitter(view, spec.jitter_strength, rng)
    if spec.grayscale_p > 0 and rng.random() < spec.grayscale_p:
        view = to_grayscale(view)
    if spec.blur_p > 0 and rng.random() < spec.blur_p:
        sigma = float(rng.uniform(0.1, spec.blur_sigma))
        view = gaussian_blur(view, sigma)
    if spec.solarize_p > 0 and rng.random() < spec.solarize_p:
        view = solarize(view, spec.solarize_threshold)
    return view


def multicrop(image: np.ndarray, spec: CropSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """8-bit [H,W,3] image -> global (then local) float32 views in [0,1]."""
    img = image.astype(np.float32) / 255.0
    views: list[np.ndarray] = []
    for _ in range(spec.global_crops):
        v = random_resized_crop(img, spec.global_size, spec.global_scale, rng)
        views.append(_augment_chain(v, spec, rng))
    for _ in range(spec.local_crops):
        v = random_resized_crop(img, spec.local_size, spec.local_scale, rng)
        views.append(_augment_chain(v, spec, rng))
    return views
