"""Seeded image augmentations and the deterministic 4-slice decomposition.

Rasters are HxWx3 uint8 arrays. Color ops work in float [0, 1] and the result
is rounded back to uint8 once, at the end of a recipe.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import convolve1d

MIN_AUG_SIDE = 8
SLICE_TAGS = {
    "both": ("left", "right", "top", "bottom"),
    "horiz": ("top", "bottom"),
    "vert": ("left", "right"),
}


def to_gray(x: np.ndarray) -> np.ndarray:
    """Channel-average grayscale, broadcast back to 3 channels."""
    g = x.mean(axis=2, keepdims=True)
    return np.repeat(g, 3, axis=2)


def resize(raster: np.ndarray, side: int) -> np.ndarray:
    if raster.shape[0] == side and raster.shape[1] == side:
        return raster.copy()
    img = Image.fromarray(raster).resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def _to_float(raster):
    return raster.astype(np.float64) / 255.0


def _to_uint8(x):
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


@dataclass
class ColorJitter:
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    p: float = 0.8
    name: str = field(default="color_jitter", init=False)

    def __call__(self, x, rng):
        if rng.random() >= self.p:
            return x
        fb = max(0.0, rng.uniform(1 - self.brightness, 1 + self.brightness))
        fc = max(0.0, rng.uniform(1 - self.contrast, 1 + self.contrast))
        fs = max(0.0, rng.uniform(1 - self.saturation, 1 + self.saturation))
        dh = rng.uniform(-self.hue, self.hue)
        x = np.clip(x * fb, 0, 1)
        mean = to_gray(x).mean()
        x = np.clip(mean + fc * (x - mean), 0, 1)
        gray = to_gray(x)
        x = np.clip(gray + fs * (x - gray), 0, 1)
        if dh != 0.0:
            hsv = rgb_to_hsv(x)
            hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
            x = np.clip(hsv_to_rgb(hsv), 0, 1)
        return x


@dataclass
class RandomGrayscale:
    p: float = 0.2
    name: str = field(default="grayscale", init=False)

    def __call__(self, x, rng):
        if rng.random() >= self.p:
            return x
        return to_gray(x)


@dataclass
class HorizontalFlip:
    p: float = 0.5
    name: str = field(default="hflip", init=False)

    def __call__(self, x, rng):
        if rng.random() >= self.p:
            return x
        return x[:, ::-1].copy()


@dataclass
class GaussianBlur:
    kernel: int = 3
    sigma: tuple = (1.0, 2.0)
    p: float = 0.5
    name: str = field(default="gaussian_blur", init=False)

    def __call__(self, x, rng):
        if rng.random() >= self.p:
            return x
        sigma = rng.uniform(*self.sigma)
        r = self.kernel // 2
        t = np.arange(-r, r + 1)
        k = np.exp(-(t ** 2) / (2 * sigma ** 2))
        k /= k.sum()
        x = convolve1d(x, k, axis=0, mode="reflect")
        return convolve1d(x, k, axis=1, mode="reflect")


@dataclass
class RandomResizedCrop:
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    p: float = 1.0
    name: str = field(default="random_resized_crop", init=False)

    def window(self, h, w, rng):
        if rng.random() >= self.p or self.scale[0] >= 1.0:
            return 0, 0, h, w
        area = h * w
        log_r = (math.log(self.ratio[0]), math.log(self.ratio[1]))
        for _ in range(10):
            target = area * rng.uniform(*self.scale)
            ar = math.exp(rng.uniform(*log_r))
            cw = int(round(math.sqrt(target * ar)))
            ch = int(round(math.sqrt(target / ar)))
            if 0 < cw <= w and 0 < ch <= h:
                top = int(rng.integers(0, h - ch + 1))
                left = int(rng.integers(0, w - cw + 1))
                return top, left, ch, cw
        return 0, 0, h, w

    def __call__(self, x, rng):
        top, left, ch, cw = self.window(x.shape[0], x.shape[1], rng)
        return x[top:top + ch, left:left + cw]


OPS = {cls.__dataclass_fields__["name"].default: cls
       for cls in (ColorJitter, RandomGrayscale, HorizontalFlip, GaussianBlur, RandomResizedCrop)}


@dataclass
class AugmentRecipe:
    ops: list
    resize_to: Optional[int] = 224

    def __post_init__(self):
        if self.resize_to is not None and self.resize_to <= 0:
            raise ValueError("resize_to must be positive")
        for op in self.ops:
            if not 0.0 <= op.p <= 1.0:
                raise ValueError(f"{op.name}: probability {op.p} outside [0, 1]")

    def __call__(self, raster: np.ndarray, rng_seed) -> np.ndarray:
        if raster.ndim != 3 or raster.shape[2] != 3:
            raise ValueError("expected an HxWx3 raster")
        if raster.shape[0] < MIN_AUG_SIDE or raster.shape[1] < MIN_AUG_SIDE:
            raise ValueError(f"raster {raster.shape[:2]} smaller than {MIN_AUG_SIDE}x{MIN_AUG_SIDE}")
        rng = np.random.default_rng(rng_seed)
        x = _to_float(raster)
        for op in self.ops:
            x = op(x, rng)
        out = _to_uint8(x)
        if self.resize_to is not None:
            out = resize(out, self.resize_to)
        return out

    def to_dict(self) -> dict:
        return {"resize_to": self.resize_to, "ops": [asdict(op) for op in self.ops]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentRecipe":
        ops = []
        for spec in d["ops"]:
            spec = dict(spec)
            kind = OPS[spec.pop("name")]
            for k in ("sigma", "scale", "ratio"):
                if k in spec:
                    spec[k] = tuple(spec[k])
            ops.append(kind(**spec))
        return cls(ops=ops, resize_to=d.get("resize_to"))


def standard_ssl_recipe(resize_to: int = 224, s: float = 1.0) -> AugmentRecipe:
    return AugmentRecipe(
        ops=[
            ColorJitter(0.8 * s, 0.8 * s, 0.8 * s, 0.2 * s, p=0.8),
            RandomGrayscale(p=0.2),
            HorizontalFlip(p=0.5),
            GaussianBlur(3, (1.0, 2.0), p=0.5),
            RandomResizedCrop(),
        ],
        resize_to=resize_to,
    )


def color_distort_recipe(s: float = 1.0) -> AugmentRecipe:
    return AugmentRecipe(
        ops=[
            ColorJitter(0.8 * s, 0.8 * s, 0.8 * s, 0.2 * s, p=0.8),
            RandomGrayscale(p=0.2),
            GaussianBlur(3, (1.0, 2.0), p=0.5),
        ],
        resize_to=None,
    )


def standard_ssl_augment(raster: np.ndarray, rng_seed, resize_to: int = 224) -> np.ndarray:
    return standard_ssl_recipe(resize_to)(raster, rng_seed)


def color_distort(raster: np.ndarray, rng_seed) -> np.ndarray:
    return color_distort_recipe()(raster, rng_seed)


@dataclass
class SliceSet:
    tags: list
    views: list
    regions: list  # (y0, y1, x0, x1) in source coordinates

    def __len__(self):
        return len(self.views)

    def view(self, tag: str) -> np.ndarray:
        return self.views[self.tags.index(tag)]


def slice_regions(h: int, w: int, mode: str = "both") -> list:
    if mode not in SLICE_TAGS:
        raise ValueError(f"unknown slice mode {mode!r}")
    if h < 2 or w < 2:
        raise ValueError(f"raster {h}x{w} too small to split")
    hw, hh = w // 2, h // 2
    boxes = {
        "left": (0, h, 0, hw),
        "right": (0, h, hw, w),
        "top": (0, hh, 0, w),
        "bottom": (hh, h, 0, w),
    }
    return [(tag, boxes[tag]) for tag in SLICE_TAGS[mode]]


def slice4(raster: np.ndarray, mode: str = "both", resize_to: Optional[int] = 224) -> SliceSet:
    """Split into left/right/top/bottom halves (or a direction subset).

    The left and top halves take the floor of an odd side. With
    ``resize_to=None`` the views are returned at their native size.
    """
    h, w = raster.shape[:2]
    tags, views, regions = [], [], []
    for tag, (y0, y1, x0, x1) in slice_regions(h, w, mode):
        part = raster[y0:y1, x0:x1]
        tags.append(tag)
        views.append(part.copy() if resize_to is None else resize(np.ascontiguousarray(part), resize_to))
        regions.append((y0, y1, x0, x1))
    return SliceSet(tags, views, regions)

