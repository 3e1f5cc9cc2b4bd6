"""Catalog records: synthetic color-variant corpora and JSON-lines manifests.

Synthetic styles are rasterised once into a palette-index map; every color
variant of a style reuses that map and only swaps the palette. Palette colors
are parameterised as ``mean + chroma * cos(hue - 120k)`` per channel ``k`` and
variants rotate the hue around the gray axis, so the channel sum of every
pixel (and therefore the channel-average grayscale image) is identical across
the variants of a style.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

PATTERN_FAMILIES = ("stripes", "diamonds", "split-panel", "floral-motif", "vertical-text-band")
BACKGROUND = 228
MIN_SIDE = 32
SPLITS = ("train", "eval")


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValueError(
                f"bbox {self.as_list()} outside image of size {width}x{height}"
            )

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    bbox: Optional[BoundingBox] = None
    group_id: Optional[str] = None
    split: str = "train"

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"{self.id}: pixels must be an HxWx3 uint8 raster")
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class SyntheticSpec:
    n_styles: int = 20
    variants_per_style: int = 4
    canvas: int = 96
    pattern_families: Sequence[str] = PATTERN_FAMILIES
    hue_set: Optional[Sequence[float]] = None
    seed: int = 0
    n_eval_styles: int = 0

    def hues(self) -> list[float]:
        if self.hue_set is None:
            return [360.0 * k / self.variants_per_style for k in range(self.variants_per_style)]
        return [float(h) for h in self.hue_set]

    def validate(self) -> None:
        if self.n_styles < 1:
            raise ValueError("n_styles: must be >= 1")
        if self.variants_per_style < 1:
            raise ValueError("variants_per_style: must be >= 1")
        if self.canvas < MIN_SIDE + 8:
            raise ValueError(f"canvas: must be >= {MIN_SIDE + 8}")
        if not self.pattern_families:
            raise ValueError("pattern_families: must not be empty")
        unknown = [f for f in self.pattern_families if f not in PATTERN_FAMILIES]
        if unknown:
            raise ValueError(f"pattern_families: unknown families {unknown}")
        hues = self.hues()
        if len({h % 360.0 for h in hues}) != len(hues):
            raise ValueError("hue_set: entries must be distinct")
        if len(hues) < self.variants_per_style:
            raise ValueError("hue_set: needs at least variants_per_style entries")
        if not 0 <= self.n_eval_styles <= self.n_styles:
            raise ValueError("n_eval_styles: must be in [0, n_styles]")


@dataclass
class _Style:
    family: str
    labels: np.ndarray  # (h, w) int, -1 outside the garment
    bbox: BoundingBox
    palette: list[tuple[float, float, float]] = field(default_factory=list)  # (mean, chroma, hue_deg)


def palette_rgb(mean: float, chroma: float, hue_deg: float) -> np.ndarray:
    """Integer RGB whose channel sum is exactly ``3 * round(mean)``."""
    m = int(round(mean))
    h = math.radians(hue_deg)
    r = int(round(m + chroma * math.cos(h)))
    g = int(round(m + chroma * math.cos(h - 2 * math.pi / 3)))
    b = 3 * m - r - g
    rgb = np.array([r, g, b])
    if rgb.min() < 0 or rgb.max() > 255:
        raise ValueError(f"palette color out of gamut: mean={mean} chroma={chroma}")
    return rgb.astype(np.uint8)


def _garment_mask(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    # kurta-like silhouette: sleeves across the top, body flaring towards the hem
    yy, xx = np.mgrid[0:h, 0:w]
    cx = (w - 1) / 2
    sleeve_h = int(h * rng.uniform(0.18, 0.28))
    top_half = w * rng.uniform(0.26, 0.32)
    hem_half = w * rng.uniform(0.40, 0.49)
    half = top_half + (hem_half - top_half) * (yy / max(h - 1, 1))
    body = np.abs(xx - cx) <= half
    sleeves = yy < sleeve_h
    neck = (np.abs(xx - cx) < w * 0.08) & (yy < h * 0.06)
    return (body | sleeves) & ~neck


def _pattern_labels(family: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if family == "stripes":
        period = int(rng.integers(6, 15))
        orient = rng.choice(["h", "d1", "d2"])
        coord = {"h": yy, "d1": xx + yy, "d2": xx - yy + w}[orient]
        ncol = int(rng.integers(2, 4))
        return (coord // period) % ncol
    if family == "diamonds":
        period = int(rng.integers(8, 16))
        x0, y0 = rng.integers(0, period, size=2)
        u = (xx - x0 + yy - y0) // period
        v = (xx - x0 - yy + y0 + 4 * w) // period
        lab = (u + v) % 2
        edge = (((xx - x0 + yy - y0) % period) < 2) | (((xx - x0 - yy + y0) % period) < 2)
        return np.where(edge, 2, lab)
    if family == "split-panel":
        cx = rng.uniform(0.3, 0.7) * w
        base = rng.uniform(0.3, 0.6) * h
        slope = rng.uniform(-0.8, 0.8)
        line = base + slope * np.abs(xx - cx)
        band = rng.uniform(2.0, 4.0)
        lab = np.where(yy < line, 0, 1)
        return np.where(np.abs(yy - line) < band, 2, lab)
    if family == "floral-motif":
        lab = np.zeros((h, w), dtype=int)
        n = int(rng.integers(4, 9))
        for _ in range(n):
            fx, fy = rng.uniform(0, w), rng.uniform(0, h)
            r = rng.uniform(3.0, 6.0)
            for k in range(5):
                a = 2 * math.pi * k / 5
                px, py = fx + r * math.cos(a), fy + r * math.sin(a)
                lab[(xx - px) ** 2 + (yy - py) ** 2 <= (0.6 * r) ** 2] = 1
            lab[(xx - fx) ** 2 + (yy - fy) ** 2 <= (0.45 * r) ** 2] = 2
        return lab
    if family == "vertical-text-band":
        lab = np.zeros((h, w), dtype=int)
        bw = int(rng.integers(max(6, w // 8), max(7, w // 4)))
        bx = int(rng.integers(int(w * 0.2), max(int(w * 0.2) + 1, int(w * 0.8) - bw)))
        lab[:, bx:bx + bw] = 1
        y = int(rng.integers(2, 6))
        while y < h - 4:
            gh = int(rng.integers(3, 7))
            gw = int(rng.integers(max(2, bw // 3), bw - 1))
            gx = bx + int(rng.integers(1, max(2, bw - gw)))
            lab[y:y + gh, gx:gx + gw] = 2
            y += gh + int(rng.integers(2, 5))
        return lab
    raise ValueError(f"unknown pattern family {family!r}")


def _random_palette(ncolors: int, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    means = []
    while len(means) < ncolors:
        m = float(rng.uniform(45, 205))
        if all(abs(m - o) >= 30 for o in means):
            means.append(m)
    palette = []
    for m in means:
        cmax = min(m, 255 - m) - 3
        chroma = float(rng.uniform(0.55, 1.0) * cmax)
        palette.append((m, chroma, float(rng.uniform(0, 360))))
    return palette


def _make_style(family: str, canvas: int, rng: np.random.Generator) -> _Style:
    h = max(MIN_SIDE, int(canvas * rng.uniform(0.72, 0.88)))
    w = max(MIN_SIDE, int(canvas * rng.uniform(0.62, 0.80)))
    x0 = int(rng.integers(1, canvas - w))
    y0 = int(rng.integers(1, canvas - h))
    labels = _pattern_labels(family, h, w, rng)
    labels = np.where(_garment_mask(h, w, rng), labels, -1)
    ncolors = int(labels.max()) + 1
    return _Style(family, labels, BoundingBox(x0, y0, x0 + w, y0 + h), _random_palette(ncolors, rng))


def render_variant(style: _Style, canvas: int, hue_offset: float) -> np.ndarray:
    img = np.full((canvas, canvas, 3), BACKGROUND, dtype=np.uint8)
    colors = np.stack([palette_rgb(m, c, h + hue_offset) for m, c, h in style.palette])
    b = style.bbox
    region = img[b.y0:b.y1, b.x0:b.x1]
    inside = style.labels >= 0
    region[inside] = colors[style.labels[inside]]
    return img


def generate_synthetic(spec: SyntheticSpec) -> list[ImageRecord]:
    """Render ``n_styles * variants_per_style`` records, grouped by style.

    The last ``n_eval_styles`` styles form the eval split. Families are
    assigned round-robin so every requested family is present.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    hues = spec.hues()
    first_eval = spec.n_styles - spec.n_eval_styles
    records = []
    for s in range(spec.n_styles):
        family = spec.pattern_families[s % len(spec.pattern_families)]
        style = _make_style(family, spec.canvas, rng)
        split = "eval" if s >= first_eval else "train"
        for v in range(spec.variants_per_style):
            records.append(ImageRecord(
                id=f"s{s:03d}_v{v}",
                pixels=render_variant(style, spec.canvas, hues[v]),
                bbox=style.bbox,
                group_id=str(s),
                split=split,
            ))
    return records


def crop_primary(record: ImageRecord) -> np.ndarray:
    h, w = record.pixels.shape[:2]
    b = record.bbox
    if b is None:
        return record.pixels
    x0, x1 = max(0, b.x0), min(w, b.x1)
    y0, y1 = max(0, b.y0), min(h, b.y1)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"{record.id}: degenerate bbox {b.as_list()} after clamping")
    return record.pixels[y0:y1, x0:x1]


def load_manifest(path) -> list[ImageRecord]:
    path = Path(path)
    root = path.parent
    records, seen = [], set()
    bad = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                rid = entry["id"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
            if rid in seen:
                raise ValueError(f"duplicate id {rid!r} in {path}")
            seen.add(rid)
            img_path = root / entry["path"]
            try:
                with Image.open(img_path) as im:
                    pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
            except OSError:
                bad.append(rid)
                continue
            h, w = pixels.shape[:2]
            box = entry.get("bbox")
            bbox = BoundingBox(*map(int, box)) if box is not None else BoundingBox(0, 0, w, h)
            bbox.validate(w, h)
            if bbox.width < MIN_SIDE or bbox.height < MIN_SIDE:
                raise ValueError(f"{rid}: crop {bbox.width}x{bbox.height} smaller than {MIN_SIDE}px")
            group = entry.get("group_id")
            records.append(ImageRecord(
                id=rid,
                pixels=pixels,
                bbox=bbox,
                group_id=None if group is None else str(group),
                split=entry.get("split", "train"),
            ))
    if bad:
        raise ValueError(f"unreadable images for ids: {', '.join(bad)}")
    return records


def write_manifest(records: Sequence[ImageRecord], out_dir) -> Path:
    """Write PNGs plus ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for r in records:
            rel = f"images/{r.id}.png"
            Image.fromarray(r.pixels).save(out_dir / rel)
            fh.write(json.dumps({
                "id": r.id,
                "path": rel,
                "bbox": r.bbox.as_list() if r.bbox else None,
                "group_id": r.group_id,
                "split": r.split,
            }) + "\n")
    return manifest


def split_records(records: Sequence[ImageRecord], split: str) -> list[ImageRecord]:
    return [r for r in records if r.split == split]
