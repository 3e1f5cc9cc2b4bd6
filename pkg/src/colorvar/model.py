"""Encoders, projection heads and embedding extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .augment import resize, slice4
from .dataset import ImageRecord, crop_primary

BACKBONES = ("resnet34", "tiny_cnn")
HEADS = ("none", "projector_mlp", "projector_plus_predictor")
EMB_MAGIC = "COLORVAR-EMB v1"
NORM_TOL = 1e-5

# ImageNet statistics, kept so pretrained backbones see the input they expect
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


@dataclass
class EncoderConfig:
    backbone: str = "resnet34"
    input_side: int = 224
    embed_dim: int = 512
    head: str = "none"
    head_dims: list = field(default_factory=list)
    width: int = 32  # tiny_cnn base channel count
    norm: str = "batch"  # tiny_cnn: batch | group | none
    pretrained: bool = False

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone: unknown {self.backbone!r}, expected one of {BACKBONES}")
        if self.head not in HEADS:
            raise ValueError(f"head: unknown {self.head!r}, expected one of {HEADS}")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim: must be positive")
        if self.backbone == "resnet34" and self.embed_dim != 512:
            raise ValueError("embed_dim: resnet34 avgpool width is 512")
        if self.input_side < 8:
            raise ValueError("input_side: must be >= 8")
        need = {"none": (0, 0), "projector_mlp": (2, 2), "projector_plus_predictor": (3, 3)}[self.head]
        if not need[0] <= len(self.head_dims) <= need[1]:
            raise ValueError(f"head_dims: {self.head} expects {need[0]} widths, got {list(self.head_dims)}")
        if any(int(d) <= 0 for d in self.head_dims):
            raise ValueError("head_dims: widths must be positive")
        if self.norm not in ("batch", "group", "none"):
            raise ValueError(f"norm: unknown {self.norm!r}")
        if self.pretrained and self.backbone != "resnet34":
            raise ValueError("pretrained: only available for resnet34")


def _mlp(dims: Sequence[int]) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class TinyCNN(nn.Module):
    """Strided conv stack with global average pooling, for desk-scale runs."""

    def __init__(self, embed_dim: int = 128, width: int = 32, norm: str = "batch"):
        super().__init__()
        c = width
        chans = [(3, c, 5, 2), (c, 2 * c, 3, 2), (2 * c, 4 * c, 3, 2), (4 * c, embed_dim, 3, 1)]
        layers = []
        for cin, cout, k, stride in chans:
            layers.append(nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=norm == "none"))
            if norm == "batch":
                layers.append(nn.BatchNorm2d(cout))
            elif norm == "group":
                layers.append(nn.GroupNorm(min(8, cout), cout))
            layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.body(x)).flatten(1)


def _resnet34(pretrained: bool) -> nn.Module:
    from torchvision.models import ResNet34_Weights, resnet34

    net = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1 if pretrained else None)
    net.fc = nn.Identity()
    return net


class Encoder(nn.Module):
    """Backbone (pooled features) plus an optional projector / predictor.

    ``features`` is the clustering embedding; ``forward`` returns the head
    output used by the training objective.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        if config.backbone == "tiny_cnn":
            self.backbone = TinyCNN(config.embed_dim, config.width, config.norm)
        else:
            self.backbone = _resnet34(config.pretrained)
        dims = [int(d) for d in config.head_dims]
        self.projector = None
        self.predictor = None
        if config.head in ("projector_mlp", "projector_plus_predictor"):
            self.projector = _mlp([config.embed_dim, dims[0], dims[1]])
        if config.head == "projector_plus_predictor":
            self.predictor = _mlp([dims[1], dims[2], dims[1]])

    @property
    def input_side(self) -> int:
        return self.config.input_side

    @property
    def output_dim(self) -> int:
        if self.projector is None:
            return self.config.embed_dim
        return int(self.config.head_dims[1])

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.backbone(x)
        return h if self.projector is None else self.projector(h)

    def predict(self, z: torch.Tensor) -> torch.Tensor:
        if self.predictor is None:
            raise RuntimeError("encoder has no predictor head")
        return self.predictor(z)


def build_encoder(config: EncoderConfig) -> Encoder:
    config.validate()
    return Encoder(config)


def to_tensor(rasters: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 uint8 rasters into a normalised Bx3xHxW tensor."""
    x = torch.from_numpy(np.stack(rasters)).permute(0, 3, 1, 2).to(dtype) / 255.0
    return (x - _MEAN.to(dtype)) / _STD.to(dtype)


def _param_dtype(module) -> torch.dtype:
    try:
        return next(module.parameters()).dtype
    except (StopIteration, AttributeError):
        return torch.get_default_dtype()


def sum_pooled(fn: Callable, views: torch.Tensor) -> torch.Tensor:
    """Apply ``fn`` to a BxVx3xSxS view stack and sum over V."""
    b, v = views.shape[:2]
    out = fn(views.reshape(b * v, *views.shape[2:]))
    return out.reshape(b, v, -1).sum(dim=1)


def embed_sliced(encoder: Callable, raster: np.ndarray, mode: str = "both",
                 resize_to: Optional[int] = None) -> torch.Tensor:
    """Sum of ``encoder`` outputs over the slices of ``raster``."""
    side = resize_to or getattr(encoder, "input_side", 224)
    views = slice4(raster, mode, side).views
    x = to_tensor(views, _param_dtype(encoder))
    return encoder(x).sum(dim=0)


@dataclass
class EmbeddingMatrix:
    ids: list
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.ids) != self.values.shape[0]:
            raise ValueError("ids and embedding rows are misaligned")
        if self.normalized:
            norms = np.linalg.norm(self.values, axis=1)
            if not np.allclose(norms, 1.0, atol=NORM_TOL):
                raise ValueError("normalized embedding rows must have unit norm")

    @property
    def shape(self):
        return self.values.shape


def l2_normalize(emb: EmbeddingMatrix) -> EmbeddingMatrix:
    norms = np.linalg.norm(emb.values, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero-norm embedding for id {emb.ids[zero[0]]!r}")
    return EmbeddingMatrix(list(emb.ids), emb.values / norms[:, None], normalized=True)


@torch.no_grad()
def embed_dataset(encoder: Encoder, records: Sequence[ImageRecord], bbox_crop: bool = True,
                  normalize: bool = True, slice_mode: Optional[str] = None,
                  batch_size: int = 64) -> EmbeddingMatrix:
    """Backbone features for every record, rows aligned with ``records``.

    With ``slice_mode`` set, each row is the sum-pooled feature of that
    record's slices instead of the whole crop.
    """
    if not records:
        raise ValueError("no records to embed")
    was_training = encoder.training
    encoder.eval()
    dtype = _param_dtype(encoder)
    side = encoder.input_side
    rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        rasters = [crop_primary(r) if bbox_crop else r.pixels for r in chunk]
        if slice_mode is None:
            x = to_tensor([resize(np.ascontiguousarray(r), side) for r in rasters], dtype)
            rows.append(encoder.features(x))
        else:
            views = torch.stack([to_tensor(slice4(r, slice_mode, side).views, dtype) for r in rasters])
            rows.append(sum_pooled(encoder.features, views))
    encoder.train(was_training)
    # float32 is the export precision; clustering always sees the same values
    values = torch.cat(rows).to(torch.float32).numpy().astype(np.float64)
    emb = EmbeddingMatrix([r.id for r in records], values, normalized=False)
    if normalize:
        emb = l2_normalize(emb)
        emb.values = emb.values.astype(np.float32).astype(np.float64)
    return emb


def save_embeddings(emb: EmbeddingMatrix, stem) -> tuple[Path, Path]:
    """Write ``<stem>.ids.txt`` (header + ids) and ``<stem>.f32`` (row-major float32)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    n, d = emb.values.shape
    ids_path = stem.with_name(stem.name + ".ids.txt")
    bin_path = stem.with_name(stem.name + ".f32")
    with open(ids_path, "w", encoding="utf-8") as fh:
        fh.write(f"{EMB_MAGIC} {n} {d} normalized={int(emb.normalized)}\n")
        for rid in emb.ids:
            fh.write(f"{rid}\n")
    emb.values.astype("<f4").tofile(bin_path)
    return ids_path, bin_path


def load_embeddings(stem) -> EmbeddingMatrix:
    stem = Path(stem)
    ids_path = stem.with_name(stem.name + ".ids.txt")
    bin_path = stem.with_name(stem.name + ".f32")
    with open(ids_path, encoding="utf-8") as fh:
        header = fh.readline().split()
        ids = [line.rstrip("\n") for line in fh]
    if " ".join(header[:2]) != EMB_MAGIC or len(header) != 5:
        raise ValueError(f"{ids_path}: bad header")
    n, d = int(header[2]), int(header[3])
    normalized = header[4] == "normalized=1"
    values = np.fromfile(bin_path, dtype="<f4")
    if values.size != n * d or len(ids) != n:
        raise ValueError(f"{bin_path}: expected {n}x{d} values and {n} ids")
    return EmbeddingMatrix(ids, values.reshape(n, d).astype(np.float64), normalized=normalized)
