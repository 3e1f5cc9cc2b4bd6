"""Training loops for the triplet baseline and the self-supervised methods.

Momentum methods keep a frozen key/target copy of the online network that is
only ever moved by :func:`ema_update`; the optimizer is built from the online
network's parameters alone.
"""

from __future__ import annotations

import copy
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import color_distort_recipe, resize, slice4, standard_ssl_recipe
from .augment import ColorJitter, AugmentRecipe
from .dataset import ImageRecord, crop_primary
from .losses import negcos_loss, ntxent_loss, triplet_loss
from .model import Encoder, EncoderConfig, build_encoder, sum_pooled, to_tensor

log = logging.getLogger(__name__)

METHODS = ("triplet", "simsiam_v0", "simsiam_v1", "simsiam_v2", "byol", "mocov2",
           "pbcnet", "pbcnet_horiz", "pbcnet_vert")
QUEUE_METHODS = ("mocov2", "pbcnet", "pbcnet_horiz", "pbcnet_vert")
EMA_METHODS = ("byol",) + QUEUE_METHODS
SLICE_MODE = {"pbcnet": "both", "pbcnet_horiz": "horiz", "pbcnet_vert": "vert"}
DEFAULT_BATCH = {"triplet": 12, "simsiam_v0": 12, "simsiam_v1": 12, "simsiam_v2": 128,
                 "byol": 128, "mocov2": 128, "pbcnet": 32, "pbcnet_horiz": 32, "pbcnet_vert": 32}
NORM_TOL = 1e-4


@dataclass
class TrainConfig:
    method: str = "pbcnet"
    epochs: int = 30
    batch_size: Optional[int] = None
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    temperature: float = 0.05
    ema: float = 0.999
    queue_size: int = 5000
    margin: float = 0.2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size is None and self.method in DEFAULT_BATCH:
            self.batch_size = DEFAULT_BATCH[self.method]

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method: unknown {self.method!r}, expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.batch_size is None or self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr: must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype: float32 or float64")
        if self.method == "triplet" and self.margin <= 0:
            raise ValueError("margin: must be positive")
        if self.method in QUEUE_METHODS:
            if self.temperature <= 0:
                raise ValueError("temperature: must be positive")
            if self.queue_size < self.batch_size:
                raise ValueError(f"queue_size: {self.queue_size} is smaller than batch_size {self.batch_size}")
        if self.method in EMA_METHODS and not 0.0 <= self.ema <= 1.0:
            raise ValueError("ema: momentum must lie in [0, 1]")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def default_encoder_config(method: str, backbone: str = "resnet34", **overrides) -> EncoderConfig:
    """Head layout each method trains with (ResNet34 widths unless overridden)."""
    if method in ("simsiam_v0", "simsiam_v1", "simsiam_v2", "byol"):
        head, dims = "projector_plus_predictor", [4096, 123, 4096]
    elif method == "mocov2":
        head, dims = "projector_mlp", [4096, 123]
    else:
        head, dims = "none", []
    cfg = dict(backbone=backbone, head=head, head_dims=dims)
    if backbone == "tiny_cnn":
        cfg.update(input_side=64, embed_dim=128)
    cfg.update(overrides)
    return EncoderConfig(**cfg)


# -- momentum encoder ------------------------------------------------------

@dataclass
class MomentumPair:
    query: nn.Module
    key: nn.Module
    m: float = 0.999

    @classmethod
    def from_query(cls, query: nn.Module, m: float) -> "MomentumPair":
        key = copy.deepcopy(query)
        for p in key.parameters():
            p.requires_grad_(False)
        return cls(query, key, m)


@torch.no_grad()
def ema_update(pair: MomentumPair) -> MomentumPair:
    """key <- m * key + (1 - m) * query, parameter by parameter."""
    q_params = list(pair.query.parameters())
    k_params = list(pair.key.parameters())
    if len(q_params) != len(k_params) or any(q.shape != k.shape for q, k in zip(q_params, k_params)):
        raise ValueError("query and key parameter shapes differ")
    for q, k in zip(q_params, k_params):
        k.mul_(pair.m).add_(q.detach(), alpha=1.0 - pair.m)
    return pair


# -- memory queue ----------------------------------------------------------

class MemoryQueue:
    """Fixed-capacity FIFO of l2-normalised key embeddings (ring buffer).

    ``random_fill`` starts the queue full of random unit vectors, so the
    number of negatives is constant from the first step.
    """

    def __init__(self, capacity: int, dim: int, dtype=torch.float32,
                 random_fill: bool = False, generator: Optional[torch.Generator] = None):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.head = 0  # next slot to write
        if random_fill:
            keys = torch.randn(capacity, dim, generator=generator, dtype=torch.float64)
            self.storage = F.normalize(keys, dim=1).to(dtype)
            self.fill = capacity
        else:
            self.storage = torch.zeros(capacity, dim, dtype=dtype)
            self.fill = 0

    def __len__(self):
        return self.fill

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.fill < self.capacity:
            return self.storage[:self.fill]
        return torch.cat([self.storage[self.head:], self.storage[:self.head]])

    def negatives(self) -> torch.Tensor:
        # order is irrelevant to the loss; skip the copy
        return self.storage[:self.fill] if self.fill < self.capacity else self.storage


@torch.no_grad()
def queue_push(queue: MemoryQueue, keys: torch.Tensor) -> MemoryQueue:
    b = keys.shape[0]
    if b > queue.capacity:
        raise ValueError(f"cannot push {b} keys into a queue of capacity {queue.capacity}")
    if keys.ndim != 2 or keys.shape[1] != queue.storage.shape[1]:
        raise ValueError("key dimension does not match the queue")
    norms = keys.norm(dim=1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=NORM_TOL):
        raise ValueError("queue keys must be l2-normalised")
    idx = (queue.head + torch.arange(b)) % queue.capacity
    queue.storage[idx] = keys.detach().to(queue.storage.dtype)
    queue.head = (queue.head + b) % queue.capacity
    queue.fill = min(queue.fill + b, queue.capacity)
    return queue


# -- run bookkeeping -------------------------------------------------------

@dataclass
class RunManifest:
    train_config: dict
    encoder_config: dict
    seed: int
    n_train: int
    epoch_losses: list = field(default_factory=list)
    wall_time_s: float = 0.0
    pretrained: bool = False
    versions: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def save_checkpoint(encoder: Encoder, manifest: RunManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"encoder_config": asdict(encoder.config), "state_dict": encoder.state_dict()}, path)
    manifest.save(path.with_suffix(".manifest.json"))


def load_checkpoint(path) -> Encoder:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = EncoderConfig(**blob["encoder_config"])
    cfg.pretrained = False  # weights come from the checkpoint
    enc = build_encoder(cfg)
    dtype = next(iter(blob["state_dict"].values())).dtype
    enc.to(dtype)
    enc.load_state_dict(blob["state_dict"])
    enc.eval()
    return enc


# -- training --------------------------------------------------------------

def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class _Views:
    """Builds the per-method input views for a batch of crops."""

    def __init__(self, method: str, side: int, dtype):
        self.method = method
        self.side = side
        self.dtype = dtype
        self.ssl = standard_ssl_recipe(side)
        self.jitter = AugmentRecipe([ColorJitter(p=1.0)], resize_to=side)
        self.distort = color_distort_recipe()

    def plain(self, crops):
        return to_tensor([resize(c, self.side) for c in crops], self.dtype)

    def pair(self, crops, seeds):
        """Two views per crop; seeds is a list of (seed_a, seed_b)."""
        m = self.method
        if m == "simsiam_v0":
            a = self.plain(crops)
            b = to_tensor([self.jitter(c, s[1]) for c, s in zip(crops, seeds)], self.dtype)
        elif m in SLICE_MODE:
            mode = SLICE_MODE[m]
            a = torch.stack([to_tensor(slice4(self.distort(c, s[0]), mode, self.side).views, self.dtype)
                             for c, s in zip(crops, seeds)])
            b = torch.stack([to_tensor(slice4(self.distort(c, s[1]), mode, self.side).views, self.dtype)
                             for c, s in zip(crops, seeds)])
        else:
            a = to_tensor([self.ssl(c, s[0]) for c, s in zip(crops, seeds)], self.dtype)
            b = to_tensor([self.ssl(c, s[1]) for c, s in zip(crops, seeds)], self.dtype)
        return a, b


def _triplets(groups: Sequence[str], rng: np.random.Generator):
    """One (anchor, positive, negative) index triple per anchor with a same-group partner."""
    by_group = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    out = []
    for i, g in enumerate(groups):
        mates = [j for j in by_group[g] if j != i]
        others = [j for j, h in enumerate(groups) if h != g]
        if not mates or not others:
            continue
        out.append((i, mates[int(rng.integers(len(mates)))], others[int(rng.integers(len(others)))]))
    return out


class Trainer:
    """Owns the online network, the optional key/target copy and the queue."""

    def __init__(self, cfg: TrainConfig, enc_cfg: EncoderConfig):
        cfg.validate()
        self.cfg = cfg
        self.method = cfg.method
        torch.manual_seed(cfg.seed)
        self.encoder = build_encoder(enc_cfg).to(cfg.torch_dtype)
        if self.method in ("simsiam_v0", "simsiam_v1", "simsiam_v2", "byol") and self.encoder.predictor is None:
            raise ValueError(f"{self.method} needs head=projector_plus_predictor")
        self.pair = None
        if self.method in EMA_METHODS:
            self.pair = MomentumPair.from_query(self.encoder, cfg.ema)
        self.queue = None
        if self.method in QUEUE_METHODS:
            gen = torch.Generator().manual_seed(_seed(cfg.seed, 1 << 20))
            self.queue = MemoryQueue(cfg.queue_size, self.encoder.output_dim, cfg.torch_dtype,
                                     random_fill=True, generator=gen)
        self.optimizer = torch.optim.SGD(self.encoder.parameters(), lr=cfg.lr,
                                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.views = _Views(self.method, enc_cfg.input_side, cfg.torch_dtype)

    @property
    def key_encoder(self) -> Optional[nn.Module]:
        return None if self.pair is None else self.pair.key

    def loss(self, crops, seeds, triplet_idx=None):
        enc = self.encoder
        m = self.method
        if m == "triplet":
            x = self.views.plain(crops)
            z = F.normalize(enc(x), dim=1)
            a, p, n = (torch.as_tensor(c) for c in zip(*triplet_idx))
            return triplet_loss(z[a], z[p], z[n], self.cfg.margin)
        x1, x2 = self.views.pair(crops, seeds)
        if m.startswith("simsiam"):
            z1, z2 = enc(x1), enc(x2)
            p1, p2 = enc.predict(z1), enc.predict(z2)
            return 0.5 * (negcos_loss(p1, z2) + negcos_loss(p2, z1))
        if m == "byol":
            p1, p2 = enc.predict(enc(x1)), enc.predict(enc(x2))
            with torch.no_grad():
                t1, t2 = self.pair.key(x1), self.pair.key(x2)
            return 0.5 * (negcos_loss(p1, t2) + negcos_loss(p2, t1))
        # momentum contrast, with or without slicing
        if m in SLICE_MODE:
            q = sum_pooled(enc, x1)
            with torch.no_grad():
                k = sum_pooled(self.pair.key, x2)
        else:
            q = enc(x1)
            with torch.no_grad():
                k = self.pair.key(x2)
        k = F.normalize(k.detach(), dim=1)
        loss = ntxent_loss(q, k, self.queue.negatives(), self.cfg.temperature)
        self._pending_keys = k
        return loss

    def step(self, crops, seeds, triplet_idx=None) -> float:
        self.encoder.train()
        self._pending_keys = None
        loss = self.loss(crops, seeds, triplet_idx)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.pair is not None:
            ema_update(self.pair)
        if self.queue is not None and self._pending_keys is not None:
            queue_push(self.queue, self._pending_keys)
        return float(loss.detach())


def train(cfg: TrainConfig, records: Sequence[ImageRecord], enc_cfg: EncoderConfig,
          progress: bool = False) -> tuple[Encoder, RunManifest]:
    """Train ``cfg.method`` on ``records``; returns the online encoder and its manifest."""
    if not records:
        raise ValueError("training set is empty")
    cfg.validate()
    enc_cfg.validate()
    groups = [r.group_id for r in records]
    if cfg.method == "triplet" and any(g is None for g in groups):
        raise ValueError("triplet training needs a group_id on every record")
    torch.use_deterministic_algorithms(True)
    start = time.perf_counter()
    trainer = Trainer(cfg, enc_cfg)
    crops = [np.ascontiguousarray(crop_primary(r)) for r in records]
    losses = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(_seed(cfg.seed, epoch))
        step_losses = []
        if cfg.method == "triplet":
            trips = _triplets(groups, rng)
            if not trips:
                raise ValueError("no valid triplets: need groups with >= 2 members and >= 2 groups")
            order = rng.permutation(len(trips))
            for s in range(0, len(order), cfg.batch_size):
                batch = [trips[i] for i in order[s:s + cfg.batch_size]]
                used = sorted({i for t in batch for i in t})
                local = {j: n for n, j in enumerate(used)}
                idx = [(local[a], local[p], local[n]) for a, p, n in batch]
                step_losses.append(trainer.step([crops[j] for j in used], None, idx))
        else:
            order = rng.permutation(len(crops))
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                seeds = [(_seed(cfg.seed, epoch, i, 0), _seed(cfg.seed, epoch, i, 1)) for i in idx]
                step_losses.append(trainer.step([crops[i] for i in idx], seeds))
        losses.append(float(np.mean(step_losses)))
        if progress:
            log.info("%s epoch %d/%d loss %.4f", cfg.method, epoch + 1, cfg.epochs, losses[-1])
    manifest = RunManifest(
        train_config=asdict(cfg),
        encoder_config=asdict(enc_cfg),
        seed=cfg.seed,
        n_train=len(records),
        epoch_losses=losses,
        wall_time_s=time.perf_counter() - start,
        pretrained=enc_cfg.pretrained,
        versions={"torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version()},
    )
    trainer.encoder.eval()
    return trainer.encoder, manifest
