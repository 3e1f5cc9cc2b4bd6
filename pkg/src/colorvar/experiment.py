"""End-to-end runs: data -> train -> embed -> cluster sweep -> evaluate.

A run directory holds everything needed to recompute its numbers offline::

    config.json              resolved config echo
    truth.jsonl              {"id", "group_id"} for the evaluated records
    checkpoint.pt            encoder weights (+ checkpoint.manifest.json)
    embeddings.ids.txt/.f32  exported embedding matrix
    sweep/NNN.assign.jsonl   assignment per sweep point
    sweep/NNN.report.json    EvalReport per sweep point
    best_report.json         selected sweep point (no timing fields)
    report.json              best report + sweep summary + config echo
    clusters/*.png           contact sheet per predicted cluster
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .clustering import ALGORITHMS, ClusterAssignment, cluster, save_assignment
from .dataset import (ImageRecord, SyntheticSpec, crop_primary, generate_synthetic,
                      load_manifest, split_records)
from .metrics import EvalReport, evaluate, format_table
from .model import EncoderConfig, embed_dataset, save_embeddings
from .trainers import (DEFAULT_BATCH, SLICE_MODE, RunManifest, TrainConfig, default_encoder_config,
                       save_checkpoint, train)

log = logging.getLogger(__name__)

DEFAULT_SWEEP = tuple(float(f"{t:.6g}") for t in np.geomspace(0.01, 100.0, 81))
STAGES = ("config", "data", "train", "embed", "cluster", "evaluate", "report")


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    train: TrainConfig
    encoder: EncoderConfig
    synthetic: Optional[SyntheticSpec] = None
    manifest: Optional[str] = None
    algorithm: str = "agglomerative_ward"
    sweep: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    normalize: bool = True
    out: str = "runs/default"
    seed: int = 0
    name: Optional[str] = None
    # None: sum-pooled slices for the slicing methods, whole crop otherwise
    slice_inference: Optional[bool] = None

    def __post_init__(self):
        self.train.seed = self.seed

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.train.method + ("" if self.normalize else "/raw")

    @property
    def slice_mode(self) -> Optional[str]:
        use = self.slice_inference
        if use is None:
            use = self.train.method in SLICE_MODE
        if not use:
            return None
        return SLICE_MODE.get(self.train.method, "both")

    def validate(self) -> None:
        if (self.synthetic is None) == (self.manifest is None):
            raise ValueError("dataset: give exactly one of synthetic or manifest")
        if not self.sweep:
            raise ValueError("sweep: grid must be non-empty")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: unknown {self.algorithm!r}")
        if self.synthetic is not None:
            self.synthetic.validate()
        self.train.validate()
        self.encoder.validate()

    def to_dict(self) -> dict:
        d = {
            "train": asdict(self.train),
            "encoder": asdict(self.encoder),
            "algorithm": self.algorithm,
            "sweep": [float(v) for v in self.sweep],
            "normalize": self.normalize,
            "out": str(self.out),
            "seed": self.seed,
            "name": self.name,
            "slice_inference": self.slice_inference,
        }
        if self.synthetic is not None:
            syn = asdict(self.synthetic)
            syn["pattern_families"] = list(syn["pattern_families"])
            d["synthetic"] = syn
        else:
            d["manifest"] = str(self.manifest)
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        tcfg = TrainConfig(**d.pop("train", {}))
        enc = d.pop("encoder", None)
        if enc is None:
            ecfg = default_encoder_config(tcfg.method)
        else:
            enc = dict(enc)
            ecfg = default_encoder_config(tcfg.method, enc.pop("backbone", "resnet34"), **enc)
        syn = d.pop("synthetic", None)
        manifest = d.pop("manifest", None)
        if manifest is not None and base_dir is not None and not Path(manifest).is_absolute():
            manifest = str(base_dir / manifest)
        if isinstance(d.get("sweep"), dict):
            d["sweep"] = _expand_grid(d["sweep"])
        return cls(train=tcfg, encoder=ecfg,
                   synthetic=SyntheticSpec(**syn) if syn is not None else None,
                   manifest=manifest, **d)

    def with_overrides(self, method: Optional[str] = None, seed: Optional[int] = None,
                       out: Optional[str] = None) -> "ExperimentConfig":
        cfg = self
        if method is not None and method != cfg.train.method:
            t = asdict(cfg.train)
            if t["batch_size"] == DEFAULT_BATCH.get(cfg.train.method):
                t["batch_size"] = None  # follow the new method's default
            t["method"] = method
            enc = asdict(cfg.encoder)
            keep = {k: enc[k] for k in ("backbone", "input_side", "embed_dim", "width", "norm", "pretrained")}
            new_enc = default_encoder_config(method, **keep)
            if new_enc.head != "none" and cfg.encoder.head != "none":
                new_enc.head_dims = _rescale_head(new_enc.head, cfg.encoder.head_dims)
            cfg = replace(cfg, train=TrainConfig(**t), encoder=new_enc)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out is not None:
            cfg = replace(cfg, out=out)
        cfg.train.seed = cfg.seed
        return cfg


def _rescale_head(head: str, dims: Sequence[int]) -> list:
    hidden, out = int(dims[0]), int(dims[1])
    return [hidden, out] if head == "projector_mlp" else [hidden, out, hidden]


def _expand_grid(spec: dict) -> list:
    """{"geomspace": [lo, hi, n]} or {"linspace": [lo, hi, n]} -> list of floats."""
    if len(spec) != 1:
        raise ValueError("sweep: grid spec takes exactly one of geomspace / linspace")
    (kind, (lo, hi, n)), = spec.items()
    if kind not in ("geomspace", "linspace"):
        raise ValueError(f"sweep: unknown grid kind {kind!r}")
    return [float(f"{v:.6g}") for v in getattr(np, kind)(lo, hi, int(n))]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        import tomli

        data = tomli.loads(raw.decode("utf-8"))
    else:
        data = json.loads(raw)
    return ExperimentConfig.from_dict(data, base_dir=path.parent)


def desk_config(method: str, out: str = "runs/desk", seed: int = 0, epochs: int = 30,
                n_styles: int = 20, n_eval_styles: int = 10, **overrides) -> ExperimentConfig:
    """Small-CPU setting: tiny_cnn at 64 px with scaled-down heads and queue."""
    head = default_encoder_config(method, "tiny_cnn")
    dims = {"projector_mlp": [256, 64], "projector_plus_predictor": [256, 64, 256]}.get(head.head, [])
    head.head_dims = dims
    tcfg = TrainConfig(method=method, epochs=epochs, batch_size=8, lr=0.05, queue_size=16, ema=0.99)
    cfg = ExperimentConfig(
        train=tcfg,
        encoder=head,
        synthetic=SyntheticSpec(n_styles=n_styles, variants_per_style=4, canvas=96,
                                n_eval_styles=n_eval_styles, seed=0),
        out=out,
        seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


# -- stages ----------------------------------------------------------------

def load_records(cfg: ExperimentConfig) -> list:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    return load_manifest(cfg.manifest)


def eval_records(records: Sequence[ImageRecord]) -> tuple[list, str]:
    """Held-out split if there is one, otherwise the training records themselves."""
    ev = split_records(records, "eval")
    if ev:
        return ev, "eval"
    return split_records(records, "train"), "train"


def truth_of(records: Sequence[ImageRecord]) -> dict:
    missing = [r.id for r in records if r.group_id is None]
    if missing:
        raise ValueError(f"evaluation needs group_id; missing for {', '.join(missing[:5])}")
    return {r.id: r.group_id for r in records}


def write_truth(truth: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, gid in truth.items():
            fh.write(json.dumps({"id": rid, "group_id": gid}) + "\n")


def read_truth(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["id"]] = row["group_id"]
    return out


def select_best(points: Sequence[tuple[float, EvalReport]]) -> int:
    """Index of the best sweep point: CScore, then ARI, then the smaller parameter."""
    return max(range(len(points)), key=lambda i: (points[i][1].cscore, points[i][1].ari, -points[i][0]))


def sweep(emb, truth: dict, algorithm: str, grid: Sequence[float]) -> list:
    return [(float(v), a, evaluate(truth, a)) for v in grid for a in [cluster(emb, algorithm, v)]]


def contact_sheet(rasters: Sequence[np.ndarray], thumb: int = 64, cols: int = 8) -> Image.Image:
    cols = max(1, min(cols, len(rasters)))
    rows = (len(rasters) + cols - 1) // cols
    pad = 4
    sheet = Image.new("RGB", (cols * (thumb + pad) + pad, rows * (thumb + pad) + pad), (255, 255, 255))
    for i, r in enumerate(rasters):
        im = Image.fromarray(np.ascontiguousarray(r)).resize((thumb, thumb), Image.BILINEAR)
        sheet.paste(im, (pad + (i % cols) * (thumb + pad), pad + (i // cols) * (thumb + pad)))
    return sheet


def write_contact_sheets(assignment: ClusterAssignment, records: Sequence[ImageRecord], out_dir) -> list:
    """One sheet per multi-member cluster; singletons and noise share one sheet."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.id: r for r in records}
    paths, loose = [], []
    for lab, ids in sorted(assignment.clusters().items()):
        if lab < 0 or len(ids) < 2:
            loose.extend(ids)
            continue
        p = out_dir / f"cluster_{lab:03d}.png"
        contact_sheet([crop_primary(by_id[i]) for i in ids]).save(p)
        paths.append(p)
    if loose:
        p = out_dir / "singletons.png"
        contact_sheet([crop_primary(by_id[i]) for i in loose]).save(p)
        paths.append(p)
    return paths


@dataclass
class RunResult:
    config: ExperimentConfig
    best: EvalReport
    best_value: float
    eval_split: str
    eval_ids: list
    out: Path
    manifest: RunManifest

    def best_json(self) -> str:
        return (self.out / "best_report.json").read_text(encoding="utf-8")


def run_experiment(config, progress: bool = False) -> RunResult:
    """Run every stage of ``config`` (an ExperimentConfig or a config file path)."""
    stage = "config"
    try:
        cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
        cfg.validate()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        echo = cfg.to_dict()
        (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")

        stage = "data"
        records = load_records(cfg)
        train_set = split_records(records, "train")
        evals, split = eval_records(records)
        truth = truth_of(evals)
        write_truth(truth, out / "truth.jsonl")

        stage = "train"
        encoder, manifest = train(cfg.train, train_set, cfg.encoder, progress=progress)
        save_checkpoint(encoder, manifest, out / "checkpoint.pt")

        stage = "embed"
        emb = embed_dataset(encoder, evals, normalize=cfg.normalize, slice_mode=cfg.slice_mode)
        save_embeddings(emb, out / "embeddings")

        stage = "cluster"
        points = sweep(emb, truth, cfg.algorithm, cfg.sweep)

        stage = "evaluate"
        sweep_dir = out / "sweep"
        sweep_dir.mkdir(exist_ok=True)
        for i, (v, assignment, rep) in enumerate(points):
            save_assignment(assignment, sweep_dir / f"{i:03d}.assign.jsonl")
            (sweep_dir / f"{i:03d}.report.json").write_text(
                rep.to_json(algorithm=cfg.algorithm, value=v, seed=cfg.seed) + "\n", encoding="utf-8")
        b = select_best([(v, rep) for v, _, rep in points])
        value, assignment, best = points[b]

        stage = "report"
        save_assignment(assignment, out / "best.assign.jsonl")
        (out / "best_report.json").write_text(
            best.to_json(algorithm=cfg.algorithm, value=value, seed=cfg.seed, method=cfg.train.method,
                         normalize=cfg.normalize, eval_split=split) + "\n", encoding="utf-8")
        summary = {
            "best": {**best.to_dict(), "value": value, "sweep_index": b},
            "eval_split": split,
            "config": echo,
            "seed": cfg.seed,
            "sweep": [{"value": v, "cscore": r.cscore, "ari": r.ari, "cgacc": r.cgacc, "fms": r.fms}
                      for v, _, r in points],
        }
        (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_contact_sheets(assignment, evals, out / "clusters")
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return RunResult(cfg, best, value, split, [r.id for r in evals], out, manifest)


# -- comparisons -----------------------------------------------------------

def comparison_table(results: Sequence[RunResult], dataset: str = "synthetic") -> str:
    if len(results) < 2:
        raise ValueError("comparison needs at least two runs")
    ref = results[0]
    for r in results[1:]:
        if r.eval_ids != ref.eval_ids or r.eval_split != ref.eval_split:
            raise ValueError(f"eval split of {r.config.label!r} differs from {ref.config.label!r}")
    columns = {}
    for r in results:
        label = r.config.label
        n = 2
        while label in columns:
            label = f"{r.config.label}#{n}"
            n += 1
        columns[label] = r.best
    return format_table(columns, dataset)


def bar_chart(results: Sequence[RunResult], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ("cgacc", "ari", "fms", "cscore")
    labels = [r.config.label for r in results]
    x = np.arange(len(metrics))
    w = 0.8 / len(results)
    fig, ax = plt.subplots(figsize=(2 + 1.5 * len(metrics), 3.5))
    for i, r in enumerate(results):
        ax.bar(x + i * w - 0.4 + w / 2, [getattr(r.best, m) for m in metrics], w, label=labels[i])
    ax.set_xticks(x, ["CGacc", "ARI", "FMS", "CScore"])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def compare_methods(configs: Sequence, out_dir, dataset: str = "synthetic",
                    progress: bool = False) -> tuple[str, list]:
    """Run each config, then write ``table.txt`` and ``bars.png`` under ``out_dir``."""
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    results = [run_experiment(c, progress=progress) for c in configs]
    table = comparison_table(results, dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.txt").write_text(table + "\n", encoding="utf-8")
    bar_chart(results, out_dir / "bars.png")
    return table, results
