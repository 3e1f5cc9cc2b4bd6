"""Command-line entry point: ``colorvar <verb> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import StageError


def _fail(stage: str, exc: BaseException) -> int:
    print(f"colorvar: [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


def cmd_generate(args) -> int:
    from .dataset import SyntheticSpec, generate_synthetic, write_manifest

    spec = SyntheticSpec(n_styles=args.styles, variants_per_style=args.variants, canvas=args.canvas,
                         n_eval_styles=args.eval_styles, seed=args.seed,
                         hue_set=[float(h) for h in args.hues.split(",")] if args.hues else None)
    path = write_manifest(generate_synthetic(spec), args.out)
    print(path)
    return 0


def _config(args):
    from .experiment import load_config

    return load_config(args.config).with_overrides(args.method, args.seed, args.out)


def cmd_train(args) -> int:
    from .experiment import load_records
    from .dataset import split_records
    from .trainers import save_checkpoint, train

    cfg = _config(args)
    cfg.validate()
    records = split_records(load_records(cfg), "train")
    encoder, manifest = train(cfg.train, records, cfg.encoder, progress=True)
    path = Path(cfg.out) / "checkpoint.pt"
    save_checkpoint(encoder, manifest, path)
    print(path)
    return 0


def cmd_embed(args) -> int:
    from .dataset import load_manifest, split_records
    from .model import embed_dataset, save_embeddings
    from .trainers import load_checkpoint

    encoder = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    if args.split != "all":
        records = split_records(records, args.split)
    emb = embed_dataset(encoder, records, normalize=not args.no_normalize, slice_mode=args.slice_mode)
    ids_path, _ = save_embeddings(emb, args.out)
    print(ids_path)
    return 0


def cmd_cluster(args) -> int:
    from .clustering import cluster, save_assignment
    from .model import load_embeddings

    assignment = cluster(load_embeddings(args.embeddings), args.algorithm, args.value)
    print(save_assignment(assignment, args.out))
    return 0


def cmd_evaluate(args) -> int:
    from .clustering import ClusterAssignment
    from .dataset import load_manifest
    from .experiment import read_truth, truth_of
    from .metrics import evaluate

    assignment = ClusterAssignment.load_jsonl(args.assignment)
    if args.truth:
        truth = read_truth(args.truth)
    else:
        ids = set(assignment.ids)
        truth = truth_of([r for r in load_manifest(args.manifest) if r.id in ids])
    text = evaluate(truth, assignment).to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_run(args) -> int:
    from .experiment import run_experiment

    result = run_experiment(_config(args), progress=True)
    print(result.best_json(), end="")
    return 0


def cmd_compare(args) -> int:
    from .experiment import compare_methods, load_config

    configs = []
    for i, path in enumerate(args.configs):
        cfg = load_config(path).with_overrides(seed=args.seed)
        configs.append(cfg.with_overrides(out=str(Path(args.out) / f"{i:02d}_{cfg.label.replace('/', '_')}")))
    table, _ = compare_methods(configs, args.out, progress=True)
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colorvar", description="Color-variant embedding and clustering runs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write a synthetic manifest + images")
    g.add_argument("--out", required=True)
    g.add_argument("--styles", type=int, default=20)
    g.add_argument("--variants", type=int, default=4)
    g.add_argument("--canvas", type=int, default=96)
    g.add_argument("--eval-styles", type=int, default=0)
    g.add_argument("--hues", help="comma-separated hue offsets in degrees")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate, stage="data")

    for verb, fn, stage, help_ in (("train", cmd_train, "train", "train an encoder from a config"),
                                   ("run", cmd_run, "run", "end-to-end run from a config")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("config")
        s.add_argument("--method")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.set_defaults(fn=fn, stage=stage)

    e = sub.add_parser("embed", help="export embeddings for a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "eval", "all"), default="all")
    e.add_argument("--slice-mode", choices=("both", "horiz", "vert"))
    e.add_argument("--no-normalize", action="store_true")
    e.add_argument("--out", required=True, help="output stem")
    e.set_defaults(fn=cmd_embed, stage="embed")

    c = sub.add_parser("cluster", help="cluster an embedding export")
    c.add_argument("--embeddings", required=True, help="embedding stem")
    c.add_argument("--algorithm", default="agglomerative_ward",
                   choices=("agglomerative_ward", "dbscan", "affinity_propagation"))
    c.add_argument("--value", type=float, required=True, help="threshold, eps or damping")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_cluster, stage="cluster")

    v = sub.add_parser("evaluate", help="score an assignment against ground truth")
    v.add_argument("--assignment", required=True)
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--truth", help="truth.jsonl from a run directory")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_evaluate, stage="evaluate")

    m = sub.add_parser("compare", help="run several configs and tabulate them")
    m.add_argument("configs", nargs="+")
    m.add_argument("--seed", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_compare, stage="compare")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except StageError as exc:
        return _fail(exc.stage, exc.cause)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a tagged exit
        return _fail(args.stage, exc)


if __name__ == "__main__":
    sys.exit(main())
