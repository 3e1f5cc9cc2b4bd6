"""Cluster quality against ground-truth color-variant groups.

CGacc here is the purity of predicted clusters with at least two members:
the fraction of such clusters whose members all carry the same ground-truth
group. That reading is a reconstruction; the business metric it stands in
for is only described as precision-like.

Noise labels (-1) count as singletons everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .clustering import ClusterAssignment


def _singletonize(labels: Sequence) -> list:
    out = []
    for i, lab in enumerate(labels):
        if isinstance(lab, (int, np.integer)) and lab < 0:
            out.append(("noise", i))
        else:
            out.append(lab)
    return out


def _pair_counts(truth: Sequence, pred: Sequence):
    if len(truth) != len(pred):
        raise ValueError(f"truth has {len(truth)} labels, prediction has {len(pred)}")
    t = np.unique(np.array([str(x) for x in _singletonize(truth)]), return_inverse=True)[1]
    p = np.unique(np.array([str(x) for x in _singletonize(pred)]), return_inverse=True)[1]
    table = np.zeros((t.max() + 1, p.max() + 1), dtype=np.int64) if len(t) else np.zeros((0, 0))
    np.add.at(table, (t, p), 1)

    def comb2(x):
        return (x * (x - 1) // 2).sum()

    same_both = int(comb2(table))
    same_truth = int(comb2(table.sum(axis=1)))
    same_pred = int(comb2(table.sum(axis=0)))
    return same_both, same_truth, same_pred, len(t) * (len(t) - 1) // 2


def ari(truth: Sequence, pred: Sequence) -> float:
    """Adjusted Rand index from the contingency table (unclamped)."""
    if len(truth) < 2:
        raise ValueError("ARI needs at least two items")
    tp, st, sp, total = _pair_counts(truth, pred)
    expected = st * sp / total
    max_index = 0.5 * (st + sp)
    if max_index == expected:
        # both partitions are all-singletons or both one block
        return 1.0 if _same_partition(truth, pred) else 0.0
    return (tp - expected) / (max_index - expected)


def fms(truth: Sequence, pred: Sequence) -> float:
    """Fowlkes-Mallows: TP / sqrt((TP + FP)(TP + FN)) over co-clustered pairs."""
    tp, st, sp, _ = _pair_counts(truth, pred)
    if st == 0 or sp == 0:
        return 0.0
    return tp / math.sqrt(st * sp)


def cscore(ari_value: float, fms_value: float) -> float:
    """Harmonic mean of ARI and FMS; 0 when both are 0."""
    if ari_value < 0 or fms_value < 0:
        raise ValueError("cscore inputs must be non-negative")
    if ari_value + fms_value == 0:
        return 0.0
    return 2 * ari_value * fms_value / (ari_value + fms_value)


def _same_partition(a: Sequence, b: Sequence) -> bool:
    return sorted(_blocks(a)) == sorted(_blocks(b))


def _blocks(labels):
    groups = {}
    for i, lab in enumerate(_singletonize(labels)):
        groups.setdefault(str(lab), []).append(i)
    return [tuple(v) for v in groups.values()]


def multi_clusters(pred: Sequence) -> list:
    return [blk for blk in _blocks(pred) if len(blk) >= 2]


def cgacc(truth: Sequence, pred: Sequence) -> float:
    """Share of predicted clusters (size >= 2) that are pure; 0 if there are none."""
    if len(truth) != len(pred):
        raise ValueError(f"truth has {len(truth)} labels, prediction has {len(pred)}")
    blocks = multi_clusters(pred)
    if not blocks:
        return 0.0
    pure = sum(1 for blk in blocks if len({truth[i] for i in blk}) == 1)
    return pure / len(blocks)


@dataclass
class EvalReport:
    cgacc: float
    ari: float
    fms: float
    cscore: float
    n_predicted_clusters: int
    n_true_groups: int
    n_multi_clusters: int
    ari_raw: float
    groups_detected: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True)


def align(truth: Mapping[str, str], assignment: ClusterAssignment) -> tuple[list, list]:
    missing = [rid for rid in assignment.ids if rid not in truth]
    if missing:
        raise ValueError(f"no ground truth for ids: {', '.join(missing[:5])}")
    if len(truth) != len(assignment.ids):
        raise ValueError(f"{len(truth)} ground-truth ids but {len(assignment.ids)} assigned")
    return [truth[rid] for rid in assignment.ids], list(assignment.labels)


def evaluate(truth: Mapping[str, str], assignment: ClusterAssignment) -> EvalReport:
    t, p = align(truth, assignment)
    raw = ari(t, p)
    a = min(max(raw, 0.0), 1.0)
    f = fms(t, p)
    blocks = multi_clusters(p)
    return EvalReport(
        cgacc=cgacc(t, p),
        ari=a,
        fms=f,
        cscore=cscore(a, f),
        n_predicted_clusters=len(_blocks(p)),
        n_true_groups=len(set(t)),
        n_multi_clusters=len(blocks),
        ari_raw=raw,
        groups_detected=bool(blocks),
    )


METRIC_ROWS = ("CGacc", "ARI", "FMS", "CScore")


def format_table(columns: Mapping[str, EvalReport], dataset: str = "synthetic") -> str:
    """Dataset / Metric rows by method columns, one block per dataset."""
    names = list(columns)
    width = max([len("CScore"), 7] + [len(n) for n in names]) + 2
    head = f"{'Dataset':<12}{'Metric':<8}" + "".join(f"{n:>{width}}" for n in names)
    lines = [head, "-" * len(head)]
    for i, metric in enumerate(METRIC_ROWS):
        label = dataset if i == 0 else ""
        cells = []
        for n in names:
            r = columns[n]
            v = {"CGacc": r.cgacc, "ARI": r.ari, "FMS": r.fms, "CScore": r.cscore}[metric]
            cells.append(f"{v:>{width}.3f}")
        lines.append(f"{label:<12}{metric:<8}" + "".join(cells))
    return "\n".join(lines)
