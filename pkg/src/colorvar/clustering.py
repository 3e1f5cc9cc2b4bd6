"""Stage-3 clustering: Ward agglomerative, DBSCAN and affinity propagation.

All functions take an :class:`EmbeddingMatrix` (or a plain NxD array) and
return a :class:`ClusterAssignment` whose labels are renumbered 0, 1, ... in
order of first appearance. DBSCAN noise keeps the label -1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import cdist
from sklearn.cluster import DBSCAN

from .model import EmbeddingMatrix

Embeddings = Union[EmbeddingMatrix, np.ndarray]


@dataclass
class ClusterAssignment:
    ids: list
    labels: list
    algorithm: str
    params: dict = field(default_factory=dict)
    converged: bool = True

    def __post_init__(self):
        if len(self.ids) != len(self.labels):
            raise ValueError("ids and labels are misaligned")

    @property
    def n_clusters(self) -> int:
        return len({lab for lab in self.labels if lab >= 0})

    def clusters(self) -> dict:
        out = {}
        for rid, lab in zip(self.ids, self.labels):
            out.setdefault(lab, []).append(rid)
        return out

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rid, lab in zip(self.ids, self.labels):
                fh.write(json.dumps({"id": rid, "cluster": int(lab)}) + "\n")

    @classmethod
    def load_jsonl(cls, path, algorithm: str = "unknown") -> "ClusterAssignment":
        ids, labels = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    ids.append(row["id"])
                    labels.append(int(row["cluster"]))
        return cls(ids, labels, algorithm)


def relabel(labels: Sequence[int]) -> list:
    """Renumber non-negative labels by first appearance; -1 stays -1."""
    mapping = {}
    out = []
    for lab in labels:
        lab = int(lab)
        if lab < 0:
            out.append(-1)
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out.append(mapping[lab])
    return out


def _unpack(emb: Embeddings):
    if isinstance(emb, EmbeddingMatrix):
        ids, x = list(emb.ids), emb.values
    else:
        x = np.asarray(emb, dtype=np.float64)
        ids = [str(i) for i in range(x.shape[0])]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("clustering needs a non-empty NxD matrix")
    return ids, np.asarray(x, dtype=np.float64)


def agglomerative_ward(emb: Embeddings, distance_threshold: float) -> ClusterAssignment:
    """Ward merging until the next merge distance would exceed the threshold."""
    if distance_threshold <= 0:
        raise ValueError("distance_threshold must be positive")
    ids, x = _unpack(emb)
    params = {"distance_threshold": float(distance_threshold)}
    if len(ids) == 1:
        return ClusterAssignment(ids, [0], "agglomerative_ward", params)
    z = linkage(x, method="ward")
    labels = fcluster(z, t=distance_threshold, criterion="distance")
    return ClusterAssignment(ids, relabel(labels), "agglomerative_ward", params)


def dbscan(emb: Embeddings, eps: float, min_pts: int = 2) -> ClusterAssignment:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    ids, x = _unpack(emb)
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="euclidean").fit_predict(x)
    return ClusterAssignment(ids, relabel(labels), "dbscan", {"eps": float(eps), "min_pts": int(min_pts)})


def affinity_propagation(emb: Embeddings, damping: float = 0.5, max_iter: int = 200,
                         convergence_iter: int = 15, preference=None) -> ClusterAssignment:
    """Exemplar message passing on negative squared Euclidean similarities.

    The default preference is the median off-diagonal similarity. If the
    exemplar set does not settle within ``max_iter`` iterations, the labels
    from the last iteration are returned with ``converged=False``.
    """
    if not 0.5 <= damping < 1.0:
        raise ValueError("damping must lie in [0.5, 1)")
    ids, x = _unpack(emb)
    n = len(ids)
    s = -cdist(x, x, "sqeuclidean")
    off = s[~np.eye(n, dtype=bool)]
    pref = float(np.median(off)) if (preference is None and n > 1) else float(preference or 0.0)
    params = {"damping": float(damping), "max_iter": int(max_iter), "preference": pref}
    if n == 1 or np.all(off == off[0]):
        # identical points (or a single one): one exemplar, the lowest index
        return ClusterAssignment(ids, [0] * n, "affinity_propagation", params)
    s[np.diag_indices(n)] = pref
    a = np.zeros((n, n))
    r = np.zeros((n, n))
    rows = np.arange(n)
    history = np.zeros((n, convergence_iter), dtype=bool)
    converged = False
    for it in range(max_iter):
        tmp = a + s
        best = np.argmax(tmp, axis=1)
        first = tmp[rows, best]
        tmp[rows, best] = -np.inf
        second = np.max(tmp, axis=1)
        r_new = s - first[:, None]
        r_new[rows, best] = s[rows, best] - second
        r = damping * r + (1 - damping) * r_new

        rp = np.maximum(r, 0)
        rp[rows, rows] = r[rows, rows]
        a_new = rp.sum(axis=0)[None, :] - rp
        diag = a_new[rows, rows].copy()
        a_new = np.minimum(a_new, 0)
        a_new[rows, rows] = diag
        a = damping * a + (1 - damping) * a_new

        exemplar = (np.diag(a) + np.diag(r)) > 0
        history[:, it % convergence_iter] = exemplar
        if it >= convergence_iter:
            stable = np.all(history == history[:, :1], axis=1).all()
            if stable and exemplar.any():
                converged = True
                break
    exemplars = np.flatnonzero((np.diag(a) + np.diag(r)) > 0)
    if exemplars.size == 0:
        labels = np.argmax(a + r, axis=1)
        return ClusterAssignment(ids, relabel(labels), "affinity_propagation", params, converged=False)
    labels = _assign(s, exemplars)
    # move each exemplar to the member with the highest total similarity
    refined = []
    for k in range(exemplars.size):
        members = np.flatnonzero(labels == k)
        refined.append(members[np.argmax(s[np.ix_(members, members)].sum(axis=0))])
    labels = _assign(s, np.array(refined))
    return ClusterAssignment(ids, relabel(labels), "affinity_propagation", params, converged=converged)


def _assign(s, exemplars):
    labels = np.argmax(s[:, exemplars], axis=1)
    labels[exemplars] = np.arange(exemplars.size)
    return labels


ALGORITHMS = {
    "agglomerative_ward": (agglomerative_ward, "distance_threshold"),
    "dbscan": (dbscan, "eps"),
    "affinity_propagation": (affinity_propagation, "damping"),
}


def cluster(emb: Embeddings, algorithm: str, value: float, **kwargs) -> ClusterAssignment:
    """Dispatch on algorithm name with its swept parameter as ``value``."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown clustering algorithm {algorithm!r}")
    fn, key = ALGORITHMS[algorithm]
    return fn(emb, **{key: value}, **kwargs)


def save_assignment(assignment: ClusterAssignment, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    assignment.save_jsonl(path)
    return path
