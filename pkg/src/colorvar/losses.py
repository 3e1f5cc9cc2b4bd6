"""Training objectives. All reduce over the batch with the arithmetic mean."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def _check_rows(name: str, x: torch.Tensor) -> None:
    if x.ndim != 2:
        raise ValueError(f"{name}: expected a BxD matrix, got shape {tuple(x.shape)}")


def _nonzero_rows(name: str, x: torch.Tensor) -> None:
    if (x.norm(dim=1) == 0).any():
        raise ValueError(f"{name}: zero-norm row")


def triplet_loss(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor,
                 margin: float = 0.2) -> torch.Tensor:
    """mean(max(0, margin + |a - p|^2 - |a - n|^2))."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    for name, x in (("anchors", anchors), ("positives", positives), ("negatives", negatives)):
        _check_rows(name, x)
    if not (anchors.shape == positives.shape == negatives.shape):
        raise ValueError(
            f"triplet shapes differ: {tuple(anchors.shape)}, {tuple(positives.shape)}, "
            f"{tuple(negatives.shape)}"
        )
    d_pos = (anchors - positives).pow(2).sum(dim=1)
    d_neg = (anchors - negatives).pow(2).sum(dim=1)
    return F.relu(margin + d_pos - d_neg).mean()


def ntxent_loss(queries: torch.Tensor, positive_keys: torch.Tensor,
                negative_keys: torch.Tensor | None = None, temperature: float = 0.05) -> torch.Tensor:
    """NT-Xent against one positive key per query and a shared pool of K negatives.

    Rows are l2-normalised here, so the logits are cosine similarities / temperature.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_rows("queries", queries)
    _check_rows("positive_keys", positive_keys)
    if queries.shape != positive_keys.shape:
        raise ValueError("queries and positive_keys must have the same shape")
    _nonzero_rows("queries", queries)
    _nonzero_rows("positive_keys", positive_keys)
    q = F.normalize(queries, dim=1)
    k = F.normalize(positive_keys, dim=1)
    pos = (q * k).sum(dim=1, keepdim=True) / temperature
    if negative_keys is None or negative_keys.shape[0] == 0:
        logits = pos
    else:
        _check_rows("negative_keys", negative_keys)
        if negative_keys.shape[1] != q.shape[1]:
            raise ValueError("negative_keys dimension does not match queries")
        _nonzero_rows("negative_keys", negative_keys)
        neg = q @ F.normalize(negative_keys, dim=1).T / temperature
        logits = torch.cat([pos, neg], dim=1)
    # logsumexp subtracts the row max before exponentiating
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def negcos_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity with a stop-gradient on ``target``."""
    _check_rows("predicted", predicted)
    _check_rows("target", target)
    if predicted.shape != target.shape:
        raise ValueError("predicted and target must have the same shape")
    target = target.detach()
    _nonzero_rows("predicted", predicted)
    _nonzero_rows("target", target)
    p = F.normalize(predicted, dim=1)
    z = F.normalize(target, dim=1)
    return -(p * z).sum(dim=1).mean()
