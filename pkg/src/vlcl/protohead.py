"""Class prototypes, the prototypical meta loss and nearest-prototype classification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingError


@dataclass(frozen=True)
class SimilarityMetric:
    kind: str = "neg_sq_euclidean"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("neg_sq_euclidean", "cosine"):
            raise ConfigError(f"unknown similarity {self.kind!r}")
        if not self.scale > 0:
            raise ConfigError("similarity scale must be > 0")

    def __call__(self, queries: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        """``(M, D) x (N, D) -> (M, N)`` similarity matrix."""
        if self.kind == "cosine":
            sims = F.normalize(queries, dim=-1) @ F.normalize(prototypes, dim=-1).T
        else:
            diff = queries[:, None, :] - prototypes[None, :, :]
            sims = -(diff * diff).sum(-1)
        return self.scale * sims


class Prototypes(NamedTuple):
    vectors: torch.Tensor
    n_way: int


class Classification(NamedTuple):
    predictions: torch.Tensor
    scores: torch.Tensor


def compute_prototypes(support_features: torch.Tensor, support_labels) -> Prototypes:
    """Mean support feature per episode label; every label must have the same count K."""
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    n_way = int(labels.max()) + 1
    counts = torch.bincount(labels, minlength=n_way)
    k = int(counts[0])
    if k == 0 or bool((counts != k).any()):
        raise ConfigError(f"every class needs the same number of support features, got {counts.tolist()}")
    one_hot = F.one_hot(labels, n_way).to(support_features.dtype)
    return Prototypes(one_hot.T @ support_features / k, n_way)


def meta_loss(query_features: torch.Tensor, query_labels, protos: Prototypes,
              sim: SimilarityMetric = SimilarityMetric()) -> torch.Tensor:
    """Mean query cross-entropy of the softmax over prototype similarities."""
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    if bool(torch.isnan(query_features).any()) or bool(torch.isnan(protos.vectors).any()):
        raise TrainingError("NaN in meta-loss inputs")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= protos.n_way):
        raise ConfigError("query labels outside [0, n_way)")
    logits = sim(query_features, protos.vectors)
    return F.cross_entropy(logits, labels)


def classify(query_features: torch.Tensor, protos: Prototypes,
             sim: SimilarityMetric = SimilarityMetric()) -> Classification:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    scores = sim(query_features, protos.vectors)
    return Classification(scores.argmax(dim=1), scores)
