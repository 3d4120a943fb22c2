"""Negative-key FIFO queue and the momentum-contrast (InfoNCE) loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.07
    queue_capacity: int = 1024
    include_positive_in_denominator: bool = True
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")


class NegativeQueue:
    """Ring buffer of unit-norm key embeddings.

    ``contents()`` returns the stored rows oldest-first.  Rows are detached copies, so
    nothing in the queue carries autograd history.
    """

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.head = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    def contents(self) -> torch.Tensor:
        if self.fill < self.capacity:
            return self.buffer[: self.fill]
        return torch.cat([self.buffer[self.head:], self.buffer[: self.head]])

    def snapshot(self) -> torch.Tensor:
        return self.contents().clone()

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> "NegativeQueue":
        keys = keys.detach()
        b = keys.shape[0]
        if b > self.capacity:
            raise ConfigError(f"cannot enqueue {b} keys into a queue of capacity {self.capacity}")
        if b == 0:
            return self
        if keys.shape[1] != self.dim:
            raise ConfigError(f"key width {keys.shape[1]} != queue width {self.dim}")
        idx = (self.head + torch.arange(b)) % self.capacity
        self.buffer[idx] = keys.to(self.buffer.dtype)
        self.head = (self.head + b) % self.capacity
        self.fill = min(self.capacity, self.fill + b)
        return self

    def state_dict(self) -> dict:
        return {"buffer": self.buffer.clone(), "head": self.head, "fill": self.fill}

    @classmethod
    def from_state(cls, buffer: torch.Tensor, head: int, fill: int) -> "NegativeQueue":
        q = cls(buffer.shape[0], buffer.shape[1], dtype=buffer.dtype)
        q.buffer = buffer.clone()
        q.head, q.fill = int(head), int(fill)
        return q


_warned_empty = False


def contrastive_loss(q_emb: torch.Tensor, k_emb: torch.Tensor, queue, cfg: ContrastConfig) -> torch.Tensor:
    """Sum (or mean, per ``cfg.reduction``) over the batch of -log softmax of the positive logit.

    Logits per row are ``[q.k, q.n_1, ..., q.n_r] / T`` with negatives taken from the
    queue (a :class:`NegativeQueue` or an ``(r, P)`` tensor).  The queue never receives
    gradient.  ``k_emb`` is used as given: callers detach the momentum weights, but a
    key may still depend on the view-module parameters through its input view.
    """
    global _warned_empty
    negatives = queue.contents() if isinstance(queue, NegativeQueue) else queue
    negatives = negatives.detach()
    t = cfg.temperature
    pos = (q_emb * k_emb).sum(-1, keepdim=True) / t
    neg = q_emb @ negatives.T / t
    if negatives.shape[0] == 0:
        if not _warned_empty:
            log.warning("negative queue is empty; contrastive loss uses the positive only")
            _warned_empty = True
        if not cfg.include_positive_in_denominator:
            raise ConfigError("contrastive loss without the positive needs a non-empty queue")
    if cfg.include_positive_in_denominator:
        per_sample = -F.log_softmax(torch.cat([pos, neg], dim=1), dim=1)[:, 0]
    else:
        per_sample = torch.logsumexp(neg, dim=1) - pos[:, 0]
    return per_sample.sum() if cfg.reduction == "sum" else per_sample.mean()
