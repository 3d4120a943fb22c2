"""Two-stage training loop.

Stage one updates the encoder on ``meta + beta * contrastive`` while keeping the
autograd graph of the gradient.  Stage two re-evaluates the meta loss on the same
episodes at the updated encoder weights and differentiates it through that update
into the localisation nets.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .autoview import AugmentConfig, ViewConfig, ViewModule, make_views, pre_augment, random_crop_params, warp
from .contrast import ContrastConfig, NegativeQueue, contrastive_loss
from .datasets import Dataset, Episode, sample_episode
from .encoder import Encoder, EncoderConfig, EncoderState, Params, init_encoders, momentum_update, to_nchw
from .errors import ConfigError, TrainingError
from .protohead import SimilarityMetric, compute_prototypes, meta_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "epoch", "meta_loss", "con_loss", "total_loss",
                  "gamma_grad_norm", "lr", "queue_fill")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 2.0
    lr: float = 0.1
    lr_milestones: Tuple[int, ...] = (20, 40)
    lr_values: Tuple[float, ...] = (0.01, 0.001)
    eta: float = 1e-5
    epsilon: float = 0.999
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    epochs: int = 60
    iterations_per_epoch: int = 1000
    tasks_per_batch: int = 1
    n_way: int = 5
    k_shot: int = 1
    m_query_train: int = 4
    similarity: str = "neg_sq_euclidean"
    similarity_scale: float = 1.0
    grad_clip: Optional[float] = 10.0
    differentiate_momentum: bool = False
    view_mode: str = "learned"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        object.__setattr__(self, "lr_values", tuple(float(v) for v in self.lr_values))
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not self.eta >= 0:
            raise ConfigError("eta must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.nesterov and self.momentum == 0:
            raise ConfigError("nesterov requires momentum > 0")
        if len(self.lr_milestones) != len(self.lr_values):
            raise ConfigError("lr_milestones and lr_values must have equal length")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)):
            raise ConfigError("lr_milestones must be strictly increasing")
        if self.view_mode not in ("learned", "random_crop"):
            raise ConfigError("view_mode must be 'learned' or 'random_crop'")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        for name in ("epochs", "iterations_per_epoch", "tasks_per_batch", "n_way", "k_shot"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.m_query_train < 1:
            raise ConfigError("m_query_train must be >= 1")
        SimilarityMetric(self.similarity, self.similarity_scale)

    @property
    def sim(self) -> SimilarityMetric:
        return SimilarityMetric(self.similarity, self.similarity_scale)

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate: the value of the last milestone ``<= epoch``."""
    lr = cfg.lr
    for milestone, value in zip(cfg.lr_milestones, cfg.lr_values):
        if epoch >= milestone:
            lr = value
    return lr


@dataclass
class TrainState:
    encoder_state: EncoderState
    gamma1: Params
    gamma2: Params
    queue: NegativeQueue
    momentum_buffers: Optional[Params] = None
    iteration: int = 0
    epoch: int = 0
    history: List[dict] = field(default_factory=list)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    meta: torch.Tensor
    con: torch.Tensor
    keys: torch.Tensor
    theta: Params
    gamma1: Params
    gamma2: Params


@dataclass
class InnerResult:
    """Output of stage one: ``theta_next`` equals the committed weights in value and
    carries the dependence on the view-module parameters in its graph."""

    losses: LossBreakdown
    theta_next: Optional[Params]
    lr: float
    clip_coef: float
    theta_value: Params
    buffers: Dict[str, Optional[torch.Tensor]]


def _leaves(params: Params, requires_grad: bool = True) -> Params:
    return {k: v.detach().clone().requires_grad_(requires_grad) for k, v in params.items()}


def _episode_tensors(ep: Episode, dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    xs = to_nchw(torch.as_tensor(ep.support_images, dtype=dtype))
    xq = to_nchw(torch.as_tensor(ep.query_images, dtype=dtype))
    return xs, xq


class Trainer:
    """Owns the encoder/view parameters, momentum buffers, queue and rng streams."""

    def __init__(self, encoder_cfg: EncoderConfig, view_cfg: ViewConfig, contrast_cfg: ContrastConfig,
                 augment_cfg: AugmentConfig, train_cfg: TrainConfig, dataset: Optional[Dataset] = None):
        if view_cfg.image_size != encoder_cfg.image_size:
            raise ConfigError("encoder and view module image sizes differ")
        if contrast_cfg.queue_capacity < self._keys_per_iteration(train_cfg):
            raise ConfigError("queue capacity smaller than the number of keys per iteration")
        self.encoder_cfg = encoder_cfg
        self.view_cfg = view_cfg
        self.contrast_cfg = contrast_cfg
        self.augment_cfg = augment_cfg
        self.cfg = train_cfg
        self.dataset = dataset
        self.dtype = train_cfg.torch_dtype
        self.sim = train_cfg.sim

        gen = torch.Generator().manual_seed(train_cfg.seed)
        self.encoder, enc_state = init_encoders(encoder_cfg, gen, self.dtype)
        self.view_module = ViewModule(view_cfg)
        gamma1 = self.view_module.init_params(gen, self.dtype)
        gamma2 = self.view_module.init_params(gen, self.dtype)
        queue = NegativeQueue(contrast_cfg.queue_capacity, encoder_cfg.proj_dim, self.dtype)
        self.state = TrainState(enc_state, gamma1, gamma2, queue)

        seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
        self.episode_rng = np.random.default_rng(seeds[0])
        self.augment_rng = np.random.default_rng(seeds[1])

    @staticmethod
    def _keys_per_iteration(cfg: TrainConfig) -> int:
        return cfg.tasks_per_batch * cfg.n_way * (cfg.k_shot + cfg.m_query_train)

    # --- losses --------------------------------------------------------------------

    def episode_meta_loss(self, theta: Params, ep: Episode) -> torch.Tensor:
        xs, xq = _episode_tensors(ep, self.dtype)
        feats = self.encoder.encode(theta, torch.cat([xs, xq]))
        protos = compute_prototypes(feats[: len(xs)], ep.support_labels)
        return meta_loss(feats[len(xs):], ep.query_labels, protos, self.sim)

    def views(self, images: torch.Tensor, gamma1: Params, gamma2: Params):
        if self.cfg.view_mode == "random_crop":
            first = pre_augment(images, self.augment_cfg, self.augment_rng)
            second = pre_augment(images, self.augment_cfg, self.augment_rng) \
                if self.augment_cfg.per_branch else first
            vc = self.view_cfg
            p1 = random_crop_params(len(images), self.augment_rng, vc.scale_min, vc.scale_max, self.dtype)
            p2 = random_crop_params(len(images), self.augment_rng, vc.scale_min, vc.scale_max, self.dtype)
            return warp(first, p1), warp(second, p2)
        return make_views(self.view_module, gamma1, gamma2, images, self.augment_cfg, self.augment_rng)

    def total_loss(self, episodes: Sequence[Episode], negatives: Optional[torch.Tensor] = None,
                   gammas: Optional[Tuple[Params, Params]] = None) -> LossBreakdown:
        """``meta + beta * con`` averaged over tasks, at fresh leaf copies of theta/gamma.

        ``gammas`` overrides the stored view-module parameters (used by gradient checks).
        """
        st = self.state
        theta = _leaves(st.encoder_state.theta)
        g1, g2 = gammas if gammas is not None else (st.gamma1, st.gamma2)
        gamma1, gamma2 = _leaves(g1), _leaves(g2)
        omega = {k: v.detach() for k, v in st.encoder_state.omega.items()}
        if negatives is None:
            negatives = st.queue.snapshot()

        metas, cons, keys = [], [], []
        for ep in episodes:
            metas.append(self.episode_meta_loss(theta, ep))
            xs, xq = _episode_tensors(ep, self.dtype)
            v1, v2 = self.views(torch.cat([xs, xq]), gamma1, gamma2)
            q = self.encoder.embed(theta, v1)
            k = self.encoder.embed(omega, v2)
            cons.append(contrastive_loss(q, k, negatives, self.contrast_cfg))
            keys.append(k.detach())
        meta = torch.stack(metas).mean()
        con = torch.stack(cons).mean()
        total = meta + self.cfg.beta * con
        if not torch.isfinite(total):
            raise TrainingError(
                f"non-finite loss at iteration {st.iteration}: meta={meta.item()} con={con.item()}"
            )
        return LossBreakdown(total, meta, con, torch.cat(keys), theta, gamma1, gamma2)

    # --- stage one -----------------------------------------------------------------

    def stage_one(self, episodes: Sequence[Episode], gammas: Optional[Tuple[Params, Params]] = None,
                  create_graph: Optional[bool] = None) -> InnerResult:
        """Compute the stage-one update without committing it."""
        cfg, st = self.cfg, self.state
        losses = self.total_loss(episodes, gammas=gammas)
        names = list(losses.theta)
        connected = cfg.beta > 0 and cfg.view_mode == "learned"
        if create_graph is not None:
            connected = connected and create_graph
        grads = torch.autograd.grad(losses.total, [losses.theta[n] for n in names],
                                    create_graph=connected)
        grads = dict(zip(names, grads))

        with torch.no_grad():
            norm = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads.values()))
            if not torch.isfinite(norm):
                raise TrainingError(f"non-finite gradient norm at iteration {st.iteration}")
            clip_coef = 1.0
            if cfg.grad_clip is not None:
                clip_coef = min(1.0, cfg.grad_clip / (float(norm) + 1e-6))
                if clip_coef < 1.0:
                    log.debug("gradient norm %.3f clipped to %.1f", float(norm), cfg.grad_clip)

        lr = lr_schedule(st.epoch, cfg)
        theta_now = {n: t.detach() for n, t in losses.theta.items()}
        buffers, theta_next, theta_value = {}, {}, {}
        for n in names:
            g = grads[n] * clip_coef
            step, buffers[n] = self._sgd_direction(g.detach(), theta_now[n], n)
            value = theta_now[n] - lr * step
            theta_value[n] = value
            if not connected:
                theta_next[n] = value
            elif cfg.differentiate_momentum:
                diff_step, _ = self._sgd_direction(g, theta_now[n], n)
                theta_next[n] = theta_now[n] - lr * diff_step
            else:
                # value of the real update, derivative of the plain descent step
                plain = -lr * g
                theta_next[n] = value + (plain - plain.detach())
        return InnerResult(losses, theta_next, lr, clip_coef, theta_value, buffers)

    def inner_update(self, episodes: Sequence[Episode]) -> InnerResult:
        """Stage one: update theta (SGD with momentum/decay), omega and the queue.

        The returned ``theta_next`` keeps the graph back to the view-module params.
        Keys are enqueued only after the loss has been computed from the old queue.
        """
        inner = self.stage_one(episodes)
        st = self.state
        enc = EncoderState(theta=inner.theta_value, omega=st.encoder_state.omega)
        st.encoder_state = momentum_update(enc, self.cfg.epsilon)
        st.momentum_buffers = inner.buffers if self.cfg.momentum > 0 else None
        st.queue.enqueue(inner.losses.keys)
        return inner

    def _sgd_direction(self, g: torch.Tensor, theta: torch.Tensor, name: str):
        """torch.optim.SGD update direction (dampening 0); returns (direction, new buffer)."""
        cfg = self.cfg
        d = g + cfg.weight_decay * theta if cfg.weight_decay else g
        if cfg.momentum == 0:
            return d, None
        prev = None if self.state.momentum_buffers is None else self.state.momentum_buffers.get(name)
        buf = d if prev is None else cfg.momentum * prev + d
        step = d + cfg.momentum * buf if cfg.nesterov else buf
        return step, buf.detach()

    # --- stage two -----------------------------------------------------------------

    def meta_loss_at(self, theta: Params, episodes: Sequence[Episode]) -> torch.Tensor:
        return torch.stack([self.episode_meta_loss(theta, ep) for ep in episodes]).mean()

    def view_gradients(self, inner: InnerResult, episodes: Sequence[Episode]):
        """Meta loss at the updated weights and its gradient w.r.t. both localisation nets."""
        if inner.theta_next is None:
            raise TrainingError("stage two needs the retained graph from inner_update")
        loss = self.meta_loss_at(inner.theta_next, episodes)
        g1 = {k: torch.zeros_like(v) for k, v in inner.losses.gamma1.items()}
        g2 = {k: torch.zeros_like(v) for k, v in inner.losses.gamma2.items()}
        if loss.requires_grad:
            slots = [(g1, k, v) for k, v in inner.losses.gamma1.items()]
            slots += [(g2, k, v) for k, v in inner.losses.gamma2.items()]
            grads = torch.autograd.grad(loss, [v for _, _, v in slots], allow_unused=True)
            for (target, k, _), g in zip(slots, grads):
                if g is not None:
                    target[k] = g
        return loss.detach(), g1, g2

    def outer_update(self, inner: InnerResult, episodes: Sequence[Episode]) -> dict:
        loss, g1, g2 = self.view_gradients(inner, episodes)
        eta = self.cfg.eta
        st = self.state
        with torch.no_grad():
            st.gamma1 = {k: inner.losses.gamma1[k].detach() - eta * g1[k] for k in g1}
            st.gamma2 = {k: inner.losses.gamma2[k].detach() - eta * g2[k] for k in g2}
            norm = math.sqrt(sum(float((g ** 2).sum()) for g in list(g1.values()) + list(g2.values())))
        inner.theta_next = None
        return {"meta_loss_after": float(loss), "gamma_grad_norm": norm}

    # --- loop ----------------------------------------------------------------------

    def sample_tasks(self) -> List[Episode]:
        if self.dataset is None:
            raise ConfigError("trainer has no dataset to sample episodes from")
        cfg = self.cfg
        return [sample_episode(self.dataset, cfg.n_way, cfg.k_shot, cfg.m_query_train, self.episode_rng)
                for _ in range(cfg.tasks_per_batch)]

    def step(self, episodes: Optional[Sequence[Episode]] = None) -> dict:
        episodes = self.sample_tasks() if episodes is None else episodes
        inner = self.inner_update(episodes)
        outer = self.outer_update(inner, episodes)
        st = self.state
        st.iteration += 1
        row = {
            "iteration": st.iteration,
            "epoch": st.epoch,
            "meta_loss": float(inner.losses.meta.detach()),
            "con_loss": float(inner.losses.con.detach()),
            "total_loss": float(inner.losses.total.detach()),
            "gamma_grad_norm": outer["gamma_grad_norm"],
            "lr": inner.lr,
            "queue_fill": st.queue.fill,
        }
        st.history.append(row)
        return row

    def train(self, epochs: Optional[int] = None, out_dir: Optional[Path] = None,
              checkpoint: bool = True, progress: bool = False) -> TrainState:
        """Run until ``state.epoch == epochs``; writes metrics.csv and per-epoch checkpoints."""
        from .checkpoint import save_checkpoint

        epochs = self.cfg.epochs if epochs is None else epochs
        metrics_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = out_dir / "metrics.csv"
            if not metrics_path.exists():
                with open(metrics_path, "w", newline="") as fh:
                    csv.writer(fh).writerow(METRIC_COLUMNS)
        while self.state.epoch < epochs:
            rows = []
            for _ in range(self.cfg.iterations_per_epoch):
                rows.append(self.step())
            self.state.epoch += 1
            if progress:
                last = rows[-50:]
                log.info("epoch %d  meta %.4f  con %.4f  lr %g", self.state.epoch,
                         np.mean([r["meta_loss"] for r in last]),
                         np.mean([r["con_loss"] for r in last]), rows[-1]["lr"])
            if metrics_path is not None:
                with open(metrics_path, "a", newline="") as fh:
                    writer = csv.writer(fh)
                    for r in rows:
                        writer.writerow([r[c] for c in METRIC_COLUMNS])
                if checkpoint:
                    save_checkpoint(self, out_dir / "checkpoints" / f"epoch_{self.state.epoch}.npz")
        return self.state

    def clone(self) -> "Trainer":
        return copy.deepcopy(self)
