"""Glue between a :class:`RunConfig` and the modules: datasets, training, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import RunConfig
from .datasets import Dataset, generate_synthetic, load_image_folder, merge_classes, split_classes
from .errors import ConfigError
from .evaluation import EvalReport, encode_images, evaluate, fine_silhouette, write_report_csv
from .trainer import Trainer

log = logging.getLogger(__name__)


def build_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, held-out) datasets with disjoint classes, merges applied to train."""
    data = cfg.data
    if data.source == "synthetic":
        full = generate_synthetic(data.synthetic)
    else:
        full = load_image_folder(data.root, (data.image_size, data.image_size))
    if isinstance(data.train_classes, int):
        train, test = split_classes(full, data.train_classes, data.split_seed)
    else:
        chosen = list(data.train_classes)
        rest = [c for c in range(full.num_classes) if c not in set(chosen)]
        if not rest:
            raise ConfigError("explicit train_classes leave no held-out classes")
        train, test = full.subset(chosen), full.subset(rest)
    for group in data.merge:
        train = merge_classes(train, group.ids, group.name)
    return train, test


def make_trainer(cfg: RunConfig, train: Optional[Dataset]) -> Trainer:
    return Trainer(cfg.encoder, cfg.views, cfg.contrast, cfg.augment, cfg.train, train)


@dataclass
class ExperimentResult:
    trainer: Trainer
    report: EvalReport
    fine_report: Optional[EvalReport]
    silhouette: Optional[float]


def evaluate_trainer(cfg: RunConfig, trainer: Trainer, train: Dataset, test: Dataset):
    ev = cfg.eval
    theta = trainer.state.encoder_state.theta
    sim = cfg.train.sim
    report = evaluate(trainer.encoder, theta, test, ev.n_way, ev.k_shot, ev.m_query,
                      ev.n_episodes, np.random.default_rng(ev.seed), sim)
    fine_report = silhouette = None
    if ev.fine_grained and test.fine_labels is not None:
        fine_report = evaluate(trainer.encoder, theta, test.by_fine_label(), ev.n_way, ev.k_shot,
                               ev.m_query, ev.n_episodes, np.random.default_rng(ev.seed), sim)
    if ev.fine_grained and train.fine_labels is not None:
        feats = encode_images(trainer.encoder, theta, train.images).numpy()
        try:
            silhouette = fine_silhouette(feats, train)
        except ConfigError:
            silhouette = None
    return report, fine_report, silhouette


def run_experiment(cfg: RunConfig, out_dir=None, progress: bool = False,
                   checkpoint: bool = True) -> ExperimentResult:
    """Train per ``cfg`` and evaluate on the held-out classes."""
    train, test = build_datasets(cfg)
    trainer = make_trainer(cfg, train)
    if out_dir is not None:
        out_dir = Path(out_dir)
        cfg.dump(out_dir / "config.yaml")
    trainer.train(out_dir=out_dir, checkpoint=checkpoint, progress=progress)
    report, fine_report, silhouette = evaluate_trainer(cfg, trainer, train, test)
    if out_dir is not None:
        reports = [report] + ([fine_report] if fine_report else [])
        extra = [{"split": "held_out"}] + ([{"split": "held_out_fine"}] if fine_report else [])
        write_report_csv(reports, out_dir / "eval_report.csv", extra)
    return ExperimentResult(trainer, report, fine_report, silhouette)
