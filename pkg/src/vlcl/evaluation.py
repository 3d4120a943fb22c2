"""Meta-test evaluation, embedding export, clustering probes and the beta sweep."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.metrics import silhouette_score

from .datasets import Dataset, sample_episode
from .encoder import Encoder, Params, to_nchw
from .errors import ConfigError
from .protohead import SimilarityMetric, classify, compute_prototypes


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    n_episodes: int
    setting: Tuple[int, int, int]
    accuracies: np.ndarray = field(repr=False)

    @classmethod
    def from_accuracies(cls, accuracies, setting) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.size == 0:
            raise ConfigError("no episodes evaluated")
        # population std: a single episode gives a zero-width interval
        ci = 1.96 * acc.std() / math.sqrt(acc.size)
        return cls(float(acc.mean()), float(ci), int(acc.size), tuple(setting), acc)

    def row(self) -> dict:
        n, k, m = self.setting
        return {"n_way": n, "k_shot": k, "m_query": m, "n_episodes": self.n_episodes,
                "mean_accuracy": self.mean_accuracy, "ci95": self.ci95}

    def __str__(self) -> str:
        n, k, _ = self.setting
        return f"{n}-way {k}-shot: {self.mean_accuracy:.2f} +- {self.ci95:.2f}% ({self.n_episodes} episodes)"


def write_report_csv(reports: Sequence[EvalReport], path, extra: Optional[Sequence[dict]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [dict(e or {}, **r.row()) for r, e in zip(reports, extra or [None] * len(reports))]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


@torch.no_grad()
def encode_images(encoder: Encoder, theta: Params, images: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    dtype = next(iter(theta.values())).dtype
    out = []
    for start in range(0, len(images), batch_size):
        # slices of a read-only dataset array are copied: torch wants writable memory
        x = to_nchw(torch.tensor(images[start:start + batch_size], dtype=dtype))
        out.append(encoder.encode(theta, x))
    return torch.cat(out) if out else torch.zeros(0, encoder.cfg.feature_dim, dtype=dtype)


@torch.no_grad()
def evaluate(encoder: Encoder, theta: Params, dataset: Dataset, n_way: int = 5, k_shot: int = 1,
             m_query: int = 16, n_episodes: int = 600, rng=0,
             sim: SimilarityMetric = SimilarityMetric(), cache_features: bool = True) -> EvalReport:
    """Nearest-prototype accuracy (percent) over random episodes with frozen weights.

    Features are computed once for the whole dataset when ``cache_features`` is set;
    the encoder is deterministic so this matches per-episode encoding.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    feats = encode_images(encoder, theta, dataset.images) if cache_features else None
    accs = []
    for _ in range(n_episodes):
        ep = sample_episode(dataset, n_way, k_shot, m_query, rng)
        if feats is not None:
            fs, fq = feats[ep.support_index], feats[ep.query_index]
        else:
            fs = encode_images(encoder, theta, ep.support_images)
            fq = encode_images(encoder, theta, ep.query_images)
        protos = compute_prototypes(fs, ep.support_labels)
        pred = classify(fq, protos, sim).predictions.numpy()
        accs.append(100.0 * float(np.mean(pred == ep.query_labels)))
    return EvalReport.from_accuracies(accs, (n_way, k_shot, m_query))


def export_embeddings(encoder: Encoder, theta: Params, dataset: Dataset, out_path) -> Path:
    """CSV with one row per image: ``f0..f{D-1}, label, fine_label``."""
    feats = encode_images(encoder, theta, dataset.images).numpy()
    fine = dataset.fine_labels if dataset.fine_labels is not None else dataset.labels
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label", "fine_label"])
        for row, label, f in zip(feats, dataset.labels, fine):
            writer.writerow([repr(float(v)) for v in row] + [int(label), int(f)])
    return out_path


def fine_silhouette(features: np.ndarray, dataset: Dataset) -> float:
    """Mean over coarse classes of the silhouette of their sub-categories.

    Only coarse classes containing at least two sub-categories contribute.
    """
    if dataset.fine_labels is None:
        raise ConfigError("fine-grained silhouette needs fine labels")
    scores = []
    for c in range(dataset.num_classes):
        idx = dataset.class_indices[c]
        fine = dataset.fine_labels[idx]
        if len(np.unique(fine)) < 2:
            continue
        scores.append(silhouette_score(features[idx], fine))
    if not scores:
        raise ConfigError("no coarse class has two or more sub-categories")
    return float(np.mean(scores))


@dataclass
class SweepRow:
    beta: float
    report: EvalReport
    fine_report: Optional[EvalReport] = None
    silhouette: Optional[float] = None


def beta_sweep(run_config, betas: Sequence[float], progress: bool = False,
               out_dir=None) -> List[SweepRow]:
    """One training + evaluation per beta, every run with the same seed."""
    from .pipeline import run_experiment

    rows = []
    for beta in betas:
        cfg = replace(run_config, train=replace(run_config.train, beta=float(beta)))
        sub = None if out_dir is None else Path(out_dir) / f"beta_{beta:g}"
        result = run_experiment(cfg, out_dir=sub, progress=progress, checkpoint=False)
        rows.append(SweepRow(float(beta), result.report, result.fine_report, result.silhouette))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    def cell(report):
        return f"{report.mean_accuracy:6.2f} +- {report.ci95:4.2f}" if report else "-"

    lines = [f"{'beta':<6} | {'accuracy':<14} | {'fine accuracy':<14} | fine silhouette"]
    for r in rows:
        sil = f"{r.silhouette:+.4f}" if r.silhouette is not None else "-"
        lines.append(f"{r.beta:<6g} | {cell(r.report):<14} | {cell(r.fine_report):<14} | {sil}")
    return "\n".join(lines)


def write_sweep_csv(rows: Sequence[SweepRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "mean_accuracy", "ci95", "fine_mean_accuracy", "fine_ci95", "fine_silhouette"])
        for r in rows:
            writer.writerow([r.beta, r.report.mean_accuracy, r.report.ci95,
                             r.fine_report.mean_accuracy if r.fine_report else "",
                             r.fine_report.ci95 if r.fine_report else "",
                             "" if r.silhouette is None else r.silhouette])
    return path
