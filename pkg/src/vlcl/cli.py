"""Command line: ``vlcl {train,eval,sweep,export-embeddings,dump-views,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint
from .config import RunConfig, desk_preset, probe_preset
from .errors import ConfigError
from .evaluation import (beta_sweep, evaluate, export_embeddings, format_sweep, write_report_csv,
                         write_sweep_csv)
from .pipeline import build_datasets, make_trainer

log = logging.getLogger("vlcl")

# ``train`` records its output directory here so that a later ``--checkpoint last``
# without ``--run-dir`` / ``--config`` finds the most recent run
LAST_RUN_FILE = ".vlcl_last_run"


PRESETS = {"desk": desk_preset, "probe": probe_preset}


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = PRESETS[getattr(args, "preset", None) or "desk"]()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "output_dir", None):
        from dataclasses import replace
        cfg = replace(cfg, output_dir=str(args.output_dir))
    return cfg


def resolve_checkpoint(spec: str, run_dir: Path) -> Path:
    """``last`` -> highest ``checkpoints/epoch_<n>.npz`` under ``run_dir``; else a path."""
    if spec != "last":
        path = Path(spec)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        return path
    found = []
    for p in (run_dir / "checkpoints").glob("epoch_*.npz"):
        m = re.fullmatch(r"epoch_(\d+)\.npz", p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise ConfigError(f"no checkpoints under {run_dir / 'checkpoints'}")
    return max(found)[1]


def _run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    if args.config:
        return Path(RunConfig.load(args.config).output_dir)
    marker = Path(LAST_RUN_FILE)
    if marker.is_file():
        return Path(marker.read_text().strip())
    return Path(desk_preset().output_dir)


def _checkpoint_and_config(args):
    run_dir = _run_dir(args)
    ckpt = resolve_checkpoint(args.checkpoint, run_dir)
    if args.config:
        cfg = RunConfig.load(args.config)
    elif (ckpt.parent.parent / "config.yaml").is_file():
        cfg = RunConfig.load(ckpt.parent.parent / "config.yaml")
    else:
        raise ConfigError("pass --config: no config.yaml next to the checkpoint directory")
    return ckpt, cfg, run_dir


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    train, _ = build_datasets(cfg)
    trainer = make_trainer(cfg, train)
    cfg.dump(out / "config.yaml")
    Path(LAST_RUN_FILE).write_text(str(out.resolve()) + "\n")
    trainer.train(out_dir=out, progress=True)
    last = trainer.state.history[-1]
    print(f"trained {trainer.state.iteration} iterations; final meta loss {last['meta_loss']:.4f}; "
          f"checkpoints in {out / 'checkpoints'}")
    return 0


def cmd_eval(args) -> int:
    ckpt, cfg, run_dir = _checkpoint_and_config(args)
    trainer = load_checkpoint(ckpt)
    train, test = build_datasets(cfg)
    ev = cfg.eval
    n_episodes = args.episodes or ev.n_episodes
    k_shot = args.k_shot or ev.k_shot
    reports, extra = [], []
    splits = [("held_out", test)]
    if ev.fine_grained and test.fine_labels is not None:
        splits.append(("held_out_fine", test.by_fine_label()))
    for name, data in splits:
        report = evaluate(trainer.encoder, trainer.state.encoder_state.theta, data, ev.n_way, k_shot,
                          ev.m_query, n_episodes, np.random.default_rng(ev.seed), trainer.sim)
        print(f"{name}: {report}")
        reports.append(report)
        extra.append({"split": name, "checkpoint": str(ckpt)})
    out = Path(args.out) if args.out else run_dir / "eval_report.csv"
    write_report_csv(reports, out, extra)
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    betas = [float(b) for b in args.betas.split(",")]
    out = Path(cfg.output_dir) / "sweep"
    rows = beta_sweep(cfg, betas, progress=True, out_dir=out)
    print(format_sweep(rows))
    write_sweep_csv(rows, out / "sweep.csv")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_export(args) -> int:
    ckpt, cfg, run_dir = _checkpoint_and_config(args)
    trainer = load_checkpoint(ckpt)
    train, test = build_datasets(cfg)
    data = train if args.split == "train" else test
    out = Path(args.out) if args.out else run_dir / "embeddings.csv"
    export_embeddings(trainer.encoder, trainer.state.encoder_state.theta, data, out)
    print(f"wrote {len(data)} rows to {out}")
    return 0


def _to_png(x: torch.Tensor, path: Path):
    arr = (x.detach().permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_dump_views(args) -> int:
    from .autoview import make_views
    from .encoder import to_nchw

    ckpt, cfg, run_dir = _checkpoint_and_config(args)
    trainer = load_checkpoint(ckpt)
    train, _ = build_datasets(cfg)
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(len(train), size=min(args.n, len(train)), replace=False)
    images = to_nchw(torch.as_tensor(train.images[idx], dtype=trainer.dtype))
    with torch.no_grad():
        v1, v2 = make_views(trainer.view_module, trainer.state.gamma1, trainer.state.gamma2,
                            images, cfg.augment, rng)
    out = Path(args.out) if args.out else run_dir / "views"
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(idx)):
        _to_png(images[i], out / f"{i}_orig.png")
        _to_png(v1[i], out / f"{i}_v1.png")
        _to_png(v2[i], out / f"{i}_v2.png")
    print(f"wrote {len(idx)} view triplets to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    return 0 if run_all() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per a run config")
    p.add_argument("--config", help="YAML run config (default: the --preset, desk)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="used when --config is not given")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out classes")
    p.add_argument("--checkpoint", default="last")
    p.add_argument("--config")
    p.add_argument("--run-dir")
    p.add_argument("--episodes", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate once per beta")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="used when --config is not given")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--betas", default="0.5,1.0,2.0,5.0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="write encoder features as CSV")
    p.add_argument("--checkpoint", default="last")
    p.add_argument("--config")
    p.add_argument("--run-dir")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("dump-views", help="write (original, view1, view2) PNG triplets")
    p.add_argument("--checkpoint", default="last")
    p.add_argument("--config")
    p.add_argument("--run-dir")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_views)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit status 1
        log.exception("failed: %s", exc)
        return 1


def main():
    sys.exit(run_cli())
