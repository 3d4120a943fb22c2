#!/usr/bin/env python3
"""Train the desk preset and report 5-way 1-shot accuracy before and after training."""
import argparse
import logging
import time

import numpy as np
import torch

from vlcl.config import desk_preset
from vlcl.evaluation import evaluate, write_report_csv
from vlcl.pipeline import build_datasets, make_trainer


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--beta", type=float, default=None, help="override the preset beta")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--episodes", type=int, default=600)
    parser.add_argument("--out", default="runs/desk")
    args = parser.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    overrides = {"seed": args.seed}
    if args.beta is not None:
        overrides["beta"] = args.beta
    cfg = desk_preset(**overrides)
    train, test = build_datasets(cfg)
    trainer = make_trainer(cfg, train)
    ev = cfg.eval

    def run_eval():
        return evaluate(trainer.encoder, trainer.state.encoder_state.theta, test, ev.n_way, ev.k_shot,
                        ev.m_query, args.episodes, np.random.default_rng(ev.seed), trainer.sim)

    before = run_eval()
    print(f"untrained: {before}")
    cfg.dump(f"{args.out}/config.yaml")
    t0 = time.perf_counter()
    trainer.train(out_dir=args.out, progress=True)
    print(f"training took {time.perf_counter() - t0:.0f}s")
    after = run_eval()
    print(f"trained:   {after}")
    write_report_csv([before, after], f"{args.out}/eval_report.csv",
                     [{"split": "held_out_untrained"}, {"split": "held_out"}])


if __name__ == "__main__":
    main()
