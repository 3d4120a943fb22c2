#!/usr/bin/env python3
"""Train and evaluate once per beta (shared seed) and print a comparison table."""
import argparse
import logging
from pathlib import Path

import torch

from vlcl.config import desk_preset, probe_preset
from vlcl.evaluation import beta_sweep, format_sweep, write_sweep_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--betas", default="0,0.5,1,2,5")
    parser.add_argument("--preset", choices=("desk", "probe"), default="probe")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/sweep")
    args = parser.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.WARNING)

    preset = probe_preset if args.preset == "probe" else desk_preset
    cfg = preset(seed=args.seed)
    rows = beta_sweep(cfg, [float(b) for b in args.betas.split(",")], out_dir=args.out)
    print(format_sweep(rows))
    print(f"wrote {write_sweep_csv(rows, Path(args.out) / 'sweep.csv')}")


if __name__ == "__main__":
    main()
