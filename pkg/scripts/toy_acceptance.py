#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Multi-seed toy experiment
Runs the toy config once per seed and prints the median metrics of each regime
"""

import argparse
import json
import os
import sys
from pathlib import Path
from statistics import median

# Add parent directory to path so we can import ganaug modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

try:
    from harness import run_experiment
    from utils.errors import GanAugError
    from utils.validators import load_experiment_config
except ImportError as e:
    print(f"Error importing ganaug modules: {e}")
    print("Make sure the requirements are installed and run this script from the project root.")
    sys.exit(1)

METRICS = ("roc_auc", "pr_auc", "recall_at_threshold", "precision_at_threshold")
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy.toml"


def run_seeds(config_path, seeds, out_root, overrides):
    summaries = {}
    for seed in seeds:
        print(f"Running seed {seed}...")
        config = load_experiment_config(
            config_path, list(overrides) + [f"seed={seed}", f'output_dir="{out_root / f"seed_{seed}"}"'])
        summaries[seed] = run_experiment(config, resume=True)
    return summaries


def median_table(summaries):
    regimes = next(iter(summaries.values()))["regimes"]
    table = {}
    for regime in regimes:
        table[regime] = {}
        for metric in METRICS:
            values = [s["regimes"][regime][metric] for s in summaries.values()
                      if s["regimes"][regime][metric] is not None]
            table[regime][metric] = median(values) if values else None
    return table


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument('--config', type=Path, default=DEFAULT_CONFIG)
    parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    parser.add_argument('--out', type=Path, default=Path('runs/toy_acceptance'))
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
    args = parser.parse_args()

    try:
        summaries = run_seeds(args.config, args.seeds, args.out.resolve(), args.overrides)
    except GanAugError as e:
        print(f"Toy run failed: {e}")
        return 2

    table = median_table(summaries)
    print(json.dumps({"seeds": args.seeds, "median": table}, indent=2, sort_keys=True))
    if "baseline" in table and "aug_same_data" in table:
        better = table["aug_same_data"]["roc_auc"] >= table["baseline"]["roc_auc"]
        print(f"aug_same_data vs baseline median ROC AUC: {'>=' if better else '<'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
