"""Train and evaluate the five ablation rows, then print the accuracy table.

    python scripts/run_ablation.py --config configs/ablation.json --out runs/ablation
"""

import argparse
import json
import logging

from iadlmm.config import load_run_config
from iadlmm.pipeline import run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--config", default="configs/ablation.json")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--stage-overrides", help="JSON object: stage -> TrainConfig fields")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run = load_run_config(args.config)
    summary = run_ablation(run, args.out, json.loads(args.stage_overrides) if args.stage_overrides else None)
    for name, acc in summary["accuracy"].items():
        print(f"{name:<16}{100 * acc:6.1f}")
    print(f"total {summary['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
