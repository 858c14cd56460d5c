"""Evaluate one trained checkpoint under clean oracle, noisy oracle and null experts.

    python scripts/run_expert_sweep.py --run runs/ablation
"""

import argparse
import json
import logging
from pathlib import Path

from iadlmm.config import load_run_config
from iadlmm.pipeline import run_expert_sweep
from iadlmm.synth import load_manifest


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--run", default="runs/ablation", help="output directory of run_ablation.py")
    p.add_argument("--config", default="configs/ablation.json")
    p.add_argument("--checkpoint", default="ckpt/finetune_tpg+lorra+vpg.ckpt", help="relative to --run")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run_dir = Path(args.run)
    summary = run_expert_sweep(
        load_run_config(args.config), run_dir / args.checkpoint, load_manifest(run_dir / "data"), run_dir / "expert_sweep"
    )
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
