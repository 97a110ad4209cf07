"""Attention-strength sweep: one trained model per beta, shared data and initial weights.

    python3 scripts/beta_sweep.py --betas 0,0.05,0.1 --out results/beta_sweep.json
"""

import argparse
import json
import logging
from pathlib import Path

from agx import experiment
from agx.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="JSON config; defaults to the bundled reference")
    ap.add_argument("--betas", default="0,0.05,0.1")
    ap.add_argument("--seeds", help="comma-separated seeds overriding the config")
    ap.add_argument("--out", type=Path, default=Path("results/beta_sweep.json"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = (ExperimentConfig.from_dict(json.loads(args.config.read_text())) if args.config
              else experiment.packaged_config("reference"))
    if args.seeds:
        config = config.replace(seeds=tuple(int(s) for s in args.seeds.split(",")))
    betas = [float(b) for b in args.betas.split(",")]
    result = experiment.run_beta_sweep(config, betas)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"config": config.to_dict(), "betas": betas,
                                    "table": result["table"]}, indent=2))
    print(experiment.format_table(result["table"]))


if __name__ == "__main__":
    main()
