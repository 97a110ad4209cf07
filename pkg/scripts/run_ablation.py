"""Three-variant ablation (w/o AGA, w/ AGA, w/ AGA + PU) on the synthetic benchmark.

    python3 scripts/run_ablation.py --out results/ablation.json
    python3 scripts/run_ablation.py --config my.json --seeds 0,1
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
    ap.add_argument("--seeds", help="comma-separated seeds overriding the config")
    ap.add_argument("--out", type=Path, default=Path("results/ablation.json"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = (ExperimentConfig.from_dict(json.loads(args.config.read_text())) if args.config
              else experiment.packaged_config("reference"))
    if args.seeds:
        config = config.replace(seeds=tuple(int(s) for s in args.seeds.split(",")))
    result = experiment.run_ablation(config)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"config": config.to_dict(), "table": result["table"]}, indent=2))
    print(experiment.format_table(result["table"]))


if __name__ == "__main__":
    main()
