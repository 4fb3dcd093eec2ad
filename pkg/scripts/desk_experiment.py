"""Run the desk-scale experiment (train, then compare with FBP and Huber).

Usage: python scripts/desk_experiment.py [--cache DIR] [--config desk.json]
"""

import argparse
import json

from helixlpd.experiment import DeskConfig, run_desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default="desk_cache", help="directory for checkpoints and results")
    ap.add_argument("--config", help="DeskConfig JSON (defaults to the built-in configuration)")
    args = ap.parse_args()
    cfg = DeskConfig()
    if args.config:
        with open(args.config) as fh:
            cfg = DeskConfig.from_dict(json.load(fh))
    print(json.dumps(run_desk_experiment(cfg, args.cache, log=lambda m: print(m, flush=True)), indent=1))


if __name__ == "__main__":
    main()
