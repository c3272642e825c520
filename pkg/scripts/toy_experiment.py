"""Train DSA and DSA-free models on the procedural shapes and compare them.

    python scripts/toy_experiment.py --config configs/desk.ini --out results/desk.json
    python scripts/toy_experiment.py --config configs/reduced.ini --n-eval 100
"""

import argparse
import json
import sys
import time

from pointmf.config import load_config
from pointmf.experiment import run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--steps", type=int, help="override optimizer.total_steps")
    p.add_argument("--n-eval", type=int, help="held-out conditions to score (default: all)")
    p.add_argument("--every", type=int, default=250, help="progress line interval")
    p.add_argument("--out", help="write the JSON result here")
    args = p.parse_args(argv)

    config = load_config(args.config)
    start = time.perf_counter()

    def progress(tag, rec):
        if rec["step"] % args.every == 0:
            print(f"[{time.perf_counter() - start:7.0f}s] {tag} step {rec['step']} "
                  f"fm_raw={rec['fm_raw']} l_dsa={rec['l_dsa']}", flush=True)

    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = run_experiment(config, seeds, n_eval=args.n_eval, steps=args.steps, progress=progress)
    text = result.to_json()
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0 if all(result.criteria().values()) else 1


if __name__ == "__main__":
    sys.exit(main())
