"""Untrained vs trained HR@K against the random-retrieval baseline K/P.

    python3 scripts/learning_floor.py [--set key=value ...]
"""

import argparse
import time

from nsprec.config import load_config
from nsprec.experiments import new_trainer, prepare, train_and_evaluate
from nsprec.retrieval import evaluate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--k", type=int, default=100)
    args = ap.parse_args()
    cfg = load_config(args.config, args.set)
    prep = prepare(cfg)
    untrained = evaluate(new_trainer(cfg, prep.vocab).model, prep.queries, cfg.retrieval)
    baseline = args.k / untrained.pool_size
    t0 = time.perf_counter()
    run = train_and_evaluate(prep, cfg)
    dt = time.perf_counter() - t0
    print(f"pool {untrained.pool_size}, random baseline HR@{args.k} = {baseline:.4f}")
    print(f"untrained HR@{args.k} = {untrained.hr(args.k):.4f} (per-user SE {untrained.standard_error(args.k):.4f})")
    print(f"trained   HR@{args.k} = {run.report.hr(args.k):.4f} "
          f"({run.report.hr(args.k) / baseline:.1f}x baseline) after {run.trainer.step} steps in {dt:.0f}s")
    for sc in run.report.per_scenario:
        print(f"  {sc:<4} HR@{args.k} = {run.report.hr(args.k, sc):.4f} ({run.report.users[sc]} users)")


if __name__ == "__main__":
    main()
