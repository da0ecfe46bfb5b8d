"""Partial incremental training vs full retraining from a shared pretrained snapshot.

    python3 scripts/pit_vs_full.py [--set key=value ...]
"""

import argparse
import time

from nsprec.config import load_config
from nsprec.experiments import pit_comparison, prepare


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    cfg = load_config(args.config, args.set)
    t0 = time.perf_counter()
    comp = pit_comparison(prepare(cfg))
    print(f"HR@{comp.k}: pretrain {comp.pretrain.hr(comp.k):.4f}  full {comp.full.hr(comp.k):.4f}  "
          f"pit {comp.pit.hr(comp.k):.4f}  (pit/full {comp.ratio:.3f})")
    print(f"samples: max per-phase pit/full {comp.sample_ratio:.3f}, total {comp.total_sample_ratio:.3f}")
    print(f"{'phase':>5} {'bucket':>6} {'users':>5} {'pit samples':>11} {'full samples':>12}")
    full = {p.day: p for p in comp.full_phases}
    for p in comp.pit_phases:
        print(f"{p.day:>5} {p.bucket:>6} {p.users:>5} {p.samples:>11} {full[p.day].samples:>12}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
