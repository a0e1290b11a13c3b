"""Train the full model, the hypothesis-only ablation and same-instance
pairing over three seeds on the default corpus, then print a summary.

    python scripts/run_study.py [--out results/study] [--variants full h-only] [--seeds 0 1 2]
"""

import argparse
from pathlib import Path

import numpy as np

from choir.experiments import VARIANTS, run_study


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results" / "study"))
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = parser.parse_args()

    rows = run_study(args.out, args.variants, args.seeds)
    print(f"\n{'variant':<14} {'seed':>4} {'stability':>10} {'consistency':>12}  per-class consistency")
    for r in rows:
        per = " ".join(f"{k}={v:.1f}" for k, v in sorted(r["consistency_deg"].items()))
        print(f"{r['variant']:<14} {r['seed']:>4} {r['mean_stability_deg']:10.2e} {r['mean_consistency_deg']:12.2f}  {per}")
    for v in args.variants:
        sub = [r for r in rows if r["variant"] == v]
        print(f"{v:<14} mean {np.mean([r['mean_stability_deg'] for r in sub]):10.2e} "
              f"{np.mean([r['mean_consistency_deg'] for r in sub]):12.2f}")


if __name__ == "__main__":
    main()
