"""Wrong-kNN-edge counts under rotation, single vs double precision, on the
default synthetic corpus (k = 20, N = 1024, 10 trials per cloud).

    python scripts/knn_audit.py [--out results/knn_audit]
"""

import argparse
import sys
import tempfile
from pathlib import Path

from choir.cli import main as choir


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results" / "knn_audit"))
    parser.add_argument("--trials", type=int, default=10)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        code = choir(["gen-data", "--out", tmp, "--force"])
        if code:
            return code
        return choir(["knn-audit", "--data", tmp, "--out", args.out, "--force", "--k", "20", "--n", "1024",
                      "--trials", str(args.trials)])


if __name__ == "__main__":
    sys.exit(main())
