#!/usr/bin/env python3
"""Render cost-ratio CDF figures from a finished benchmark output directory.

One PNG per seed overlaying the ensemble CDFs of every strategy present,
mirroring the cumulative-distribution comparison figure.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reachtime.cli import _read_cdf_csv  # noqa: E402
from reachtime.harness import plot_cdf_points  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("bench_dir", help="run_benchmark.py output directory")
    args = ap.parse_args()

    bench = Path(args.bench_dir)
    made = 0
    for seed_dir in sorted(bench.glob("seed*")):
        points = {}
        for csv_path in sorted(seed_dir.glob("*/ensemble_cdf.csv")):
            points[csv_path.parent.name] = _read_cdf_csv(csv_path)
        if not points:
            continue
        out = bench / f"cdf_{seed_dir.name}.png"
        plot_cdf_points(points, out)
        print(f"wrote {out}")
        made += 1
    if made == 0:
        print("no ensemble_cdf.csv files found", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
