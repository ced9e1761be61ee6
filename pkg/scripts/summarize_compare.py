"""Print median final returns per cell, vagram-vs-mse orderings and model-free gap fractions."""

import argparse
from pathlib import Path

from vagram.analysis import gap_fractions, median_ordering
from vagram.experiments import read_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path, help="dyna-compare output directory")
    parser.add_argument("--a", default="vagram", help="first loss")
    parser.add_argument("--b", default="mse", help="second loss")
    args = parser.parse_args()
    summary = read_csv(args.out_dir / "summary.csv")
    ref_path = args.out_dir / "reference_summary.csv"
    reference = read_csv(ref_path) if ref_path.exists() else []
    cells = sorted({(r["capacity"], int(r["distractors"])) for r in summary})
    for capacity, k in cells:
        o = median_ordering(summary, args.a, args.b, capacity, k)
        line = (f"{capacity:6s} k={k}: median {args.a} {o.median_a:8.1f}  {args.b} {o.median_b:8.1f}  "
                f"Cliff's delta {o.cliffs_delta:+.2f}  {'holds' if o.holds else 'reversed'}")
        if reference:
            gaps = [gap_fractions(summary, reference, loss, capacity, k) for loss in (args.a, args.b)]
            line += "  gap>=0.5: " + ", ".join(f"{g.loss} {g.passed}/{g.total}" for g in gaps)
        print(line)
    failed = [r for r in summary if r["status"] != "ok"]
    for r in failed:
        print(f"failed run: {r['loss']} {r['capacity']} k={r['distractors']} seed {r['seed']}: {r['error']}")


if __name__ == "__main__":
    main()
