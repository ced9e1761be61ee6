"""Print per-(arch, loss) median VAML error by segment and the seed counts behind the study claims."""

import argparse

import numpy as np

from vagram.analysis import count_final_below, count_final_vs_first, final_ratio, study_table
from vagram.experiments import read_csv


def fmt(x):
    return "  nan" if x is None or not np.isfinite(x) else f"{x:9.4g}"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv", help="loss_study.csv")
    args = parser.parse_args()
    table = study_table(read_csv(args.csv))
    for (loss, arch), runs in sorted(table.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        errs = np.array([[np.inf if e is None else e for e in v] for v in runs.values()])
        med = np.median(errs, axis=0)
        print(f"{arch:7s} {loss:13s}" + "".join(fmt(m) for m in med))
    print()
    archs = sorted({a for _, a in table})
    losses = sorted({loss for loss, _ in table})
    for arch in archs:
        for loss in losses:
            if (loss, arch) not in table:
                continue
            up, n = count_final_vs_first(table, loss, arch, "up")
            print(f"{arch:7s} {loss:13s} final above first in {up}/{n} seeds")
        if ("vagram", arch) in table and ("mse", arch) in table:
            below, n = count_final_below(table, "vagram", "mse", arch)
            ratio = final_ratio(table, "vagram", "mse", arch)
            print(f"{arch:7s} vagram below mse at the end in {below}/{n} seeds; median final ratio {ratio:.2f}")


if __name__ == "__main__":
    main()
