"""
Sweeping boundary conditions
============================

Evaluates baseline and expert across inflow rates and downstream speed
limits and prints the seed-averaged table. Sweeps resume from per-cell
files, so rerunning after an interruption only computes missing cells.
"""

import csv

from mixedav.metrics import SweepSpec, run_sweep

sweep = SweepSpec(inflows=(1900.0, 2100.0, 2300.0), limits=(5.0, 7.0),
                  seeds=(0, 1), controllers=("baseline", "expert"))
run_sweep(sweep, "sweep_out")
with open("sweep_out/sweep_mean.csv") as f:
    for row in csv.DictReader(f):
        print(row["inflow"], row["limit"], row["controller"],
              row["mean_abs_accel"], row["mpg"], row["throughput"])
