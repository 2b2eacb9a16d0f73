"""S-curve <-> Swiss-roll, end to end through the command line.

Generates data, trains the class-conditional teacher, distils the one-step
student (consistency, distribution matching and cycle terms), evaluates both
directions and writes SVG scatter plots.  Default settings take about twenty
minutes on one CPU core; ``--quick`` shrinks everything to a smoke run.

    python3 demos/02_toy_pipeline.py runs/toy
    python3 demos/02_toy_pipeline.py runs/smoke --quick
"""

import argparse
import json
import sys
from pathlib import Path

from ibcd.cli import main

QUICK = [
    "data.n_train=2000", "data.n_eval=500",
    "teacher.steps=2000", "distill.total_steps=600", "distill.transition_step=400", "distill.eval_every=200",
]

parser = argparse.ArgumentParser()
parser.add_argument("run_dir")
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()
run = Path(args.run_dir)

overrides = []
for item in QUICK if args.quick else []:
    overrides += ["--set", item]

steps = [
    ["gen-data", "--run-dir", str(run), *overrides],
    ["train-teacher", "--run-dir", str(run)],
    ["distill", "--run-dir", str(run)],
    ["eval", "--run-dir", str(run)],
    ["difficulty-map", "--run-dir", str(run), "--to", "b", "--boundary"],
    ["export-plots", "--run-dir", str(run)],
]
for argv in steps:
    print("$ ibcd", " ".join(argv), flush=True)
    code = main(argv)
    if code:
        sys.exit(code)

report = json.loads((run / "metrics" / "eval.json").read_text())
for name, r in sorted(report.items()):
    print(f"{name}: MMD2 {r['mmd2']:.4f}  cycle {r['cycle_err_mean']:.4f}  "
          f"teacher RMSE {r['teacher_agreement_rmse']:.3f}  modes {r['mode_coverage']:.2f}  NFE {r['nfe']}")
print("plots in", run / "plots")
