"""Where is one-step translation hard?  True difficulty vs its one-step estimate.

The true difficulty at a source point is the distance between the student's
single jump and the teacher's full DDIB endpoint (156 teacher evaluations per
point).  The estimate only compares the student with itself one grid step
apart along the teacher bridge, averaged over a few sampled positions.

    python3 demos/04_difficulty_map.py runs/toy --resolution 48
"""

import argparse
from pathlib import Path

import numpy as np

from ibcd import CLASS_B, TimeIndexGrid, synthdata
from ibcd.cli import load_model
from ibcd.metrics import decision_boundary, difficulty_map, spearman, top_decile_near_boundary
from ibcd.plots import heatmap_svg

parser = argparse.ArgumentParser()
parser.add_argument("run_dir")
parser.add_argument("--resolution", type=int, default=64)
parser.add_argument("--m", type=int, default=16)
args = parser.parse_args()
run = Path(args.run_dir)

teacher = load_model(run / "checkpoints" / "teacher.ckpt")
student = load_model(run / "checkpoints" / "student.ckpt")
target = synthdata.load_points_csv(run / "data" / "b_eval.csv")
source = synthdata.load_points_csv(run / "data" / "a_eval.csv")
grid = TimeIndexGrid(sigma_max=teacher.sigma_max)
box = ((-1.5, 1.5), (-1.5, 1.5))

true_map = difficulty_map(student, student, teacher, box, args.resolution, CLASS_B, "true", grid)
approx_map = difficulty_map(student, student, teacher, box, args.resolution, CLASS_B, "approx", grid, m=args.m)
boundary = decision_boundary(teacher, approx_map, CLASS_B, target, grid)

# how far each probe cell is from the source data: hard cells tend to be off the data
gap = np.min(np.linalg.norm(approx_map.points[:, None] - source[None, ::4], axis=2), axis=1).reshape(approx_map.values.shape)
top = approx_map.values >= np.quantile(approx_map.values, 0.9)

print(f"spearman(true, approx)        {spearman(true_map.values, approx_map.values):.3f}")
print(f"top decile near boundary      {top_decile_near_boundary(approx_map.values, boundary):.3f}")
print(f"median distance to data: all  {np.median(gap):.3f}   top decile {np.median(gap[top]):.3f}")

out = run / "plots"
out.mkdir(parents=True, exist_ok=True)
heatmap_svg(out / "difficulty_true.svg", np.log(true_map.values + 1e-12), "log true difficulty")
heatmap_svg(out / "difficulty_approx.svg", approx_map.values, "one-step estimate")
heatmap_svg(out / "decision_boundary.svg", boundary.astype(float), "teacher decision boundary")
print("heat maps in", out)
