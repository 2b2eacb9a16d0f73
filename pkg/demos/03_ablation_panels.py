"""Five panels for the S-curve -> Swiss-roll direction: what each loss term adds.

Panels: the source draw, the multi-step DDIB teacher, plain consistency
distillation, + difficulty-weighted distribution matching, + the cycle term.
All three students share the same pre-transition run (the later terms are
switched on only after the transition step), so the panels differ only in
what happens afterwards.

Needs a run directory with data and a teacher, e.g. from 02_toy_pipeline.py:

    python3 demos/03_ablation_panels.py runs/toy
"""

import argparse
from pathlib import Path

from ibcd import CLASS_A, CLASS_B, DistillConfig, TimeIndexGrid, ddib_translate, synthdata
from ibcd.cli import load_model
from ibcd.metrics import evaluate_direction
from ibcd.plots import scatter_svg
from ibcd.trainer import Distiller

parser = argparse.ArgumentParser()
parser.add_argument("run_dir")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--total-steps", type=int, default=DistillConfig.total_steps)
parser.add_argument("--transition-step", type=int, default=DistillConfig.transition_step)
args = parser.parse_args()
run = Path(args.run_dir)

teacher = load_model(run / "checkpoints" / "teacher.ckpt")
a, b = (synthdata.load_points_csv(run / "data" / f"{n}_train.csv") for n in "ab")
a_eval, b_eval = (synthdata.load_points_csv(run / "data" / f"{n}_eval.csv") for n in "ab")
grid = TimeIndexGrid(sigma_max=teacher.sigma_max)

cfg = DistillConfig(seed=args.seed, total_steps=args.total_steps, transition_step=args.transition_step, eval_every=0)
base = Distiller(cfg, teacher, a, b, grid)
base.run(until=base.cfg.transition_step)
variants = {
    "vanilla": base.fork(lambda_dmcd=0.0, lambda_cycle=0.0),
    "dmcd": base.fork(lambda_cycle=0.0),
    "dmcd_cycle": base.fork(),
}

out_dir = run / "plots" / "ablation"
out_dir.mkdir(parents=True, exist_ok=True)
panels = {
    "1_source": a_eval,
    "2_ddib_teacher": ddib_translate(teacher, a_eval, CLASS_A, CLASS_B, grid),
}
print(f"{'variant':12s} {'MMD2':>8s} {'cycle':>8s} {'teacher':>8s}")
for k, (name, d) in enumerate(variants.items(), start=3):
    student, _ = d.run()
    rep = evaluate_direction(student, teacher, a_eval, b_eval, CLASS_A, grid)
    print(f"{name:12s} {rep.mmd2:8.4f} {rep.cycle_err_mean:8.4f} {rep.teacher_agreement_rmse:8.3f}", flush=True)
    panels[f"{k}_{name}"] = student(a_eval, grid.epsilon(CLASS_A), CLASS_B)

for name, pts in panels.items():
    layers = {"source": a_eval} if name == "1_source" else {"target": b_eval, name.split("_", 1)[1]: pts}
    scatter_svg(out_dir / f"{name}.svg", layers, title=name.split("_", 1)[1].replace("_", " "))
print("panels in", out_dir)
