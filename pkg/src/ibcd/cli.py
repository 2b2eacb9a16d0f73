"""Command-line entry point and run-directory management.

Run directory layout::

    config.snapshot          JSON RunConfig used for every stage
    data/                    {a,b}_{train,eval}.csv
    checkpoints/             teacher.ckpt, student.ckpt, {run_id}/step_{k}.ckpt
    metrics/                 reports (JSON / JSON lines), translations, difficulty grids (CSV)
    plots/                   SVG figures written by export-plots

Exit codes: 0 success, 1 validation error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import synthdata
from .edm import CLASS_A, CLASS_B, EDMDenoiser, TeacherConfig, train_teacher
from .errors import NumericalError
from .metrics import (decision_boundary, difficulty_map, evaluate_direction, mmd2, cycle_error,
                      top_decile_near_boundary)
from .nnet import NetConfig, load_archive
from .plots import heatmap_svg, scatter_svg
from .solver import TimeIndexGrid, ddib_translate
from .student import StudentModel
from .trainer import DistillConfig, Distiller

log = logging.getLogger("ibcd")

SNAPSHOT = "config.snapshot"
PRESETS = {"two_gaussians": synthdata.two_gaussians, "scurve_swissroll": synthdata.scurve_swissroll}
DOMAINS = {"a": CLASS_A, "b": CLASS_B}


def _section(obj, drop=()) -> dict:
    return {k: v for k, v in asdict(obj).items() if k not in drop}


DEFAULTS: dict = {
    "seed": 0,
    "data": {"preset": "scurve_swissroll", "n_train": 20_000, "n_eval": 2_000, "target_std": 0.5},
    "solver": {"N": 40, "sigma_min": 0.002, "sigma_max": 80.0, "rho": 7.0},
    "teacher": _section(TeacherConfig(), drop=("seed", "sigma_max")),
    "distill": _section(DistillConfig(), drop=("seed",)),
    "eval": {"box": [[-1.5, 1.5], [-1.5, 1.5]], "resolution": 64, "m": 16, "g": "log", "modes": 8, "probe": 256},
}

DOCS = {
    "seed": "base seed for data, teacher and distillation; IBCD_SEED overrides it",
    "data.preset": f"domain pair, one of {sorted(PRESETS)}",
    "data.n_train": "training points per domain",
    "data.n_eval": "held-out points per domain",
    "data.target_std": "per-axis std after normalization",
    "solver": "signed sigma grid: N, sigma_min, sigma_max, rho",
    "teacher": "denoiser training: steps, batch_size, cosine lr from lr to lr_final, ema_decay, net shape",
    "distill": "student training: steps, transition, learning rates (lr_student_final: cosine decay after the transition), EMA decays, loss weights, g, distances",
    "eval.box": "source-plane box [[x0, x1], [y0, y1]] for difficulty maps",
    "eval.resolution": "difficulty-map cells per axis",
    "eval.m": "sampled pair indices per point for the one-step difficulty estimate",
    "eval.g": "difficulty transform used for maps",
    "eval.modes": "K-means clusters used for mode coverage and boundary extraction",
    "eval.probe": "points per domain used by in-training evaluation",
}


class ValidationError(Exception):
    pass


def _check_keys(cfg: dict, ref: dict, path: str = "") -> None:
    for k, v in cfg.items():
        where = f"{path}{k}"
        if k not in ref:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(ref[k], dict) and ref[k]:
            if not isinstance(v, dict):
                raise ValidationError(f"config key {where!r} must be a section")
            _check_keys(v, ref[k], where + ".")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k] else v
    return out


class RunConfig:
    """Nested config document addressable by dotted paths."""

    def __init__(self, data: dict | None = None):
        data = data or {}
        _check_keys(data, DEFAULTS)
        self.data = _merge(DEFAULTS, data)
        self.validate()

    def get(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ValidationError(f"unknown config key {dotted!r}")
            node = node[part]
        return node

    def set(self, dotted: str, value, validate: bool = True) -> None:
        parts = dotted.split(".")
        self.get(dotted)
        node = self.data
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
        if validate:
            self.validate()

    def apply_overrides(self, items) -> None:
        for item in items or ():
            if "=" not in item:
                raise ValidationError(f"override {item!r} must look like key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set(key.strip(), value, validate=False)
        self.validate()

    def validate(self) -> None:
        d = self.data
        if d["data"]["preset"] not in PRESETS:
            raise ValidationError(f"data.preset must be one of {sorted(PRESETS)}")
        try:
            self.grid()
            self.teacher_config()
            self.distill_config()
            NetConfig(**d["teacher"]["net"])
        except (TypeError, ValueError) as exc:
            raise ValidationError(str(exc)) from exc

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def grid(self) -> TimeIndexGrid:
        return TimeIndexGrid(**self.data["solver"])

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(**self.data["teacher"], seed=self.seed, sigma_max=self.data["solver"]["sigma_max"])

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**self.data["distill"], seed=self.seed)

    def specs(self):
        return PRESETS[self.data["data"]["preset"]](self.data["data"]["target_std"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def resolve_config(run_dir: Path | None, config_path=None, overrides=None, write: bool = True) -> RunConfig:
    """Snapshot in ``run_dir`` < ``--config`` file < ``--set`` overrides < ``IBCD_SEED``."""
    snap = run_dir / SNAPSHOT if run_dir is not None else None
    if config_path is not None:
        cfg = RunConfig.load(config_path)
    elif snap is not None and snap.exists():
        cfg = RunConfig.load(snap)
    else:
        cfg = RunConfig()
    cfg.apply_overrides(overrides)
    env = os.environ.get("IBCD_SEED")
    if env is not None:
        try:
            cfg.set("seed", int(env))
        except ValueError as exc:
            raise ValidationError(f"IBCD_SEED must be an integer, got {env!r}") from exc
    if write and run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(snap)
    return cfg


def derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# --- model loading -----------------------------------------------------------------


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"missing file: {p}")
    return p


def load_model(path):
    """Teacher/fake checkpoints load as :class:`EDMDenoiser`, student checkpoints as :class:`StudentModel`."""
    _, meta = load_archive(_require(path))
    role = meta.get("role")
    if role == "student":
        return StudentModel.load(path)
    if role in ("teacher", "fake"):
        return EDMDenoiser.load(path)
    raise ValidationError(f"{path}: unsupported checkpoint role {role!r}")


def _grid_for(model, cfg: RunConfig) -> TimeIndexGrid:
    s = dict(cfg.data["solver"])
    s["sigma_max"] = model.sigma_max
    if isinstance(model, StudentModel):
        s["sigma_min"] = model.sigma_min
    return TimeIndexGrid(**s)


# --- subcommands ---------------------------------------------------------------


def _paths(run_dir: Path) -> dict[str, Path]:
    return {
        "data": run_dir / "data",
        "ckpt": run_dir / "checkpoints",
        "metrics": run_dir / "metrics",
        "plots": run_dir / "plots",
    }


def cmd_gen_data(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = resolve_config(run_dir, args.config, args.set)
    p = _paths(run_dir)
    p["data"].mkdir(parents=True, exist_ok=True)
    d = cfg.data["data"]
    for k, spec in enumerate(cfg.specs()):
        name = "ab"[k]
        synthdata.save_points_csv(p["data"] / f"{name}_train.csv",
                                  synthdata.sample_domain(spec, d["n_train"], derived_seed(cfg.seed, 1, k)).points)
        synthdata.save_points_csv(p["data"] / f"{name}_eval.csv",
                                  synthdata.sample_domain(spec, d["n_eval"], derived_seed(cfg.seed, 2, k)).points)
    print(json.dumps({"data_dir": str(p["data"]), "n_train": d["n_train"], "n_eval": d["n_eval"]}))
    return 0


def _load_split(run_dir: Path, split: str):
    data = _paths(run_dir)["data"]
    missing = [str(data / f"{n}_{split}.csv") for n in "ab" if not (data / f"{n}_{split}.csv").exists()]
    if missing:
        raise ValidationError("missing data (run gen-data first): " + ", ".join(missing))
    return tuple(synthdata.load_points_csv(data / f"{n}_{split}.csv") for n in "ab")


def cmd_train_teacher(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = resolve_config(run_dir, args.config, args.set)
    a, b = _load_split(run_dir, "train")
    p = _paths(run_dir)
    p["ckpt"].mkdir(parents=True, exist_ok=True)
    p["metrics"].mkdir(parents=True, exist_ok=True)
    tcfg = cfg.teacher_config()
    every = max(1, tcfg.steps // 200)
    with open(p["metrics"] / "teacher_train.jsonl", "w") as fh:
        def cb(step, rep):
            if step % every == 0:
                fh.write(json.dumps({"step": step, "loss": rep.loss, "grad_norm": rep.grad_norm}) + "\n")
        teacher = train_teacher(tcfg, a, b, callback=cb)
    out = p["ckpt"] / "teacher.ckpt"
    teacher.save(out, {"seed": cfg.seed, "steps": tcfg.steps})
    print(json.dumps({"teacher": str(out)}))
    return 0


def probe_evaluator(teacher, a_eval, b_eval, grid: TimeIndexGrid, n: int):
    a_eval, b_eval = a_eval[:n], b_eval[:n]
    ref_ab = ddib_translate(teacher, a_eval, CLASS_A, CLASS_B, grid)
    ref_ba = ddib_translate(teacher, b_eval, CLASS_B, CLASS_A, grid)

    def evaluate(step, student):
        out = {}
        for name, x, c_src, tgt, ref in (("a_to_b", a_eval, CLASS_A, b_eval, ref_ab), ("b_to_a", b_eval, CLASS_B, a_eval, ref_ba)):
            y = student(x, grid.epsilon(c_src), 1 - c_src)
            out[name] = {
                "mmd2": mmd2(y, tgt),
                "cycle_err_mean": cycle_error(student, x, c_src),
                "teacher_agreement_rmse": float(np.sqrt(np.mean(np.sum((y - ref) ** 2, axis=1)))),
            }
        return out

    return evaluate


def cmd_distill(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = resolve_config(run_dir, args.config, args.set)
    p = _paths(run_dir)
    teacher = load_model(args.teacher or p["ckpt"] / "teacher.ckpt")
    if not isinstance(teacher, EDMDenoiser):
        raise ValidationError("distill needs a teacher checkpoint")
    a, b = _load_split(run_dir, "train")
    a_eval, b_eval = _load_split(run_dir, "eval")
    grid = _grid_for(teacher, cfg)
    dcfg = cfg.distill_config()
    p["metrics"].mkdir(parents=True, exist_ok=True)
    dist = Distiller(dcfg, teacher, a, b, grid, out_dir=p["ckpt"])
    evaluate = probe_evaluator(teacher, a_eval, b_eval, grid, cfg.data["eval"]["probe"]) if dcfg.eval_every else None
    student, report = dist.run(evaluate)
    out = p["ckpt"] / "student.ckpt"
    student.save(out, {"seed": cfg.seed, "steps": dcfg.total_steps})
    report.to_jsonl(p["metrics"] / "distill_report.jsonl")
    print(json.dumps({"student": str(out), "wall_clock": report.wall_clock}))
    return 0


def cmd_translate(args) -> int:
    cfg = resolve_config(Path(args.run_dir) if args.run_dir else None, args.config, args.set, write=False)
    model = load_model(args.ckpt)
    c_tgt = DOMAINS[args.to]
    c_src = DOMAINS[args.src] if args.src else 1 - c_tgt
    x = synthdata.load_points_csv(_require(args.inp))
    grid = _grid_for(model, cfg)
    if isinstance(model, StudentModel):
        if c_src == c_tgt:
            raise ValidationError("a single-step student translates between different domains only")
        y, mode, nfe = model(x, grid.epsilon(c_src), c_tgt), "student", 1
    else:
        y, trace = ddib_translate(model, x, c_src, c_tgt, grid, return_trace=True)
        mode, nfe = "ddib", trace.nfe
    synthdata.save_points_csv(args.out, y)
    print(json.dumps({"mode": mode, "n": len(y), "nfe": nfe, "out": str(args.out)}))
    return 0


def cmd_cycle(args) -> int:
    model = load_model(args.ckpt)
    if not isinstance(model, StudentModel):
        raise ValidationError("cycle needs a student checkpoint")
    c_src = DOMAINS[args.src]
    x = synthdata.load_points_csv(_require(args.inp))
    c_tgt = 1 - c_src
    z = model(model(x, model.epsilon(c_src), c_tgt), model.epsilon(c_tgt), c_src)
    if args.out:
        synthdata.save_points_csv(args.out, z)
    print(json.dumps({"cycle_err_mean": cycle_error(model, x, c_src), "n": len(x)}))
    return 0


def _eval_sets(args, cfg: RunConfig):
    if args.run_dir and (Path(args.run_dir) / "data" / "a_eval.csv").exists():
        return _load_split(Path(args.run_dir), "eval")
    n = cfg.data["data"]["n_eval"]
    return tuple(synthdata.sample_domain(s, n, derived_seed(cfg.seed, 2, k)).points for k, s in enumerate(cfg.specs()))


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    cfg = resolve_config(run_dir, args.config, args.set, write=False)
    run_dir = run_dir or Path(".")
    student = load_model(args.student or _paths(run_dir)["ckpt"] / "student.ckpt")
    teacher = load_model(args.teacher or _paths(run_dir)["ckpt"] / "teacher.ckpt")
    if not isinstance(student, StudentModel) or not isinstance(teacher, EDMDenoiser):
        raise ValidationError("eval needs --student (student checkpoint) and --teacher (teacher checkpoint)")
    grid = _grid_for(student, cfg)
    a_eval, b_eval = _eval_sets(args, cfg)
    reports = {}
    mdir = _paths(run_dir)["metrics"]
    if args.run_dir:
        mdir.mkdir(parents=True, exist_ok=True)
    for c_src, x, tgt in ((CLASS_A, a_eval, b_eval), (CLASS_B, b_eval, a_eval)):
        rep = evaluate_direction(student, teacher, x, tgt, c_src, grid, seed=cfg.seed)
        reports[rep.direction] = rep.to_dict()
        if args.run_dir:
            synthdata.save_points_csv(mdir / f"{rep.direction}.csv", student(x, grid.epsilon(c_src), 1 - c_src))
    text = json.dumps(reports, indent=2, sort_keys=True)
    if args.run_dir:
        (mdir / "eval.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_difficulty_map(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    cfg = resolve_config(run_dir, args.config, args.set, write=False)
    run_dir = run_dir or Path(".")
    student = load_model(args.student or _paths(run_dir)["ckpt"] / "student.ckpt")
    teacher = load_model(args.teacher or _paths(run_dir)["ckpt"] / "teacher.ckpt")
    if not isinstance(student, StudentModel) or not isinstance(teacher, EDMDenoiser):
        raise ValidationError("difficulty-map needs a student and a teacher checkpoint")
    ema = load_model(args.ema) if args.ema else student
    ev = cfg.data["eval"]
    c = DOMAINS[args.to]
    grid = _grid_for(student, cfg)
    fld = difficulty_map(student, ema, teacher, ev["box"], ev["resolution"], c, args.estimator, grid,
                         seed=cfg.seed, m=ev["m"], g=ev["g"])
    out = Path(args.out) if args.out else _paths(run_dir)["metrics"] / f"difficulty_to_{args.to}_{args.estimator}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    fld.to_csv(out)
    summary = {"out": str(out), "min": float(fld.values.min()), "max": float(fld.values.max())}
    if args.estimator == "approx" and args.boundary:
        tgt = _eval_sets(args, cfg)[c]
        mask = decision_boundary(teacher, fld, c, tgt, grid, ev["modes"], cfg.seed)
        summary["top_decile_near_boundary"] = top_decile_near_boundary(fld.values, mask)
    print(json.dumps(summary))
    return 0


def _read_field_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xs, ys = np.unique(rows[:, 0]), np.unique(rows[:, 1])
    return rows[:, 2].reshape(len(ys), len(xs))


PLOT_INPUTS = ("data/a_eval.csv", "data/b_eval.csv", "metrics/a_to_b.csv", "metrics/b_to_a.csv")


def export_plots(run_dir) -> list[str]:
    """Write scatter overlays and heat maps; returns the written files.  Raises if inputs are missing."""
    run_dir = Path(run_dir)
    missing = [name for name in PLOT_INPUTS if not (run_dir / name).exists()]
    if missing:
        raise ValidationError("missing artifacts: " + ", ".join(missing))
    a, b, ab, ba = (synthdata.load_points_csv(run_dir / n) for n in PLOT_INPUTS)
    plots = _paths(run_dir)["plots"]
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    for name, src, out, tgt in (("a_to_b", a, ab, b), ("b_to_a", b, ba, a)):
        path = plots / f"scatter_{name}.svg"
        scatter_svg(path, {"source": src, "translated": out, "target": tgt}, title=name.replace("_", " "))
        written.append(str(path))
    for csv_path in sorted(_paths(run_dir)["metrics"].glob("difficulty_*.csv")):
        path = plots / (csv_path.stem + ".svg")
        heatmap_svg(path, _read_field_csv(csv_path), title=csv_path.stem)
        written.append(str(path))
    return written


def cmd_export_plots(args) -> int:
    print(json.dumps({"written": export_plots(args.run_dir)}))
    return 0


def cmd_show_config(args) -> int:
    cfg = resolve_config(Path(args.run_dir) if args.run_dir else None, args.config, args.set, write=False)
    print(cfg.to_json(), end="")
    if args.docs:
        for k, v in DOCS.items():
            print(f"# {k}: {v}")
    return 0


# --- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ibcd", description="Bidirectional one-step translation between 2-D toy domains.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, run_dir_required=True):
        p.add_argument("--run-dir", required=run_dir_required, default=None)
        p.add_argument("--config", default=None, help="JSON RunConfig file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")

    for name, fn, helptext in (("gen-data", cmd_gen_data, "sample and store both domains"),
                               ("train-teacher", cmd_train_teacher, "train the class-conditional denoiser"),
                               ("distill", cmd_distill, "train the single-step student")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        if name == "distill":
            p.add_argument("--teacher", default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("translate", help="student single jump, or DDIB when given a teacher")
    common(p, False)
    p.add_argument("--to", required=True, choices=sorted(DOMAINS))
    p.add_argument("--from", dest="src", choices=sorted(DOMAINS), default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("cycle", help="round-trip source points through the student")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--from", dest="src", required=True, choices=sorted(DOMAINS))
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cycle)

    p = sub.add_parser("eval", help="MMD, cycle error, teacher agreement and mode coverage")
    common(p, False)
    p.add_argument("--student", default=None)
    p.add_argument("--teacher", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("difficulty-map", help="grid of true or one-step distillation difficulty")
    common(p, False)
    p.add_argument("--student", default=None)
    p.add_argument("--teacher", default=None)
    p.add_argument("--ema", default=None, help="EMA student checkpoint (defaults to --student)")
    p.add_argument("--to", required=True, choices=sorted(DOMAINS))
    p.add_argument("--estimator", choices=("true", "approx"), default="approx")
    p.add_argument("--boundary", action="store_true", help="also report top-decile cells near the decision boundary")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_difficulty_map)

    p = sub.add_parser("export-plots", help="SVG scatter overlays and heat maps")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_export_plots)

    p = sub.add_parser("show-config", help="print the resolved config")
    common(p, False)
    p.add_argument("--docs", action="store_true")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
