"""Distillation loop: IBCD with optional distribution matching, adaptive weighting and cycle loss.

Step ``j`` targets class A when ``j`` is even and class B when odd.  Until
``transition_step`` only the IBCD term is active; afterwards the DMCD field
and the cycle gradient are added and the fake model follows the student
outputs with one DSM step per iteration.  By default the student learning
rate also decays (cosine) after the transition; with ``lr_student_final=None``
and both weights at zero the loop is the plain consistency loop of
``vanilla_ibcd``, step for step.

Randomness is split into independent streams (data, pair, dmcd, cycle, fake)
spawned from the seed, so switching a loss term off never shifts the draws
seen by the others.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .edm import EDMDenoiser
from .errors import NumericalError
from .losses import G_CHOICES, approx_difficulty, cycle_loss, dmcd_field, fake_dsm_step
from .nnet import Adam, EmaTracker, add_scaled, config_hash, load_archive, net_from_tensors, save_archive
from .solver import TimeIndexGrid
from .student import StudentModel, gen_pair, ibcd_output_grad, ibcd_target

log = logging.getLogger(__name__)

STREAMS = ("data", "pair", "dmcd", "cycle", "fake")
# settings that only matter once the transition step has been reached, plus bookkeeping
POST_TRANSITION = ("lambda_dmcd", "lambda_cycle", "lr_fake", "lr_student_final", "g", "d_dmcd", "d_cycle", "total_steps",
                   "eval_every", "checkpoint_every", "run_id", "log_every")
DISTANCES = ("sq_l2", "l1", "pseudo_huber")


@dataclass
class DistillConfig:
    total_steps: int = 24_000
    transition_step: int = 16_000
    batch_size: int = 256  # per domain
    lr_student: float = 1e-3
    lr_fake: float = 1e-3
    # cosine decay of the student lr from transition_step to total_steps; None keeps it constant
    lr_student_final: float | None = 1e-4
    ema_decay: float = 0.95
    inference_ema_decay: float = 0.999
    lambda_dmcd: float = 0.1
    lambda_cycle: float = 0.001
    g: str = "shifted_clamped_log"
    d_ibcd: str = "sq_l2"
    d_dmcd: str = "sq_l2"
    d_cycle: str = "l1"
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    run_id: str = "run"
    log_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 0 or self.transition_step < 0:
            raise ValueError("step counts must be non-negative")
        if self.transition_step > self.total_steps:
            raise ValueError(f"transition_step {self.transition_step} > total_steps {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_student", "lr_fake", "lambda_dmcd", "lambda_cycle"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr_student_final is not None and self.lr_student_final < 0:
            raise ValueError("lr_student_final must be non-negative")
        for name in ("ema_decay", "inference_ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.g not in G_CHOICES:
            raise ValueError(f"g must be one of {G_CHOICES}")
        for name in ("d_ibcd", "d_dmcd", "d_cycle"):
            if getattr(self, name) not in DISTANCES:
                raise ValueError(f"{name} must be one of {DISTANCES}")

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown distill keys: {sorted(unknown)}")
        return cls(**d)


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    seqs = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, seqs)}


def _points(d) -> np.ndarray:
    arr = np.asarray(getattr(d, "points", d), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise ValueError("datasets must be non-empty (n, 2) arrays")
    return arr


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock: float = 0.0

    def log_step(self, **rec) -> None:
        self.steps.append(rec)

    def component(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.steps], dtype=float)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.steps:
                fh.write(json.dumps({"kind": "step", **r}) + "\n")
            for r in self.evals:
                fh.write(json.dumps({"kind": "eval", **r}) + "\n")
            fh.write(json.dumps({"kind": "summary", "wall_clock": self.wall_clock, "checkpoints": self.checkpoints}) + "\n")


class Distiller:
    """Holds the student, both EMA copies, the fake model and their optimizers."""

    def __init__(self, cfg: DistillConfig, teacher: EDMDenoiser, dataset_a, dataset_b, grid: TimeIndexGrid | None = None,
                 student: StudentModel | None = None, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.teacher = teacher
        self.grid = grid or TimeIndexGrid(sigma_max=teacher.sigma_max)
        if abs(self.grid.sigma_max - teacher.sigma_max) > 0:
            raise ValueError("grid sigma_max differs from the teacher's")
        self.data = (_points(dataset_a), _points(dataset_b))
        if student is None:
            student = StudentModel.from_teacher(teacher, self.grid)
        elif student.net.config != teacher.net.config:
            raise ValueError(f"student/teacher network mismatch: {student.net.config} vs {teacher.net.config}")
        self.student = student
        self.ema = EmaTracker(student.net, cfg.ema_decay)
        self.ema_inf = EmaTracker(student.net, cfg.inference_ema_decay)
        self.fake = teacher.copy(role="fake")
        self.opt = Adam(student.net.params, cfg.lr_student)
        self.fake_opt = Adam(self.fake.net.params, cfg.lr_fake)
        self.rng = spawn_streams(cfg.seed)
        self.step_index = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.last_checkpoint: str | None = None
        self.report = TrainReport()

    @property
    def ema_student(self) -> StudentModel:
        return self.student.with_net(self.ema.shadow)

    @property
    def inference_student(self) -> StudentModel:
        return self.student.with_net(self.ema_inf.shadow)

    def sample_batches(self):
        a, b = self.data
        rng = self.rng["data"]
        n = self.cfg.batch_size
        return a[rng.integers(0, len(a), n)], b[rng.integers(0, len(b), n)]

    def student_lr(self, j: int) -> float:
        cfg = self.cfg
        if cfg.lr_student_final is None or j < cfg.transition_step:
            return cfg.lr_student
        frac = (j - cfg.transition_step) / max(cfg.total_steps - cfg.transition_step, 1)
        return cfg.lr_student_final + 0.5 * (cfg.lr_student - cfg.lr_student_final) * (1.0 + np.cos(np.pi * frac))

    def step(self) -> dict:
        cfg = self.cfg
        j = self.step_index
        self.opt.lr = self.student_lr(j)
        c = j % 2
        xa, xb = self.sample_batches()
        pair = gen_pair(self.teacher, xa, xb, c, self.grid, self.rng["pair"])
        target = ibcd_target(self.ema_student, pair)
        out, cache = self.student.forward(pair.x_t1, pair.t1, c)
        ibcd_val, dout, _ = ibcd_output_grad(out, target, cfg.d_ibcd)
        rec = {"step": j, "c": c, "ibcd": ibcd_val, "dmcd_norm": 0.0, "cycle": 0.0, "fake_dsm": 0.0}
        active = j >= cfg.transition_step
        use_dmcd = active and cfg.lambda_dmcd > 0
        if use_dmcd:
            d_hat = approx_difficulty(self.student, self.ema_student, pair, cfg.g, cfg.d_dmcd, f_out=out, target=target)
            fld = dmcd_field(self.teacher, self.fake, out, c, d_hat, self.grid, self.rng["dmcd"])
            rec["dmcd_norm"] = float(np.sqrt(np.mean(np.sum((fld * len(fld)) ** 2, axis=1))))
            rec["d_hat_mean"] = float(np.mean(d_hat))
            dout = dout + cfg.lambda_dmcd * fld
        grads, _ = self.student.backward(cache, dout)
        if active and cfg.lambda_cycle > 0:
            cyc = cycle_loss(self.student, xa, xb, self.rng["cycle"], cfg.d_cycle)
            add_scaled(grads, cyc.grads, cfg.lambda_cycle)
            rec["cycle"] = cyc.value
        total = rec["ibcd"] + cfg.lambda_cycle * rec["cycle"]
        if not np.isfinite(total):
            raise NumericalError(f"non-finite total loss at step {j}; last good checkpoint: {self.last_checkpoint}")
        try:
            self.opt.step(self.student.net, grads)
        except NumericalError as exc:
            raise NumericalError(f"step {j}: {exc}; last good checkpoint: {self.last_checkpoint}") from exc
        self.ema.update(self.student.net)
        self.ema_inf.update(self.student.net)
        if use_dmcd:
            rep = fake_dsm_step(self.fake, out, c, self.rng["fake"], self.fake_opt)
            rec["fake_dsm"] = rep.loss
        self.step_index += 1
        return rec

    def run(self, evaluate=None, until: int | None = None) -> tuple[StudentModel, TrainReport]:
        """Train up to ``until`` (default ``total_steps``)."""
        cfg = self.cfg
        stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
        t0 = time.perf_counter()
        while self.step_index < stop:
            rec = self.step()
            rec["time"] = time.perf_counter() - t0
            self.report.log_step(**rec)
            k = self.step_index
            if cfg.log_every and k % cfg.log_every == 0:
                log.info("distill step %d ibcd %.5f cycle %.4f", k, rec["ibcd"], rec["cycle"])
            if evaluate is not None and cfg.eval_every and k % cfg.eval_every == 0:
                self.report.evals.append({"step": k, **evaluate(k, self.inference_student)})
            if self.out_dir is not None and cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
                self.save_checkpoint()
        self.report.wall_clock += time.perf_counter() - t0
        return self.inference_student, self.report

    def fork(self, **changes) -> "Distiller":
        """Independent copy continuing with different post-transition settings.

        Only allowed before the transition step, so the fork is bit-identical to
        a fresh run with the new config (all earlier steps ignore these fields).
        """
        bad = set(changes) - set(POST_TRANSITION)
        if bad:
            raise ValueError(f"cannot fork on pre-transition settings: {sorted(bad)}")
        if self.step_index > self.cfg.transition_step:
            raise ValueError("fork must happen at or before the transition step")
        cfg = replace(self.cfg, **changes)
        new = copy.deepcopy(self, memo={id(self.teacher): self.teacher, id(self.data): self.data})
        new.cfg = cfg
        new.fake_opt.lr = cfg.lr_fake
        return new

    # --- checkpoints ---------------------------------------------------------

    def checkpoint_path(self, step: int | None = None) -> Path:
        if self.out_dir is None:
            raise ValueError("no output directory configured")
        k = self.step_index if step is None else step
        return self.out_dir / self.cfg.run_id / f"step_{k}.ckpt"

    def save_checkpoint(self, path=None) -> str:
        path = Path(path) if path is not None else self.checkpoint_path()
        tensors = {}
        for prefix, net in (("student/", self.student.net), ("ema/", self.ema.shadow),
                            ("ema_inf/", self.ema_inf.shadow), ("fake/", self.fake.net)):
            tensors.update({prefix + k: v for k, v in net.params.items()})
        for prefix, opt in (("opt_m/", self.opt.m), ("opt_v/", self.opt.v), ("fake_m/", self.fake_opt.m), ("fake_v/", self.fake_opt.v)):
            tensors.update({prefix + k: v for k, v in opt.items()})
        cfg_dict = asdict(self.cfg)
        meta = {
            "role": "distill_state",
            "step": self.step_index,
            "config": cfg_dict,
            "config_hash": config_hash(cfg_dict),
            "net_config": asdict(self.student.net.config),
            "student": self.student.meta(),
            "fake": self.fake.meta(),
            "opt_steps": [self.opt.step_count, self.fake_opt.step_count],
            "rng": {k: g.bit_generator.state for k, g in self.rng.items()},
        }
        save_archive(path, tensors, meta)
        self.last_checkpoint = str(path)
        self.report.checkpoints.append(str(path))
        return str(path)

    def load_checkpoint(self, path) -> None:
        """Restore full training state so that continuing reproduces an uninterrupted run."""
        tensors, meta = load_archive(path)
        if meta.get("role") != "distill_state":
            raise ValueError(f"{path}: not a distillation state checkpoint")
        if meta["config_hash"] != config_hash(asdict(self.cfg)):
            raise ValueError(f"{path}: checkpoint was written with a different config")
        nc = meta["net_config"]
        self.student.net.params = net_from_tensors(tensors, nc, "student/").params
        self.ema.shadow.params = net_from_tensors(tensors, nc, "ema/").params
        self.ema_inf.shadow.params = net_from_tensors(tensors, nc, "ema_inf/").params
        self.fake.net.params = net_from_tensors(tensors, nc, "fake/").params
        for prefix, store in (("opt_m/", self.opt.m), ("opt_v/", self.opt.v), ("fake_m/", self.fake_opt.m), ("fake_v/", self.fake_opt.v)):
            for k in store:
                store[k] = tensors[prefix + k].copy()
        self.opt.step_count, self.fake_opt.step_count = meta["opt_steps"]
        for k, state in meta["rng"].items():
            self.rng[k].bit_generator.state = state
        self.step_index = meta["step"]
        self.last_checkpoint = str(path)


def distill(cfg: DistillConfig, teacher: EDMDenoiser, dataset_a, dataset_b, grid: TimeIndexGrid | None = None,
            out_dir=None, evaluate=None) -> tuple[StudentModel, TrainReport]:
    """Run the full schedule; returns the inference-EMA student and the report."""
    return Distiller(cfg, teacher, dataset_a, dataset_b, grid, out_dir=out_dir).run(evaluate)


def vanilla_ibcd(teacher: EDMDenoiser, dataset_a, dataset_b, steps: int, batch_size: int = 256, lr: float = 1e-3,
                 mu: float = 0.95, seed: int = 0, grid: TimeIndexGrid | None = None) -> StudentModel:
    """Plain consistency-only loop, written out step by step; returns the online student."""
    grid = grid or TimeIndexGrid(sigma_max=teacher.sigma_max)
    a, b = _points(dataset_a), _points(dataset_b)
    rng = spawn_streams(seed)
    theta = StudentModel.from_teacher(teacher, grid)
    theta_minus = theta.with_net(teacher.net.copy())
    opt = Adam(theta.net.params, lr)
    for j in range(steps):
        c = 0 if j % 2 == 0 else 1
        xa = a[rng["data"].integers(0, len(a), batch_size)]
        xb = b[rng["data"].integers(0, len(b), batch_size)]
        pair = gen_pair(teacher, xa, xb, c, grid, rng["pair"])
        target = theta_minus(pair.x_hat_t2, pair.t2, c)
        out, cache = theta.forward(pair.x_t1, pair.t1, c)
        diff = out - target
        grads, _ = theta.backward(cache, 2.0 * diff / len(diff))
        opt.step(theta.net, grads)
        for k, v in theta.net.params.items():
            s = theta_minus.net.params[k]
            s *= mu
            s += (1.0 - mu) * v
    return theta
