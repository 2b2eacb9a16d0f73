"""Single-step bidirectional translation between 2-D toy domains by consistency distillation."""

from .edm import CLASS_A, CLASS_B, EDMDenoiser, GaussianOracle, TeacherConfig, train_teacher
from .errors import NumericalError
from .losses import approx_difficulty, cycle_loss, dmcd_grad, fake_dsm_step, true_difficulty
from .metrics import MetricReport, cycle_error, difficulty_map, mmd2, mode_coverage, teacher_agreement
from .nnet import Adam, DenoiserNet, EmaTracker, NetConfig
from .solver import TimeIndexGrid, ddib_translate, heun_step, karras_grid, solve
from .student import StudentModel, gen_pair, ibcd_loss, student_coeffs
from .synthdata import DatasetSpec, sample_domain
from .trainer import DistillConfig, TrainReport, distill, vanilla_ibcd

__all__ = [
    "CLASS_A", "CLASS_B", "Adam", "DatasetSpec", "DenoiserNet", "DistillConfig", "EDMDenoiser", "EmaTracker",
    "GaussianOracle", "MetricReport", "NetConfig", "NumericalError", "StudentModel", "TeacherConfig",
    "TimeIndexGrid", "TrainReport", "approx_difficulty", "cycle_error", "cycle_loss", "ddib_translate",
    "difficulty_map", "distill", "dmcd_grad", "fake_dsm_step", "gen_pair", "heun_step", "ibcd_loss",
    "karras_grid", "mmd2", "mode_coverage", "sample_domain", "solve", "student_coeffs", "teacher_agreement",
    "train_teacher", "true_difficulty", "vanilla_ibcd",
]
