"""Cross-modal teacher-student distillation for phoneme recognition.

A numpy reverse-mode autodiff core, CTC, the frame- and sequence-level
distillation losses, BiLSTM teacher/student models, a synthetic paired-view
corpus, PER metrics, and scikit-learn style estimators tying them together.
"""

from .autodiff import ParameterSet, Tensor, backward, grad_check, no_grad
from .ctc import ctc_loss, ctc_loss_bruteforce, greedy_decode
from .curves import CurveRecord, export_curves, load_curves
from .data import GenConfig, PhonemeVocab, Sample, generate_dataset, load_dataset, save_dataset
from .estimators import CTCTeacher, StudentRecognizer, round_balance
from .losses import DistillConfig, LossBreakdown, balance_coefficient
from .metrics import EvalReport, edit_distance, evaluate
from .trainer import (
    ExperimentConfig,
    SigmaPhaseResult,
    learn_uncertainty_weights,
    pretrain_teacher,
    train_student,
)

__version__ = "0.1.0"

__all__ = [
    "CTCTeacher", "CurveRecord", "DistillConfig", "EvalReport", "ExperimentConfig",
    "GenConfig", "LossBreakdown", "ParameterSet", "PhonemeVocab", "Sample", "SigmaPhaseResult",
    "StudentRecognizer", "Tensor", "backward", "balance_coefficient", "ctc_loss",
    "ctc_loss_bruteforce", "edit_distance", "evaluate", "export_curves", "generate_dataset",
    "grad_check", "greedy_decode", "learn_uncertainty_weights", "load_curves", "load_dataset",
    "no_grad", "pretrain_teacher", "round_balance", "save_dataset", "train_student",
]
