"""Experiment orchestration on top of the estimators.

Covers teacher pretraining, student training under every strategy, the
two-phase uncertainty protocol (learn sigma jointly with a throwaway student,
then retrain with the fixed coefficient), and gradient-balance summaries.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import losses as L
from .curves import CurveRecord, export_curves, load_curves  # noqa: F401  (re-exported)
from .data import GenConfig, generate_dataset, load_dataset, split_corpus
from .estimators import CTCTeacher, StudentRecognizer, round_balance
from .exceptions import ConfigError, ContractError
from .metrics import EvalReport
from .optim import SGD

logger = logging.getLogger(__name__)

SPLITS = ("teacher", "train", "val", "test")


@dataclass
class ExperimentConfig:
    """Everything that determines one run; ``(config, seed)`` fixes every output byte.

    ``seed`` drives initialisation and batch order; ``data_seed`` drives the
    synthetic corpus, so several training seeds can share one dataset.
    """

    strategy: str = "baseline-CE"
    temperature: float = 1.0
    alpha: float = 0.5
    balance_coef: Optional[float] = None
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 16
    patience: Optional[int] = 5
    clip_norm: Optional[float] = 5.0
    seed: int = 0
    data_seed: int = 0
    hidden: int = 32
    fc_hidden: int = 32
    lstm_layers: int = 2
    sigma_lr: float = 1e-2
    teacher_hidden: int = 32
    teacher_lstm_layers: int = 2
    teacher_lr: float = 3e-3
    teacher_epochs: int = 20
    teacher_batch_size: int = 16
    log_every: int = 1
    max_log_records: Optional[int] = None
    gen: GenConfig = field(default_factory=GenConfig)
    data_dir: Optional[str] = None
    out_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.gen, dict):
            self.gen = GenConfig(**self.gen)
        if self.strategy not in L.STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; pick one of {L.STRATEGIES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for key in ("epochs", "batch_size", "teacher_epochs", "teacher_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.lr <= 0 or self.teacher_lr <= 0:
            raise ConfigError("learning rates must be positive")
        # range checks on T, alpha and a live in DistillConfig
        self.distill_config()

    def distill_config(self):
        return L.DistillConfig(strategy=self.strategy, temperature=self.temperature,
                               alpha=self.alpha,
                               balance_coef=1.0 if self.balance_coef is None else self.balance_coef)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["gen"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["gen"].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides):
        """Read a JSON config; keyword overrides (e.g. from the command line) win."""
        with open(path) as fh:
            d = json.load(fh)
        gen = dict(d.pop("gen", {}))
        gen.update(overrides.pop("gen", {}))
        d.update(overrides)
        d["gen"] = gen
        return cls.from_dict(d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def run_name(self):
        """Deterministic stem for a student run's output files."""
        parts = [self.strategy]
        if self.strategy == "frame-JLF1":
            parts.append(f"T{self.temperature:g}-a{self.alpha:g}")
        if self.strategy == "frame-JLF3":
            parts.append(f"a{self.balance_coef:g}")
        parts.append(f"s{self.seed}")
        return "-".join(parts)


@dataclass
class TeacherResult:
    model: CTCTeacher
    report: EvalReport
    digest: str


@dataclass
class StudentResult:
    model: StudentRecognizer
    report: EvalReport
    curves: list
    digest: str


@dataclass
class SigmaPhaseResult:
    sigma1: float
    sigma2: float
    a: float
    a_rounded: float
    kl: float
    ce: float
    steps: int

    def __post_init__(self):
        if self.a != L.balance_coefficient(self.sigma1, self.sigma2):
            raise ContractError("a must equal sigma2^2 / sigma1^2 of the stored sigmas")

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n"
                       for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(sigma1=float(kv["sigma1"]), sigma2=float(kv["sigma2"]), a=float(kv["a"]),
                   a_rounded=float(kv["a_rounded"]), kl=float(kv["kl"]), ce=float(kv["ce"]),
                   steps=int(kv["steps"]))

    def summary(self):
        return (f"sigma1={self.sigma1:.2f} sigma2={self.sigma2:.2f} "
                f"a={self.a:.2f} (rounded {self.a_rounded:g})")


# ------------------------------------------------------------------ data


def load_splits(cfg: ExperimentConfig):
    """The four corpora: from ``cfg.data_dir`` if set, else generated from ``cfg.gen``."""
    if cfg.data_dir is None:
        return {s: generate_dataset(cfg.gen, cfg.data_seed, s) for s in SPLITS}
    vocab = cfg.gen.vocab()
    return {s: load_dataset(Path(cfg.data_dir) / f"{s}.jsonl", vocab) for s in SPLITS}


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ teacher


def pretrain_teacher(cfg: ExperimentConfig, splits=None):
    """Train the CTC teacher on the abundant teacher corpus (80/10/10 split of it).

    Early stopping watches validation PER with ``cfg.patience``; the report
    is measured on the held-out tenth.
    """
    splits = splits or load_splits(cfg)
    train, val, test = split_corpus(splits["teacher"])
    teacher = CTCTeacher(hidden=cfg.teacher_hidden, lstm_layers=cfg.teacher_lstm_layers,
                         epochs=cfg.teacher_epochs, batch_size=cfg.teacher_batch_size,
                         lr=cfg.teacher_lr, optimizer=cfg.optimizer, clip_norm=cfg.clip_norm,
                         patience=cfg.patience, random_state=cfg.seed, log_every=10)
    teacher.fit(train, X_val=val, n_classes=cfg.gen.vocab().n_classes)
    report = teacher.evaluate(test)
    logger.info("teacher acc %.4f after %d steps", report.acc, teacher.n_steps_)
    return TeacherResult(model=teacher, report=report, digest=teacher.digest())


def _as_teacher(teacher):
    if teacher is None or isinstance(teacher, CTCTeacher):
        return teacher
    if isinstance(teacher, TeacherResult):
        return teacher.model
    return CTCTeacher.from_checkpoint(teacher)


# ------------------------------------------------------------------ student


def make_student(cfg: ExperimentConfig, teacher=None, strategy=None, balance_coef=None):
    strategy = strategy or cfg.strategy
    a = cfg.balance_coef if balance_coef is None else balance_coef
    return StudentRecognizer(
        strategy=strategy, teacher=teacher, temperature=cfg.temperature, alpha=cfg.alpha,
        balance_coef=1.0 if a is None else a, hidden=cfg.hidden,
        lstm_layers=cfg.lstm_layers, fc_hidden=cfg.fc_hidden, epochs=cfg.epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, optimizer=cfg.optimizer, clip_norm=cfg.clip_norm,
        patience=cfg.patience, sigma_lr=cfg.sigma_lr, random_state=cfg.seed,
        log_every=cfg.log_every, max_log_records=cfg.max_log_records)


def train_student(cfg: ExperimentConfig, teacher=None, splits=None):
    """Train one student under ``cfg.strategy`` and score it on the test split.

    ``teacher`` may be a fitted :class:`CTCTeacher`, a :class:`TeacherResult`
    or a checkpoint path; distillation strategies require one.  The teacher's
    parameters (and checkpoint bytes, when given a path) are hashed before
    and after the run to prove they were never touched.
    """
    dcfg = cfg.distill_config()
    if dcfg.is_distillation and teacher is None:
        raise ConfigError(f"strategy {cfg.strategy} needs a teacher checkpoint")
    if cfg.strategy == "frame-JLF3" and cfg.balance_coef is None:
        raise ConfigError("frame-JLF3 needs balance_coef (or a learned sigma file)")
    ckpt_hash = file_digest(teacher) if isinstance(teacher, (str, Path)) else None
    model = _as_teacher(teacher) if dcfg.is_distillation else None
    before = model.digest() if model is not None else None
    splits = splits or load_splits(cfg)
    student = make_student(cfg, model)
    student.fit(splits["train"], X_val=splits["val"], n_classes=cfg.gen.vocab().n_classes)
    if model is not None and model.digest() != before:
        raise RuntimeError("teacher parameters changed during student training")
    if ckpt_hash is not None and file_digest(teacher) != ckpt_hash:
        raise RuntimeError("teacher checkpoint changed during student training")
    report = student.evaluate(splits["test"])
    logger.info("%s acc %.4f", cfg.run_name(), report.acc)
    return StudentResult(model=student, report=report, curves=student.curves_,
                         digest=student.digest())


def learn_uncertainty_weights(cfg: ExperimentConfig, teacher, splits=None):
    """Phase one of the uncertainty protocol.

    Trains a throwaway student jointly with the log-scales ``rho1, rho2``
    under the uncertainty-weighted loss and returns the learned sigmas and
    ``a = sigma2^2 / sigma1^2``.  Phase two is an ordinary ``frame-JLF3``
    run with ``balance_coef = result.a_rounded``.
    """
    if teacher is None:
        raise ConfigError("learning sigmas needs a teacher")
    splits = splits or load_splits(cfg)
    student = make_student(cfg, _as_teacher(teacher), strategy="frame-MTL")
    student.fit(splits["train"], X_val=splits["val"], n_classes=cfg.gen.vocab().n_classes)
    kl, ce = frame_loss_terms(student, student.teacher, splits["train"])
    a = L.balance_coefficient(student.sigma1_, student.sigma2_)
    return SigmaPhaseResult(sigma1=student.sigma1_, sigma2=student.sigma2_, a=a,
                            a_rounded=round_balance(a), kl=kl, ce=ce, steps=student.n_steps_)


def frame_loss_terms(student, teacher, samples):
    """Frame-averaged KL and CE of a fitted student on ``samples``, without a tape."""
    kl = ce = 0.0
    with ad.no_grad():
        for s, z, t in zip(samples, student.decision_function(samples),
                           teacher.decision_function(samples)):
            k, c = L.frame_terms(t, z, s.frame_labels)
            kl, ce = kl + k.item(), ce + c.item()
    return kl / len(samples), ce / len(samples)


def sigma_stationarity_harness(k, c, lr=0.01, max_steps=5000, rtol=0.01):
    """Fit ``rho1, rho2`` by plain gradient descent with the two losses frozen.

    The uncertainty-weighted loss is stationary at ``sigma^2 = 2 * loss``;
    returns ``(sigma1^2, sigma2^2, steps)`` where ``steps`` is the first step
    at which both are within ``rtol`` of that point (or ``max_steps``).
    """
    params = ad.ParameterSet({"rho1": ad.Tensor(np.zeros(1)), "rho2": ad.Tensor(np.zeros(1))})
    opt = SGD(params, lr=lr)
    kl, ce = ad.Tensor(float(k)), ad.Tensor(float(c))
    targets = np.array([2.0 * k, 2.0 * c])
    for step in range(1, max_steps + 1):
        loss = L.mtl_loss(kl, ce, params["rho1"], params["rho2"])
        opt.step(ad.backward(loss, params))
        params.zero_grad()
        s2 = np.exp(2 * np.array([params["rho1"].data[0], params["rho2"].data[0]]))
        if np.all(np.abs(s2 - targets) <= rtol * targets):
            break
    return float(s2[0]), float(s2[1]), step


# ------------------------------------------------------------------ curve summaries


def early_grad_ratio(records, n=10):
    """Mean ``grad_kl / grad_ce`` over the first ``n`` logged steps."""
    recs = [r for r in records[:n] if r.grad_kl is not None and r.grad_ce]
    if not recs:
        raise ContractError("records carry no KL/CE gradient norms")
    return float(np.mean([r.grad_kl / r.grad_ce for r in recs]))


def balance_gap(records, a, n=50):
    """Mean ``|a * grad_kl / grad_ce - 1|`` over the first ``n`` logged steps."""
    recs = [r for r in records[:n] if r.grad_kl is not None and r.grad_ce]
    if not recs:
        raise ContractError("records carry no KL/CE gradient norms")
    return float(np.mean([abs(a * r.grad_kl / r.grad_ce - 1.0) for r in recs]))
