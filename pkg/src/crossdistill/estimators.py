"""Scikit-learn style recognisers.

``X`` is always a list of :class:`~crossdistill.data.Sample`; the labels
travel inside the samples, so ``y`` is accepted for API compatibility and
ignored.  Fitted state lives in trailing-underscore attributes.
"""

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import losses as L
from .autodiff import ParameterSet, Tensor, no_grad
from .curves import CurveRecord
from .exceptions import ConfigError, DivergenceError, SigmaCollapseError
from .metrics import evaluate, frame_mode_hypothesis
from .models import (
    StudentConfig,
    TeacherConfig,
    init_params,
    load_model,
    save_model,
    student_forward,
    teacher_forward,
)
from .optim import global_norm, make_optimizer
from .validation import check_feature_dims, check_samples, pad_sequences

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4


def round_balance(a):
    """Round to one significant figure (10.52 -> 10, 2.99 -> 3, 0.84 -> 0.8)."""
    return float(f"{a:.1g}")


class _Recognizer(BaseEstimator):
    """Shared mini-batch loop: shuffling, curve logging, divergence guard, early stopping."""

    _view = "student"

    def _decode_mode(self):
        return "frame"

    def _make_config(self, X):
        raise NotImplementedError

    def _forward(self, params, batch):
        raise NotImplementedError

    def _batch_loss(self, logits, lengths, batch, index):
        raise NotImplementedError

    def _extra_params(self):
        return {}

    # --------------------------------------------------------------- training

    def _fit_loop(self, X, X_val=None):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        rng = np.random.default_rng(self.random_state)
        params = init_params(self.config_, self.random_state)
        extra = self._extra_params()
        opt = make_optimizer(self.optimizer, params, self.lr, clip_norm=self.clip_norm)
        extra_opt = None
        if extra:
            extra_set = ParameterSet(extra)
            extra_opt = make_optimizer(self.optimizer, extra_set, self.sigma_lr)
        self.params_ = params
        records = []
        best, best_per, stale = None, np.inf, 0
        step = 0
        self.val_history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                batch = [X[i] for i in idx]
                logits, lengths = self._forward(params, batch)
                br = self._batch_loss(logits, lengths, batch, idx)
                log_now = (self.log_every and step % self.log_every == 0
                           and (self.max_log_records is None
                                or len(records) < self.max_log_records))
                norms = {}
                if log_now:
                    for key, term in br.terms().items():
                        g = ad.backward(term, params, retain_graph=True)
                        norms[key] = global_norm(g)
                    params.zero_grad()
                wrt = params if not extra else ParameterSet({**dict(params.items()), **extra})
                grads = ad.backward(br.total, wrt)
                total = br.total.item()
                if not np.isfinite(total) or not np.isfinite(global_norm(grads)):
                    raise DivergenceError(f"non-finite loss or gradient at step {step}",
                                          records[-20:])
                opt.step({n: grads[n] for n in params})
                if extra_opt is not None:
                    extra_opt.step({n: grads[n] for n in extra})
                wrt.zero_grad()
                if log_now:
                    vals = br.values()
                    records.append(CurveRecord(
                        step=step, total=total, kl=vals.get("kl"), ce=vals.get("ce"),
                        ctc=vals.get("ctc"), cos=vals.get("cos_term"),
                        grad_kl=norms.get("kl"), grad_ce=norms.get("ce"),
                        grad_ctc=norms.get("ctc"), grad_cos=norms.get("cos_term")))
                step += 1
                self._after_step(step)
            if X_val is not None and len(X_val):
                rep = evaluate(self, X_val, self._decode_mode())
                self.val_history_.append(rep.per)
                logger.debug("epoch %d val PER %.4f", epoch, rep.per)
                if rep.per < best_per:
                    best_per, stale = rep.per, 0
                    best = {n: params[n].data.copy() for n in params}
                    self.best_epoch_ = epoch
                else:
                    stale += 1
                    if self.patience is not None and stale >= self.patience:
                        break
        if best is not None:
            for n in params:
                params[n].data[...] = best[n]
        self.n_steps_ = step
        self.curves_ = records
        return self

    def _after_step(self, step):
        pass

    # --------------------------------------------------------------- inference

    def decision_function(self, X):
        """Per-sample ``(frames, classes)`` logits."""
        check_is_fitted(self, "params_")
        X = check_samples(X, self._view, require_labels=False)
        out = []
        with no_grad():
            for start in range(0, len(X), 64):
                batch = X[start:start + 64]
                logits, lengths = self._forward(self.params_, batch)
                out.extend(logits.data[b, :n].copy() for b, n in enumerate(lengths))
        return out

    def predict(self, X):
        """Decoded phoneme id sequences (argmax, merge repeats, drop blanks)."""
        return [frame_mode_hypothesis(z) for z in self.decision_function(X)]

    def evaluate(self, X):
        return evaluate(self, check_samples(X, self._view), self._decode_mode())

    def score(self, X, y=None):
        """Phoneme accuracy ``1 - PER``."""
        return self.evaluate(X).acc

    def digest(self):
        check_is_fitted(self, "params_")
        return self.params_.digest()

    def save(self, path):
        check_is_fitted(self, "params_")
        save_model(path, self.config_, self.params_, extra=self._checkpoint_extra())

    def _checkpoint_extra(self):
        return {}


class CTCTeacher(_Recognizer):
    """BiLSTM stack + one FC layer over the teacher view, trained with CTC."""

    _view = "teacher"

    def __init__(self, hidden=32, lstm_layers=2, epochs=20, batch_size=16, lr=1e-3,
                 optimizer="adam", clip_norm=5.0, patience=5, random_state=0,
                 log_every=10, max_log_records=None):
        self.hidden = hidden
        self.lstm_layers = lstm_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.patience = patience
        self.random_state = random_state
        self.log_every = log_every
        self.max_log_records = max_log_records

    def _decode_mode(self):
        return "sequence"

    def fit(self, X, y=None, X_val=None, n_classes=None):
        X = check_samples(X, "teacher")
        if n_classes is None:
            n_classes = int(max(max(s.y) for s in X)) + 1
        self.config_ = TeacherConfig(input_dim=X[0].x_t.shape[1], classes=n_classes,
                                     lstm_layers=self.lstm_layers, hidden=self.hidden)
        return self._fit_loop(X, X_val)

    def _forward(self, params, batch):
        check_feature_dims(batch, "teacher", self.config_.input_dim)
        x, lengths = pad_sequences([s.x_t for s in batch])
        return teacher_forward(params, self.config_, Tensor._wrap(x), lengths), lengths

    def _batch_loss(self, logits, lengths, batch, index):
        totals = [L.ctc_baseline(logits[b, :n], s.y).total
                  for b, (s, n) in enumerate(zip(batch, lengths))]
        ctc = ad.mean(ad.stack(totals))
        return L.LossBreakdown(total=ctc, ctc=ctc)

    @classmethod
    def from_checkpoint(cls, path):
        config, params, extra = load_model(path)
        if not isinstance(config, TeacherConfig):
            raise ConfigError(f"{path} holds a student, not a teacher")
        est = cls(hidden=config.hidden, lstm_layers=config.lstm_layers)
        est.config_ = config
        est.params_ = params
        return est


class StudentRecognizer(_Recognizer):
    """Three-stream BiLSTM student trained with one of the package's strategies.

    Parameters
    ----------
    strategy : str
        ``baseline-CE``, ``baseline-CTC``, ``frame-JLF1``, ``frame-MTL``,
        ``frame-JLF3``, ``seq-KLCTC`` or ``seq-COSCTC``.
    teacher : CTCTeacher, optional
        Fitted teacher; required by every distillation strategy.  Its logits
        are computed once, without a tape, so no gradient can reach it.
    temperature, alpha : float
        Read by ``frame-JLF1``.
    balance_coef : float
        The KL multiplier ``a`` of ``frame-JLF3``.
    sigma_lr : float
        Learning rate of the log-uncertainty scalars under ``frame-MTL``.
    """

    def __init__(self, strategy="baseline-CE", teacher=None, temperature=1.0, alpha=0.5,
                 balance_coef=1.0, hidden=32, lstm_layers=2, fc_hidden=32, epochs=40,
                 batch_size=16, lr=1e-3, optimizer="adam", clip_norm=5.0, patience=5,
                 sigma_lr=1e-2, random_state=0, log_every=1, max_log_records=None):
        self.strategy = strategy
        self.teacher = teacher
        self.temperature = temperature
        self.alpha = alpha
        self.balance_coef = balance_coef
        self.hidden = hidden
        self.lstm_layers = lstm_layers
        self.fc_hidden = fc_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.patience = patience
        self.sigma_lr = sigma_lr
        self.random_state = random_state
        self.log_every = log_every
        self.max_log_records = max_log_records

    def _decode_mode(self):
        return "sequence" if self.strategy in L.SEQUENCE_STRATEGIES else "frame"

    def fit(self, X, y=None, X_val=None, n_classes=None):
        cfg = L.DistillConfig(strategy=self.strategy, temperature=self.temperature,
                              alpha=self.alpha, balance_coef=self.balance_coef)
        X = check_samples(X, "both" if cfg.is_distillation else "student")
        self._teacher_logits = None
        if cfg.is_distillation:
            if self.teacher is None:
                raise ConfigError(f"strategy {self.strategy} needs a fitted teacher")
            check_is_fitted(self.teacher, "params_")
            n_classes = self.teacher.config_.classes
            self._teacher_logits = self.teacher.decision_function(X)
        elif n_classes is None:
            n_classes = int(max(max(s.y) for s in X)) + 1
        self.config_ = StudentConfig(stream_dims=tuple(x.shape[1] for x in X[0].x_s),
                                     classes=n_classes, lstm_layers=self.lstm_layers,
                                     hidden=self.hidden, fc_hidden=self.fc_hidden)
        self._rho = None
        if self.strategy == "frame-MTL":
            self._rho = {"rho1": Tensor(np.zeros(1), requires_grad=True),
                         "rho2": Tensor(np.zeros(1), requires_grad=True)}
            self.sigma_trace_ = []
        try:
            self._fit_loop(X, X_val)
        finally:
            self._teacher_logits = None
        if self._rho is not None:
            self.sigma1_ = float(np.exp(self._rho["rho1"].data[0]))
            self.sigma2_ = float(np.exp(self._rho["rho2"].data[0]))
            self.balance_coef_ = L.balance_coefficient(self.sigma1_, self.sigma2_)
        return self

    def _extra_params(self):
        return self._rho or {}

    def _after_step(self, step):
        if self._rho is None:
            return
        s1, s2 = (float(np.exp(self._rho[k].data[0])) for k in ("rho1", "rho2"))
        self.sigma_trace_.append((s1, s2))
        if min(s1, s2) < SIGMA_FLOOR:
            raise SigmaCollapseError(f"sigma collapsed below {SIGMA_FLOOR} at step {step}: "
                                     f"sigma1={s1:.3g}, sigma2={s2:.3g}")

    def _forward(self, params, batch):
        check_feature_dims(batch, "student", self.config_.stream_dims)
        streams, lengths = [], None
        for k in range(3):
            x, lengths = pad_sequences([s.x_s[k] for s in batch])
            streams.append(Tensor._wrap(x))
        return student_forward(params, self.config_, streams, lengths), lengths

    def _batch_loss(self, logits, lengths, batch, index):
        strategy = self.strategy
        parts = []
        for b, (s, n) in enumerate(zip(batch, lengths)):
            z = logits[b, :n]
            t = None if self._teacher_logits is None else self._teacher_logits[index[b]]
            if strategy == "baseline-CE":
                parts.append(L.ce_baseline(z, s.frame_labels))
            elif strategy == "baseline-CTC":
                parts.append(L.ctc_baseline(z, s.y))
            elif strategy == "frame-JLF1":
                parts.append(L.jlf1(t, z, s.frame_labels, self.temperature, self.alpha))
            elif strategy == "frame-JLF3":
                parts.append(L.jlf3(t, z, s.frame_labels, self.balance_coef))
            elif strategy == "frame-MTL":
                kl, ce = L.frame_terms(t, z, s.frame_labels)
                parts.append(L.LossBreakdown(total=ce, kl=kl, ce=ce))
            elif strategy == "seq-KLCTC":
                parts.append(L.kl_ctc_loss(z, t, s.y))
            elif strategy == "seq-COSCTC":
                parts.append(L.sequence_kd_loss(z, t, s.y))
        out = {}
        for key in ("total", "kl", "ce", "ctc", "cos_term"):
            vals = [getattr(p, key) for p in parts]
            if vals[0] is not None:
                out[key] = ad.mean(ad.stack(vals))
        if strategy == "frame-MTL":
            out["total"] = L.mtl_loss(out["kl"], out["ce"], self._rho["rho1"], self._rho["rho2"])
        return L.LossBreakdown(**out)

    def _checkpoint_extra(self):
        extra = {"strategy": self.strategy, "temperature": self.temperature,
                 "alpha": self.alpha, "balance_coef": self.balance_coef}
        if getattr(self, "sigma1_", None) is not None:
            extra.update(sigma1=self.sigma1_, sigma2=self.sigma2_)
        return extra

    @classmethod
    def from_checkpoint(cls, path):
        config, params, extra = load_model(path)
        if not isinstance(config, StudentConfig):
            raise ConfigError(f"{path} holds a teacher, not a student")
        est = cls(strategy=extra.get("strategy", "baseline-CE"), hidden=config.hidden,
                  lstm_layers=config.lstm_layers, fc_hidden=config.fc_hidden)
        est.config_ = config
        est.params_ = params
        return est
