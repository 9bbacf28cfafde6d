"""Distillation objectives over frame-aligned ``(frames, classes)`` logits.

Teacher inputs are always detached: no loss here lets gradient reach the
teacher.  Frame-level terms are averaged over frames so that the mixing
weights do not depend on utterance length.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, detach
from .ctc import ctc_loss
from .exceptions import AlignmentError, ConfigError, ContractError, DomainError, ShapeError

PROB_FLOOR = 1e-12

STRATEGIES = (
    "baseline-CE",
    "baseline-CTC",
    "frame-JLF1",
    "frame-MTL",
    "frame-JLF3",
    "seq-KLCTC",
    "seq-COSCTC",
)
FRAME_STRATEGIES = ("baseline-CE", "frame-JLF1", "frame-MTL", "frame-JLF3")
SEQUENCE_STRATEGIES = ("baseline-CTC", "seq-KLCTC", "seq-COSCTC")
KD_STRATEGIES = ("frame-JLF1", "frame-MTL", "frame-JLF3", "seq-KLCTC", "seq-COSCTC")


@dataclass
class DistillConfig:
    """Loss hyperparameters; ``strategy`` decides which ones are read."""

    strategy: str = "frame-JLF3"
    temperature: float = 1.0
    alpha: float = 0.5
    balance_coef: float = 1.0
    sigma1: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for key in ("balance_coef", "sigma1", "sigma2"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0, got {getattr(self, key)}")

    @property
    def is_distillation(self):
        return self.strategy in KD_STRATEGIES

    @property
    def is_sequence_level(self):
        return self.strategy in SEQUENCE_STRATEGIES


@dataclass
class LossBreakdown:
    """A total objective together with the terms it was assembled from.

    Terms are kept as tensors so that per-term gradients can be taken from the
    same graph; ``grad_norm_*`` are filled in by the trainer when requested.
    """

    total: Tensor
    kl: Optional[Tensor] = None
    ce: Optional[Tensor] = None
    ctc: Optional[Tensor] = None
    cos_term: Optional[Tensor] = None
    grad_norm_kl: Optional[float] = None
    grad_norm_ce: Optional[float] = None
    grad_norm_ctc: Optional[float] = None
    grad_norm_cos: Optional[float] = None

    def terms(self):
        return {k: getattr(self, k) for k in ("kl", "ce", "ctc", "cos_term")
                if getattr(self, k) is not None}

    def values(self):
        out = {"total": self.total.item()}
        out.update({k: v.item() for k, v in self.terms().items()})
        return out


# ------------------------------------------------------------ distributions


def log_softmax(logits, temperature=1.0):
    """Row-wise log of the tempered softmax, stabilised by max subtraction."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = as_tensor(logits)
    if temperature != 1.0:
        z = ad.scale(z, 1.0 / temperature)
    shift = np.max(z.data, axis=-1, keepdims=True)
    shifted = ad.sub(z, Tensor._wrap(shift))
    lse = ad.log(ad.sum(ad.exp(shifted), axis=-1, keepdims=True))
    return ad.sub(shifted, lse)


def tempered_softmax(logits, temperature=1.0):
    """``q_i = exp(z_i / T) / sum_j exp(z_j / T)`` over the last axis."""
    return ad.exp(log_softmax(logits, temperature))


def softmax_np(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_distribution(p, atol=1e-9):
    p = np.asarray(p)
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise DomainError("distribution entries must lie in [0, 1]")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise DomainError("distribution rows must sum to 1")


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _as_targets(Y, n_classes):
    Y = np.asarray(Y)
    if Y.ndim == 1 and np.issubdtype(Y.dtype, np.integer):
        return one_hot(Y, n_classes)
    Y = Y.astype(np.float64)
    if Y.ndim != 2 or Y.shape[1] != n_classes:
        raise ShapeError(f"targets of shape {Y.shape} do not match {n_classes} classes")
    if not (np.all((Y == 0) | (Y == 1)) and np.all(Y.sum(axis=1) == 1)):
        raise ContractError("targets must be one-hot rows")
    return Y


# ------------------------------------------------------------ basic terms


def cross_entropy(target, dist):
    """Mean over frames of ``-log q[target]`` with ``q`` floored at 1e-12.

    ``target`` holds one-hot rows (or integer class ids); ``dist`` holds the
    predicted probabilities.
    """
    dist = as_tensor(dist)
    Y = _as_targets(target, dist.shape[-1])
    if Y.shape != dist.shape:
        raise ShapeError(f"cross_entropy: target {Y.shape} vs distribution {dist.shape}")
    logq = ad.log(ad.clamp_min(dist, PROB_FLOOR))
    picked = ad.sum(ad.mul(logq, Tensor._wrap(Y)), axis=-1)
    return ad.neg(ad.mean(picked))


def kl_divergence(P, Q):
    """Mean over frames of ``sum_i p_i log(p_i / q_i)``; ``P`` is a constant reference.

    ``0 log 0`` is taken as 0 and ``Q`` is floored at 1e-12.
    """
    P = detach(P).data
    Q = as_tensor(Q)
    if P.shape != Q.shape:
        raise ShapeError(f"kl_divergence: shapes differ, {P.shape} vs {Q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0).sum(axis=-1)
    logq = ad.log(ad.clamp_min(Q, PROB_FLOOR))
    cross = ad.sum(ad.mul(logq, Tensor._wrap(P)), axis=-1)
    per_frame = ad.sub(Tensor._wrap(neg_entropy), cross)
    return ad.mean(per_frame)


def _aligned(teacher_logits, student_logits):
    t = detach(teacher_logits)
    s = as_tensor(student_logits)
    if t.shape != s.shape:
        raise AlignmentError(
            f"teacher logits {t.shape} and student logits {s.shape} are not frame-aligned")
    return t, s


# ------------------------------------------------------------ frame level


def jlf1(teacher_logits, student_logits, Y, temperature=1.0, alpha=0.5):
    """``alpha * KL(P_T, Q_T) * T^2 + (1 - alpha) * CE(Y, Q_1)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    t, s = _aligned(teacher_logits, student_logits)
    P_T = softmax_np(t.data, temperature)
    kl = kl_divergence(P_T, tempered_softmax(s, temperature))
    ce = cross_entropy(Y, tempered_softmax(s, 1.0))
    total = ad.add(ad.scale(kl, alpha * temperature ** 2), ad.scale(ce, 1.0 - alpha))
    return LossBreakdown(total=total, kl=kl, ce=ce)


def mtl_loss(kl, ce, rho1, rho2):
    """Uncertainty-weighted sum with ``sigma_j = exp(rho_j)``.

    ``kl / sigma1^2 + ce / sigma2^2 + log sigma1 + log sigma2``
    """
    kl, ce, rho1, rho2 = (as_tensor(v) for v in (kl, ce, rho1, rho2))
    w1 = ad.exp(ad.scale(rho1, -2.0))
    w2 = ad.exp(ad.scale(rho2, -2.0))
    weighted = ad.add(ad.mul(w1, kl), ad.mul(w2, ce))
    return ad.add(weighted, ad.add(rho1, rho2)).reshape(())


def balance_coefficient(sigma1, sigma2):
    """``a = sigma2^2 / sigma1^2``."""
    if sigma1 == 0:
        raise DomainError("balance_coefficient: sigma1 must be nonzero")
    return (sigma2 * sigma2) / (sigma1 * sigma1)


def jlf3(teacher_logits, student_logits, Y, balance_coef=1.0):
    """``0.5 * (a * KL(P_1, Q_1) + CE(Y, Q_1))``."""
    if balance_coef <= 0:
        raise ConfigError(f"balance coefficient must be > 0, got {balance_coef}")
    t, s = _aligned(teacher_logits, student_logits)
    Q = tempered_softmax(s, 1.0)
    kl = kl_divergence(softmax_np(t.data), Q)
    ce = cross_entropy(Y, Q)
    total = ad.scale(ad.add(ad.scale(kl, balance_coef), ce), 0.5)
    return LossBreakdown(total=total, kl=kl, ce=ce)


def frame_terms(teacher_logits, student_logits, Y):
    """KL and CE at temperature 1, the inputs of :func:`mtl_loss`."""
    t, s = _aligned(teacher_logits, student_logits)
    Q = tempered_softmax(s, 1.0)
    return kl_divergence(softmax_np(t.data), Q), cross_entropy(Y, Q)


# ------------------------------------------------------------ sequence level


def frame_cosine(S_s, S_t):
    """Mean over frames of the cosine between student and teacher logit rows.

    A row with zero norm on either side contributes 0 and triggers a warning.
    """
    t, s = _aligned(S_t, S_s)
    nt = np.linalg.norm(t.data, axis=-1)
    ns = np.linalg.norm(s.data, axis=-1)
    ok = (nt > 0) & (ns > 0)
    if not np.all(ok):
        warnings.warn(f"{int((~ok).sum())} zero-norm logit row(s); cosine set to 0",
                      RuntimeWarning, stacklevel=2)
    dots = ad.sum(ad.mul(s, t), axis=-1)
    sq = ad.add(ad.sum(ad.mul(s, s), axis=-1), Tensor._wrap((~ok).astype(np.float64)))
    inv_t = np.where(ok, 1.0 / np.where(nt > 0, nt, 1.0), 0.0)
    cos = ad.mul(ad.div(dots, ad.sqrt(sq)), Tensor._wrap(inv_t))
    return ad.mean(cos)


def sequence_kd_loss(S_s, S_t, Y, ctc_fn: Callable = ctc_loss):
    """``0.5 * (1 - cos(S_s, S_t) + CTC(Y, log Q))`` with ``Q = softmax(S_s)``."""
    _aligned(S_t, S_s)
    if len(Y) == 0:
        raise ContractError("sequence_kd_loss: transcript must be nonempty")
    cos = frame_cosine(S_s, S_t)
    ctc = ctc_fn(log_softmax(S_s), Y)
    total = ad.scale(ad.add(ad.sub(1.0, cos), ctc), 0.5)
    return LossBreakdown(total=total, ctc=ctc, cos_term=cos)


def kl_ctc_loss(S_s, S_t, Y, ctc_fn: Callable = ctc_loss):
    """``0.5 * (KL(P_1, Q_1) + CTC(Y, log Q))``."""
    t, s = _aligned(S_t, S_s)
    if len(Y) == 0:
        raise ContractError("kl_ctc_loss: transcript must be nonempty")
    logq = log_softmax(s)
    kl = kl_divergence(softmax_np(t.data), ad.exp(logq))
    ctc = ctc_fn(logq, Y)
    total = ad.scale(ad.add(kl, ctc), 0.5)
    return LossBreakdown(total=total, kl=kl, ctc=ctc)


def ctc_baseline(S_s, Y, ctc_fn: Callable = ctc_loss):
    ctc = ctc_fn(log_softmax(S_s), Y)
    return LossBreakdown(total=ctc, ctc=ctc)


def ce_baseline(S_s, Y):
    ce = cross_entropy(Y, tempered_softmax(S_s, 1.0))
    return LossBreakdown(total=ce, ce=ce)
