"""Connectionist temporal classification: loss, exhaustive oracle, greedy decoding.

Class 0 is the blank everywhere in this package.  Log-space recursions use
``NEG_INF`` (a large finite negative number) instead of ``-inf`` so that the
arithmetic stays NaN-free; it never enters a differentiated tensor.
"""

import itertools

import numpy as np

from .autodiff import Tensor, _result, as_tensor
from .exceptions import ContractError, InfeasibleAlignmentError, SizeGuardError

BLANK = 0
NEG_INF = -1e30

BRUTEFORCE_MAX_FRAMES = 8
BRUTEFORCE_MAX_CLASSES = 5


def extend_labels(y):
    """Interleave blanks: ``[a, b]`` -> ``[blank, a, blank, b, blank]``."""
    ext = np.full(2 * len(y) + 1, BLANK, dtype=np.int64)
    ext[1::2] = y
    return ext


def min_frames(y):
    """Shortest frame count that admits an alignment of ``y``."""
    y = list(y)
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + repeats


def _check_labels(y, n_classes):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise ContractError("ctc: label sequence must be nonempty")
    if np.any(y <= BLANK) or np.any(y >= n_classes):
        raise ContractError(f"ctc: label ids must lie in [1, {n_classes - 1}], got {y.tolist()}")
    return y


def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(m <= NEG_INF, 0.0, m)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    out = np.maximum(out, NEG_INF)
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _skip_mask(ext):
    # s -> s+2 transitions: only onto a label that differs from the label two back
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def _forward_backward(logp, y):
    """Return ``(log_alpha, log_beta, log_likelihood)``.

    ``log_alpha[t, s]`` includes the emission at ``t``; ``log_beta[t, s]``
    covers frames after ``t`` only, so ``alpha * beta`` summed over ``s`` is
    the total path probability at every ``t``.
    """
    n_frames = logp.shape[0]
    ext = extend_labels(y)
    S = len(ext)
    skip = _skip_mask(ext)
    emit = logp[:, ext]

    la = np.full((n_frames, S), NEG_INF)
    la[0, 0] = emit[0, 0]
    if S > 1:
        la[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = la[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
        la[t] = np.maximum(np.logaddexp(np.logaddexp(stay, step), jump) + emit[t], NEG_INF)

    lb = np.full((n_frames, S), NEG_INF)
    lb[-1, -1] = 0.0
    if S > 1:
        lb[-1, -2] = 0.0
    skip_next = np.concatenate((skip[2:], [False, False]))
    for t in range(n_frames - 2, -1, -1):
        nxt = lb[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.where(skip_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), NEG_INF)
        lb[t] = np.maximum(np.logaddexp(np.logaddexp(stay, step), jump), NEG_INF)

    tail = la[-1, -1] if S == 1 else np.logaddexp(la[-1, -1], la[-1, -2])
    return la, lb, float(tail), ext


def ctc_loss(logp, y, infeasible="raise"):
    """Negative log-likelihood of ``y`` under per-frame log-probabilities ``logp``.

    ``logp`` has shape ``(frames, classes)``; rows are normally log-softmax
    outputs but the recursion does not require normalisation.  The result is
    a differentiable scalar whose gradient is the negated state-occupancy
    posterior.  When ``y`` cannot be aligned in the available frames, raise
    :class:`InfeasibleAlignmentError` (``infeasible="raise"``) or return a
    constant ``+inf`` (``infeasible="inf"``).
    """
    logp = as_tensor(logp)
    if logp.ndim != 2:
        raise ContractError(f"ctc_loss: expected (frames, classes), got {logp.shape}")
    n_frames, n_classes = logp.shape
    y = _check_labels(y, n_classes)
    if n_frames < min_frames(y):
        if infeasible == "inf":
            return Tensor(np.inf)
        raise InfeasibleAlignmentError(
            f"ctc_loss: {len(y)} labels need at least {min_frames(y)} frames, got {n_frames}")

    la, lb, ll, ext = _forward_backward(logp.data, y)

    def back(g):
        occ = np.exp(la + lb - ll)
        grad = np.zeros((n_frames, n_classes))
        for k in np.unique(ext):
            grad[:, k] = occ[:, ext == k].sum(axis=1)
        return (-float(g) * grad,)

    return _result(np.asarray(-ll), "ctc", (logp,), back)


def ctc_loss_bruteforce(logp, y, infeasible="raise"):
    """Exhaustive CTC likelihood: sum every path that collapses onto ``y``."""
    logp = np.asarray(as_tensor(logp).data)
    n_frames, n_classes = logp.shape
    if n_frames > BRUTEFORCE_MAX_FRAMES or n_classes > BRUTEFORCE_MAX_CLASSES:
        raise SizeGuardError(
            f"ctc_loss_bruteforce: limited to {BRUTEFORCE_MAX_FRAMES} frames and "
            f"{BRUTEFORCE_MAX_CLASSES} classes, got {logp.shape}")
    y = _check_labels(y, n_classes)
    target = tuple(int(v) for v in y)
    total = 0.0
    hit = False
    for path in itertools.product(range(n_classes), repeat=n_frames):
        if collapse(path) == target:
            hit = True
            total += np.exp(np.sum(logp[np.arange(n_frames), path]))
    if not hit:
        if infeasible == "inf":
            return float("inf")
        raise InfeasibleAlignmentError(
            f"ctc_loss_bruteforce: no path of {n_frames} frames collapses to {list(target)}")
    return float(-np.log(total))


def collapse(ids):
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for k in ids:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def greedy_decode(logp):
    """Best-path decoding: per-frame argmax, collapse repeats, remove blanks."""
    scores = logp.data if isinstance(logp, Tensor) else np.asarray(logp)
    return list(collapse(np.argmax(scores, axis=-1)))
