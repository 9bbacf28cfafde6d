"""Phoneme error rate and frame accuracy."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ctc import collapse, greedy_decode
from .exceptions import ContractError


@dataclass
class EvalReport:
    per: float
    acc: float
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    frame_acc: Optional[float] = None
    n_sentences: int = 0

    def to_text(self):
        """Flat ``key=value`` block, one pair per line."""
        rows = [("per", repr(self.per)), ("acc", repr(self.acc))]
        if self.frame_acc is not None:
            rows.append(("frame_acc", repr(self.frame_acc)))
        rows += [("substitutions", self.substitutions), ("insertions", self.insertions),
                 ("deletions", self.deletions), ("ref_len", self.ref_len),
                 ("n_sentences", self.n_sentences)]
        return "".join(f"{k}={v}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(per=float(kv["per"]), acc=float(kv["acc"]),
                   substitutions=int(kv["substitutions"]), insertions=int(kv["insertions"]),
                   deletions=int(kv["deletions"]), ref_len=int(kv["ref_len"]),
                   frame_acc=float(kv["frame_acc"]) if "frame_acc" in kv else None,
                   n_sentences=int(kv.get("n_sentences", 0)))


def edit_distance(ref, hyp):
    """Levenshtein distance with operation counts.

    Returns ``(distance, substitutions, insertions, deletions)`` read off one
    optimal backtrace; ties prefer the diagonal (match or substitution), then
    deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          D[i - 1, j] + 1,
                          D[i, j - 1] + 1)
    S = I = Dl = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            Dl += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return int(D[n, m]), S, I, Dl


def corpus_report(refs, hyps, frame_correct=None, frame_total=None):
    """Corpus PER = total edit operations / total reference length; Acc = 1 - PER."""
    if len(refs) == 0:
        raise ContractError("cannot score an empty corpus")
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    S = I = D = N = 0
    for r, h in zip(refs, hyps):
        _, s, i, d = edit_distance(r, h)
        S, I, D, N = S + s, I + i, D + d, N + len(r)
    if N == 0:
        raise ContractError("reference corpus has zero length")
    per = (S + I + D) / N
    frame_acc = None if frame_total is None else frame_correct / frame_total
    return EvalReport(per=per, acc=1.0 - per, substitutions=S, insertions=I, deletions=D,
                      ref_len=N, frame_acc=frame_acc, n_sentences=len(refs))


def frame_mode_hypothesis(logits):
    """Sequence read from frame-level predictions: argmax, merge repeats, drop blanks."""
    return list(collapse(np.argmax(np.asarray(logits), axis=-1)))


def evaluate(model, dataset, decode_mode="frame"):
    """Score ``model`` on ``dataset``.

    ``model`` is anything with ``decision_function(samples) -> list of
    (frames, classes) arrays``.  Frame mode also reports frame accuracy.
    """
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    if decode_mode not in ("frame", "sequence"):
        raise ContractError(f"decode_mode must be 'frame' or 'sequence', got {decode_mode!r}")
    logits = model.decision_function(dataset)
    refs, hyps = [], []
    correct = total = 0
    for sample, z in zip(dataset, logits):
        refs.append(list(sample.y))
        if decode_mode == "frame":
            hyps.append(frame_mode_hypothesis(z))
            correct += int((np.argmax(z, axis=-1) == sample.frame_labels).sum())
            total += sample.n_frames
        else:
            hyps.append(greedy_decode(z))
    if decode_mode == "frame":
        return corpus_report(refs, hyps, correct, total)
    return corpus_report(refs, hyps)
