"""Input checks shared by the estimators."""

import numpy as np

from .exceptions import AlignmentError, ContractError
from .data import Sample


def check_samples(X, view="student", require_labels=True):
    """Validate a list of :class:`Sample` for the given view and return it as a list."""
    if isinstance(X, Sample):
        X = [X]
    X = list(X)
    if not X:
        raise ContractError("expected at least one sample")
    for s in X:
        if not isinstance(s, Sample):
            raise ContractError(f"expected Sample objects, got {type(s).__name__}")
        F = s.n_frames
        if view in ("teacher", "both") and s.x_t.shape[0] != F:
            raise AlignmentError(f"sample {s.id}: teacher view has {s.x_t.shape[0]} frames, "
                                 f"labels have {F}")
        if view in ("student", "both"):
            if len(s.x_s) != 3:
                raise ContractError(f"sample {s.id}: expected three student streams")
            if any(x.shape[0] != F for x in s.x_s):
                raise AlignmentError(f"sample {s.id}: student streams disagree on frame count")
        if require_labels and len(s.y) == 0:
            raise ContractError(f"sample {s.id}: empty transcript")
    return X


def check_feature_dims(X, view, dims):
    got = X[0].x_t.shape[1] if view == "teacher" else tuple(x.shape[1] for x in X[0].x_s)
    if got != dims:
        raise ContractError(f"{view} features have dims {got}, model expects {dims}")


def pad_sequences(arrays):
    """Right-pad ``(frames, dim)`` arrays to ``(batch, max_frames, dim)``; returns lengths too."""
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    out = np.zeros((len(arrays), int(lengths.max()), arrays[0].shape[1]))
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths
