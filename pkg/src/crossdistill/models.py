"""Teacher and student recognisers built from autodiff kernels.

Both models map frame sequences to ``(frames, classes)`` logits over
``{blank} + phonemes``.  Batches are right-padded to a common length; the
backward LSTM direction reverses each sequence inside its own valid length,
so padded frames never influence valid outputs and no masking is needed.
"""

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor, as_tensor, load_parameters, save_parameters
from .exceptions import AlignmentError, ConfigError, ContractError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class TeacherConfig:
    input_dim: int = 16
    classes: int = 11
    lstm_layers: int = 2
    hidden: int = 32

    def __post_init__(self):
        _check_dims(self, ("input_dim", "classes", "lstm_layers", "hidden"))


@dataclass
class StudentConfig:
    stream_dims: tuple = (8, 8, 4)
    classes: int = 11
    lstm_layers: int = 2
    hidden: int = 32
    fc_hidden: int = 32

    def __post_init__(self):
        self.stream_dims = tuple(int(d) for d in self.stream_dims)
        if len(self.stream_dims) != 3 or min(self.stream_dims) < 1:
            raise ConfigError(f"stream_dims must be three positive ints, got {self.stream_dims}")
        _check_dims(self, ("classes", "lstm_layers", "hidden", "fc_hidden"))

    @property
    def input_dim(self):
        return sum(self.stream_dims)


def _check_dims(cfg, keys):
    for k in keys:
        if int(getattr(cfg, k)) < 1:
            raise ConfigError(f"{type(cfg).__name__}.{k} must be >= 1, got {getattr(cfg, k)}")


# ------------------------------------------------------------ parameters


def _lstm_shapes(prefix, in_dim, hidden):
    shapes = {}
    for d in ("fwd", "bwd"):
        # fan-in of every LSTM tensor is the hidden size, biases included
        shapes[f"{prefix}.{d}.W"] = ((in_dim, 4 * hidden), hidden)
        shapes[f"{prefix}.{d}.U"] = ((hidden, 4 * hidden), hidden)
        shapes[f"{prefix}.{d}.b"] = ((4 * hidden,), hidden)
    return shapes


def param_shapes(config):
    """``name -> (shape, fan_in)`` for every tensor of ``config``'s model."""
    shapes = {}
    in_dim = config.input_dim
    for layer in range(config.lstm_layers):
        shapes.update(_lstm_shapes(f"lstm{layer}", in_dim, config.hidden))
        in_dim = 2 * config.hidden
    if isinstance(config, TeacherConfig):
        shapes["fc.W"] = ((in_dim, config.classes), in_dim)
        shapes["fc.b"] = ((config.classes,), in_dim)
    else:
        shapes["fc1.W"] = ((in_dim, config.fc_hidden), in_dim)
        shapes["fc1.b"] = ((config.fc_hidden,), in_dim)
        shapes["fc2.W"] = ((config.fc_hidden, config.classes), config.fc_hidden)
        shapes["fc2.b"] = ((config.classes,), config.fc_hidden)
    return shapes


def init_params(config, seed):
    """Uniform ``[-s, s]`` initialisation with ``s = 1/sqrt(fan_in)``, drawn in name order."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, (shape, fan_in) in sorted(param_shapes(config).items()):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(name, Tensor(rng.uniform(-bound, bound, size=shape)))
    return params


def zero_params(config):
    return ParameterSet({name: Tensor(np.zeros(shape))
                         for name, (shape, _) in param_shapes(config).items()})


# ------------------------------------------------------------ recurrent core


def lstm_direction(x_proj, U, hidden):
    """Run one LSTM direction over pre-projected inputs.

    ``x_proj`` is ``x @ W + b`` with shape ``(batch, frames, 4 * hidden)``;
    gates are laid out as ``[input, forget, output, candidate]``.
    Returns hidden states ``(batch, frames, hidden)``.
    """
    H = hidden
    n_frames = x_proj.shape[1]
    h = c = None
    outs = []
    for t in range(n_frames):
        gates = x_proj[:, t]
        if h is not None:
            gates = ad.add(gates, ad.matmul(h, U))
        sig = ad.sigmoid(gates[:, : 3 * H])
        i_g, f_g, o_g = sig[:, :H], sig[:, H: 2 * H], sig[:, 2 * H:]
        cand = ad.tanh(gates[:, 3 * H:])
        c = ad.mul(i_g, cand) if c is None else ad.add(ad.mul(f_g, c), ad.mul(i_g, cand))
        h = ad.mul(o_g, ad.tanh(c))
        outs.append(h)
    return ad.stack(outs, axis=1)


def reversal_index(lengths, n_frames):
    """Gather index that reverses each row within its own length; an involution."""
    lengths = np.asarray(lengths)
    t = np.arange(n_frames)[None, :]
    rev = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.broadcast_to(np.arange(len(lengths))[:, None], rev.shape)
    return rows, rev


def bilstm_layer(params, prefix, x, lengths, hidden):
    """Bidirectional layer; output is ``concat(forward, backward)`` of width ``2 * hidden``."""
    fwd = lstm_direction(
        ad.add(ad.matmul(x, params[f"{prefix}.fwd.W"]), params[f"{prefix}.fwd.b"]),
        params[f"{prefix}.fwd.U"], hidden)
    key = reversal_index(lengths, x.shape[1])
    x_rev = x[key]
    bwd_rev = lstm_direction(
        ad.add(ad.matmul(x_rev, params[f"{prefix}.bwd.W"]), params[f"{prefix}.bwd.b"]),
        params[f"{prefix}.bwd.U"], hidden)
    return ad.concat([fwd, bwd_rev[key]])


def _encode(params, config, x, lengths):
    h = x
    for layer in range(config.lstm_layers):
        h = bilstm_layer(params, f"lstm{layer}", h, lengths, config.hidden)
    return h


def _batchify(x):
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (frames, dim) or (batch, frames, dim), got {x.shape}")
    return x, False


def _lengths(lengths, x):
    if lengths is None:
        return np.full(x.shape[0], x.shape[1])
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (x.shape[0],) or np.any(lengths < 1) or np.any(lengths > x.shape[1]):
        raise ContractError(f"lengths {lengths.tolist()} inconsistent with batch shape {x.shape}")
    return lengths


def teacher_forward(params, config: TeacherConfig, x_t, lengths=None):
    """Logits ``(frames, classes)``, or ``(batch, frames, classes)`` for padded batches."""
    x, single = _batchify(x_t)
    if x.shape[-1] != config.input_dim:
        raise ShapeError(f"teacher expects input dim {config.input_dim}, got {x.shape[-1]}")
    lengths = _lengths(lengths, x)
    h = _encode(params, config, x, lengths)
    logits = ad.add(ad.matmul(h, params["fc.W"]), params["fc.b"])
    return logits[0] if single else logits


def student_forward(params, config: StudentConfig, streams: Sequence, lengths=None):
    """Concatenate the three streams, encode with the BiLSTM stack, apply two FC layers."""
    if len(streams) != 3:
        raise ContractError(f"student expects three streams, got {len(streams)}")
    parts = [_batchify(s) for s in streams]
    xs = [p[0] for p in parts]
    frames = {x.shape[:2] for x in xs}
    if len(frames) != 1:
        raise AlignmentError(f"student streams disagree on (batch, frames): {sorted(frames)}")
    for x, d in zip(xs, config.stream_dims):
        if x.shape[-1] != d:
            raise ShapeError(f"stream dims {[x.shape[-1] for x in xs]} != {config.stream_dims}")
    x = ad.concat(xs)
    lengths = _lengths(lengths, x)
    h = _encode(params, config, x, lengths)
    h = ad.tanh(ad.add(ad.matmul(h, params["fc1.W"]), params["fc1.b"]))
    logits = ad.add(ad.matmul(h, params["fc2.W"]), params["fc2.b"])
    return logits[0] if parts[0][1] else logits


# ------------------------------------------------------------ checkpoints


def save_model(path, config, params, extra=None):
    kind = "teacher" if isinstance(config, TeacherConfig) else "student"
    header = {
        "format": "crossdistill-model",
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
        "extra": extra or {},
    }
    save_parameters(path, params, header)


def load_model(path):
    """Return ``(config, params, extra)`` from a model checkpoint."""
    params, header = load_parameters(path)
    if header.get("format") != "crossdistill-model":
        raise ContractError(f"{path}: not a model checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cls = TeacherConfig if header["kind"] == "teacher" else StudentConfig
    config = cls(**header["config"])
    expected = param_shapes(config)
    if sorted(expected) != list(params):
        raise ContractError(f"{path}: parameter names do not match the stored config")
    return config, params, header.get("extra", {})
