import numpy as np
import pytest

from crossdistill.autodiff import ParameterSet, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_params(**arrays):
    return ParameterSet({k: Tensor(v) for k, v in arrays.items()})


def log_softmax_np(z):
    z = np.asarray(z, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


TINY_GEN = dict(n_teacher=40, n_train=12, n_val=4, n_test=4)
TINY_MODEL = dict(epochs=2, teacher_epochs=2, batch_size=4, teacher_batch_size=8, hidden=4,
                  fc_hidden=4, lstm_layers=1, teacher_hidden=6, teacher_lstm_layers=1)


def tiny_config(**kw):
    """A config that trains in a second or two."""
    from crossdistill.data import GenConfig
    from crossdistill.trainer import ExperimentConfig

    gen = GenConfig(**{**TINY_GEN, **kw.pop("gen", {})})
    return ExperimentConfig(**{**TINY_MODEL, **kw}, gen=gen)


@pytest.fixture(scope="session")
def tiny_teacher(tmp_path_factory):
    """A briefly trained teacher checkpoint plus the config and splits it came from."""
    from crossdistill.trainer import load_splits, pretrain_teacher

    cfg = tiny_config()
    splits = load_splits(cfg)
    res = pretrain_teacher(cfg, splits)
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    res.model.save(path)
    return cfg, splits, res, path
