"""First-order optimisers operating in place on a :class:`ParameterSet`."""

import numpy as np

from .exceptions import ConfigError


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class SGD:
    def __init__(self, params, lr=1e-2, clip_norm=None):
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self, grads):
        scale = _clip_scale(grads, self.clip_norm)
        for name in self.params:
            self.params[name].data -= self.lr * scale * grads[name]


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros(params[n].shape) for n in params}
        self.v = {n: np.zeros(params[n].shape) for n in params}

    def step(self, grads):
        self.t += 1
        scale = _clip_scale(grads, self.clip_norm)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in self.params:
            g = grads[name] * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[name].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_scale(grads, clip_norm):
    if clip_norm is None:
        return 1.0
    norm = global_norm(grads)
    return 1.0 if norm <= clip_norm else clip_norm / norm


def make_optimizer(name, params, lr, clip_norm=None):
    if name == "adam":
        return Adam(params, lr=lr, clip_norm=clip_norm)
    if name == "sgd":
        return SGD(params, lr=lr, clip_norm=clip_norm)
    raise ConfigError(f"unknown optimizer '{name}', expected 'adam' or 'sgd'")
