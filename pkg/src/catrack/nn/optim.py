"""SGD with momentum, weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NumericError


@dataclass
class SgdConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    grad_clip: float = 10.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def sgd_step(params, grads, velocities, cfg: SgdConfig, lrs=None):
    """In-place update of ``params`` (arrays) and ``velocities``.

    Gradients are first rescaled so their joint L2 norm is at most
    ``cfg.grad_clip``; then ``v = m*v - lr*(g + wd*p)`` and ``p += v``.
    ``lrs`` optionally overrides the learning rate per parameter.
    Returns the pre-clip gradient norm.
    """
    if len(params) != len(grads) or len(params) != len(velocities):
        raise ValueError("sgd_step: need one gradient and velocity per parameter")
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("sgd_step: non-finite gradient")
    norm = global_norm(grads)
    scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
    if lrs is None:
        lrs = [cfg.lr] * len(params)
    for p, g, v, lr in zip(params, grads, velocities, lrs):
        step = g * scale if scale != 1.0 else g
        if cfg.weight_decay:
            step = step + cfg.weight_decay * p
        v *= cfg.momentum
        v -= lr * step
        p += v
    return norm


class SGD:
    """Optimizer over named parameter groups, each with its own learning rate.

    >>> opt = SGD([(fc_params, 0.0005), (branch_params, 0.001)], cfg)
    """

    def __init__(self, groups, cfg: SgdConfig):
        self.cfg = cfg
        self.params = []
        self.lrs = []
        for tensors, lr in groups:
            for t in tensors:
                self.params.append(t)
                self.lrs.append(lr)
        self.velocity = [np.zeros_like(t.data) for t in self.params]

    def zero_grad(self):
        for t in self.params:
            t.grad = None

    def step(self):
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.params]
        return sgd_step([t.data for t in self.params], grads, self.velocity, self.cfg, self.lrs)
