"""Update rules (Adam, SGD with momentum), global-norm clipping, and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidArgumentError, TrainingError


def _unwrap(params):
    return {name: p if isinstance(p, np.ndarray) else p.data for name, p in params.items()}


def _check_finite(name, g):
    if not np.isfinite(g).all():
        raise TrainingError(f"non-finite gradient in parameter {name!r}", param_name=name)


def _check_shapes(params, grads):
    for name, p in params.items():
        if name not in grads:
            raise InvalidArgumentError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise InvalidArgumentError(
                f"gradient shape {grads[name].shape} != parameter shape {p.shape} for {name!r}"
            )


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """Bias-corrected Adam with decoupled weight decay, applied in place.

    ``params`` maps names to arrays (or :class:`Parameter`-like objects with a
    ``data`` attribute); arrays are updated in place.  All gradients are checked
    for finiteness before any parameter moves, so a failing step leaves the model
    untouched.
    """
    if lr <= 0:
        raise InvalidArgumentError(f"lr must be positive, got {lr}")
    arrays = _unwrap(params)
    _check_shapes(arrays, grads)
    for name in arrays:
        _check_finite(name, grads[name])
    t = state.t + 1
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, p in arrays.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p
        p -= update.astype(p.dtype, copy=False)
    state.t = t
    return state


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


def sgd_momentum_step(params: dict, grads: dict, state: SGDState, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> SGDState:
    """``v <- mu*v + g; p <- p - lr*v`` (plus optional decoupled decay), in place."""
    if lr <= 0:
        raise InvalidArgumentError(f"lr must be positive, got {lr}")
    arrays = _unwrap(params)
    _check_shapes(arrays, grads)
    for name in arrays:
        _check_finite(name, grads[name])
    for name, p in arrays.items():
        g = grads[name]
        if name not in state.velocity:
            state.velocity[name] = np.zeros_like(p)
        vel = state.velocity[name]
        vel *= momentum
        vel += g
        update = lr * vel
        if weight_decay:
            update = update + lr * weight_decay * p
        p -= update.astype(p.dtype, copy=False)
    return state


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: dict, max_norm: float):
    """Scale every gradient in place so the joint L2 norm is at most ``max_norm``.

    Returns ``(grads, scale)``; ``scale`` is 1.0 when no clipping happened.
    """
    if max_norm <= 0:
        raise InvalidArgumentError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    scale = 1.0
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return grads, scale


@dataclass(frozen=True)
class Schedule:
    """``kind`` is ``"constant"`` or ``"step"`` (``base * factor**(epoch // every)``)."""

    base_lr: float
    kind: str = "constant"
    factor: float = 1.0
    every: int = 1

    def __post_init__(self):
        if not (isinstance(self.base_lr, (int, float)) and self.base_lr > 0):
            raise ConfigError(f"base learning rate must be positive, got {self.base_lr!r}")
        if self.kind not in ("constant", "step"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step":
            if not (0 < self.factor):
                raise ConfigError("step decay factor must be positive")
            if not isinstance(self.every, int) or self.every < 1:
                raise ConfigError("step decay 'every' must be a positive integer")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if schedule.kind == "constant":
        return schedule.base_lr
    return schedule.base_lr * schedule.factor ** (epoch // schedule.every)


class Optimizer:
    """Binds an update rule and its state to a model's parameters."""

    def __init__(self, algorithm: str = "adam", weight_decay: float = 0.0, momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if algorithm not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {algorithm!r}")
        self.algorithm = algorithm
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState() if algorithm == "adam" else SGDState()

    def step(self, params: dict, grads: dict, lr: float) -> None:
        if self.algorithm == "adam":
            adam_step(params, grads, self.state, lr, self.betas[0], self.betas[1], self.eps,
                      self.weight_decay)
        else:
            sgd_momentum_step(params, grads, self.state, lr, self.momentum, self.weight_decay)

    def hyper(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "betas": list(self.betas),
            "eps": self.eps,
            "step": self.state.t if self.algorithm == "adam" else 0,
        }

    def state_arrays(self) -> dict:
        if self.algorithm == "adam":
            out = {f"optim.m.{k}": v for k, v in self.state.m.items()}
            out.update({f"optim.v.{k}": v for k, v in self.state.v.items()})
            return out
        return {f"optim.velocity.{k}": v for k, v in self.state.velocity.items()}

    @classmethod
    def restore(cls, hyper: dict, arrays: dict) -> "Optimizer":
        opt = cls(hyper["algorithm"], hyper["weight_decay"], hyper["momentum"],
                  tuple(hyper["betas"]), hyper["eps"])
        if opt.algorithm == "adam":
            opt.state.t = int(hyper["step"])
            for key, arr in arrays.items():
                if key.startswith("optim.m."):
                    opt.state.m[key[len("optim.m."):]] = arr
                elif key.startswith("optim.v."):
                    opt.state.v[key[len("optim.v."):]] = arr
        else:
            for key, arr in arrays.items():
                if key.startswith("optim.velocity."):
                    opt.state.velocity[key[len("optim.velocity."):]] = arr
        return opt
