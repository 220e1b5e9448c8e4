"""SGD with momentum, Adam, step-decay schedules and the tuned presets.

Both optimizers optionally rescale the gradient so its global L2 norm (over
all tensors) is at most ``clip_norm`` before the update.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np


def _check_common(config):
    if config.batch_size < 1 or config.drop_period_epochs < 1 or config.epochs < 0:
        raise ValueError("batch_size and drop_period_epochs must be >= 1, epochs >= 0")
    if config.clip_norm is not None and not config.clip_norm > 0:
        raise ValueError("clip_norm must be positive or None")


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.1
    drop_factor: float = 0.1
    drop_period_epochs: int = 15
    momentum: float = 0.925
    batch_size: int = 1
    epochs: int = 30
    clip_norm: float | None = None

    kind = "sgd"

    def __post_init__(self):
        if not 0 < self.drop_factor <= 1:
            raise ValueError("drop_factor must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        _check_common(self)


@dataclass(frozen=True)
class AdamConfig:
    lr0: float = 1e-4
    drop_factor: float = 0.1
    drop_period_epochs: int = 5
    beta1: float = 0.95
    beta2: float = 0.9
    epsilon: float = 1e-4
    batch_size: int = 1
    epochs: int = 6
    clip_norm: float | None = None

    kind = "adam"

    def __post_init__(self):
        if not 0 < self.drop_factor <= 1:
            raise ValueError("drop_factor must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        _check_common(self)


# Tuned settings for the 3T/7T x SGD/Adam runs. The SGD rates (0.1) blow up
# a He-initialized numpy U-Net on the first steps without norm clipping.
PRESETS = {
    "sgd-3t": SgdConfig(lr0=0.1, drop_factor=0.1, drop_period_epochs=15, momentum=0.925, batch_size=1, epochs=30,
                        clip_norm=1.0),
    "adam-3t": AdamConfig(lr0=1e-4, drop_factor=0.1, drop_period_epochs=5, beta1=0.95, beta2=0.9,
                          epsilon=1e-4, batch_size=1, epochs=6),
    "sgd-7t": SgdConfig(lr0=0.1, drop_factor=0.1, drop_period_epochs=4, momentum=0.95, batch_size=4, epochs=30,
                        clip_norm=1.0),
    "adam-7t": AdamConfig(lr0=1e-4, drop_factor=0.1, drop_period_epochs=5, beta1=0.8, beta2=0.995,
                          epsilon=1e-6, batch_size=16, epochs=6),
}


def get_preset(name, epochs=None):
    """Look up a preset; with ``epochs`` the drop period is stretched proportionally.

    ``epochs=0`` keeps the preset's drop period (nothing is trained).
    """
    try:
        config = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer preset {name!r}; choose from {sorted(PRESETS)}") from None
    if epochs is not None and epochs != config.epochs:
        period = config.drop_period_epochs
        if epochs > 0:
            period = max(1, round(period * epochs / config.epochs))
        config = replace(config, epochs=epochs, drop_period_epochs=period)
    return config


def config_to_dict(config):
    return {"optimizer": config.kind, **asdict(config)}


def lr_schedule(config, epoch):
    """Step decay: lr0 * drop_factor ** floor(epoch / drop_period_epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.drop_factor ** math.floor(epoch / config.drop_period_epochs)


def global_norm(grads):
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds it."""
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


class SGD:
    """v <- momentum * v - lr * g;  w <- w + v."""

    def __init__(self, params, config):
        self.config = config
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads, lr):
        grads = clip_by_global_norm(grads, self.config.clip_norm)
        mu = self.config.momentum
        for name, g in grads.items():
            v = self.velocity[name]
            v *= mu
            v -= lr * g
            params[name] += v
        self.step_count += 1

    def state(self):
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state(self, state, step_count):
        for k in self.velocity:
            self.velocity[k] = state[f"velocity/{k}"].copy()
        self.step_count = step_count


class Adam:
    """Adam with bias-corrected moments: w <- w - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, config):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads, lr):
        grads = clip_by_global_norm(grads, self.config.clip_norm)
        b1, b2, eps = self.config.beta1, self.config.beta2, self.config.epsilon
        self.step_count += 1
        t = self.step_count
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(params[name].dtype, copy=False)

    def state(self):
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, state, step_count):
        for k in self.m:
            self.m[k] = state[f"m/{k}"].copy()
            self.v[k] = state[f"v/{k}"].copy()
        self.step_count = step_count


def make_optimizer(params, config):
    return {"sgd": SGD, "adam": Adam}[config.kind](params, config)
