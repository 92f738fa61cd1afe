"""SGD with momentum and Adam over a dict of named numpy parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

from .errors import ConfigError, UsageError


@dataclass
class OptimizerState:
    mode: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer mode {self.mode!r}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")


def _buffer(state: OptimizerState, kind: str, name: str, like: np.ndarray) -> np.ndarray:
    slot = state.buffers.setdefault(kind, {})
    buf = slot.get(name)
    if buf is None:
        buf = slot[name] = np.zeros_like(like)
    elif buf.shape != like.shape:
        raise ConfigError(f"optimizer buffer {kind}/{name} has shape {buf.shape}, param {like.shape}")
    return buf


def optimizer_step(
    state: OptimizerState,
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
) -> None:
    """Update ``params`` in place from ``grads`` and advance the step counter.

    SGD: ``v <- momentum * v + g; p <- p - lr * v``.
    Adam: bias-corrected first and second moments.
    ``weight_decay`` adds ``weight_decay * p`` to the gradient in both modes.
    """
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise UsageError(f"missing gradient for parameter(s): {', '.join(missing[:5])}")

    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.mode == "sgd":
            v = _buffer(state, "velocity", name, p)
            v *= state.momentum
            v += g
            p -= state.lr * v
        else:
            m = _buffer(state, "m", name, p)
            v = _buffer(state, "v", name, p)
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * (g * g)
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(grads: MutableMapping[str, np.ndarray], max_norm: float | None) -> float:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for name in grads:
            grads[name] = grads[name] * np.asarray(scale, dtype=grads[name].dtype)
    return total
