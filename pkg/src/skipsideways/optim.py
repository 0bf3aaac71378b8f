"""Parameter updates applied at update boundaries."""

from __future__ import annotations

import math

import numpy as np

from .topology import EngineConfig


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or update."""

    def __init__(self, message: str, step: int | None = None, value: float | None = None):
        super().__init__(message)
        self.step = step
        self.value = value


def scheduled_lr(config: EngineConfig, update_index: int) -> float:
    if config.lr_schedule == "cosine" and config.schedule_steps > 0:
        frac = min(update_index / config.schedule_steps, 1.0)
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    return config.learning_rate


def apply_update(params: dict, accumulated: dict, lr: float, config: EngineConfig | None = None,
                 state: dict | None = None, step: int | None = None) -> dict:
    """Return updated parameters and zero ``accumulated`` in place.

    Plain SGD is ``theta - lr * accumulated``; momentum and Adam keep their
    moments in ``state`` (a per-unit dict owned by the caller).
    """
    for name, g in accumulated.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite accumulated gradient for {name!r}; update refused", step=step)
    kind = "sgd" if config is None else config.optimizer
    new = {}
    if kind == "sgd":
        for name, p in params.items():
            new[name] = p - lr * accumulated[name] if lr != 0.0 else p.copy()
    elif kind == "momentum":
        vel = state.setdefault("velocity", {})
        for name, p in params.items():
            v = vel.get(name)
            v = accumulated[name].copy() if v is None else config.momentum * v + accumulated[name]
            vel[name] = v
            new[name] = p - lr * v
    else:
        m_all = state.setdefault("m", {})
        v_all = state.setdefault("v", {})
        t = state["t"] = state.get("t", 0) + 1
        b1, b2 = config.momentum, config.beta2
        for name, p in params.items():
            g = accumulated[name]
            m = b1 * m_all.get(name, 0.0) + (1 - b1) * g
            v = b2 * v_all.get(name, 0.0) + (1 - b2) * g * g
            m_all[name], v_all[name] = m, v
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            new[name] = p - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    for g in accumulated.values():
        g[...] = 0.0
    return new
