"""Nadam optimizer and cosine-annealed learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class NadamHyper:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class CosineSchedule:
    lr_max: float = 0.001
    lr_min: float = 1e-5
    total_steps: int = 1

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(step: int, sched: CosineSchedule) -> float:
    """lr_min + 0.5*(lr_max-lr_min)*(1+cos(pi*t/T)); clamps past the horizon."""
    if step >= sched.total_steps:
        return sched.lr_min
    t = max(step, 0)
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (
        1.0 + math.cos(math.pi * t / sched.total_steps))


class Nadam:
    """Nadam with Adam-style bias correction and a Nesterov lookahead term.

    Update, with t' = t+1 and elementwise arithmetic:
        m  <- b1*m + (1-b1)*g
        v  <- b2*v + (1-b2)*g^2
        m^ =  m / (1 - b1^t')
        v^ =  v / (1 - b2^t')
        th <- th - lr_t/(sqrt(v^)+eps) * (b1*m^ + (1-b1)*g/(1 - b1^t'))
    """

    def __init__(self, params: dict, hyper: NadamHyper | None = None):
        self.params = params
        self.hyper = hyper or NadamHyper()
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict, lr: float | None = None) -> None:
        h = self.hyper
        lr_t = h.lr if lr is None else lr
        if lr_t <= 0:
            raise ValueError("learning rate must be positive")
        for g in grads.values():
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; step rejected")
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for key, p in self.params.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[key]
            v = self.v[key]
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= lr_t / (np.sqrt(v_hat) + h.eps) * (
                h.beta1 * m_hat + (1.0 - h.beta1) * g / bc1)

    def state_tensors(self) -> dict:
        out = {"__nadam_t": np.array([float(self.t)])}
        for k in self.params:
            out[f"__nadam_m/{k}"] = self.m[k]
            out[f"__nadam_v/{k}"] = self.v[k]
        return out
