"""Adam, the inverse-square-root warmup schedule, and Gumbel temperature annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DivergenceError


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return OptimizerState(
            self.beta1,
            self.beta2,
            self.eps,
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> dict:
    """Bias-corrected Adam update, in place on the arrays of ``params``.

    Parameters without an entry in ``grads`` are left untouched (their moments
    still decay so the step counter stays shared).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction = math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * correction) * m / (np.sqrt(v) + state.eps)
    return params


def noam_lr(step: int, warmup: int, d_model: int, scale: float = 1.0) -> float:
    """Linear warmup to ``step == warmup``, then decay as step ** -0.5."""
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass(frozen=True)
class TauSchedule:
    tau0: float = 1.0
    tau_min: float = 0.1
    rate: float = 1e-5
    every: int = 1000

    def __call__(self, step: int) -> float:
        return anneal_tau(step, self.tau0, self.tau_min, self.rate, self.every)


def anneal_tau(step: int, tau0=1.0, tau_min=0.1, rate=1e-5, every=1000) -> float:
    """Exponential decay, held piecewise-constant between updates every ``every`` steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    held = (step // every) * every
    return max(tau_min, tau0 * math.exp(-rate * held))
