"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, fresh_tape, no_grad


def numeric_grad(fn, inputs, index, h=1e-4):
    """d fn(*inputs) / d inputs[index] by central differences.

    ``fn`` must return a scalar Tensor; it is evaluated without recording.
    """
    x = inputs[index].data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*inputs).data)
            flat[i] = orig - h
            down = float(fn(*inputs).data)
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(fn, inputs):
    for t in inputs:
        t.grad = None
    with fresh_tape():
        loss = fn(*inputs)
        backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn, inputs, h=1e-4, floor=1e-6):
    """Worst relative error over every ``requires_grad`` input."""
    inputs = list(inputs)
    got = analytic_grads(fn, inputs)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not (isinstance(t, Tensor) and t.requires_grad):
            continue
        worst = max(worst, max_relative_error(got[i], numeric_grad(fn, inputs, i, h), floor))
    return worst
