"""Finite-difference utilities used to verify analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, active_tape, backward


def numerical_gradient(fn, arrays, h: float = 1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` per array entry."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = fn(*arrays)
            arr[idx] = orig - h
            fm = fn(*arrays)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
            it.iternext()
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6):
    """Worst-case relative error with a small floor to tolerate near-zero grads."""
    denom = np.maximum.reduce(
        [np.abs(analytic), np.abs(numeric), np.full_like(analytic, floor)]
    )
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, params: dict, h: float = 1e-5):
    """Compare tape gradients of ``build_loss(params)`` against central
    finite differences over every entry of every parameter.

    ``params`` maps names to :class:`Tensor` leaves with ``requires_grad``
    set; ``build_loss`` must rebuild the forward pass from current values and
    return a scalar Tensor. Returns {name: max relative error}.
    """
    tape = active_tape()
    tape.clear()
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    tape.clear()

    def scalar_eval():
        tape.clear()
        val = float(build_loss().data)
        tape.clear()
        return val

    errs = {}
    for name, p in params.items():
        arr = p.data
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = scalar_eval()
            arr[idx] = orig - h
            fm = scalar_eval()
            arr[idx] = orig
            num[idx] = (fp - fm) / (2.0 * h)
            it.iternext()
        errs[name] = max_rel_err(analytic[name], num)
    return errs
