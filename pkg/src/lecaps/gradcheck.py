"""Finite-difference gradient checking for the tensor engine.

Checks run the whole engine in float64 (via ``use_dtype``) with central
differences at step 1e-5. The error metric is
max|analytic - numeric| / max(1, max|numeric|), so tiny gradients are
compared absolutely and large ones relatively.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, clear_tape, use_dtype

__all__ = ["numeric_gradient", "relative_error", "check_gradients"]

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar-valued f with respect to x.

    Perturbs x in place one element at a time and restores it, so f must
    read x by reference (the usual case: x is some Tensor's buffer).
    """
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + step
        f_plus = f()
        flat_x[i] = original - step
        f_minus = f()
        flat_x[i] = original
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(numeric).max())) if numeric.size else 1.0
    return float(np.abs(analytic - numeric).max()) / scale if numeric.size else 0.0


def check_gradients(
    build: Callable[[], tuple[Tensor, Sequence[Tensor]]],
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> float:
    """Compare analytic and numeric gradients for a scalar-output graph.

    ``build`` constructs fresh inputs and returns (loss, inputs_to_check);
    it is re-invoked for every finite-difference evaluation, so it must be
    deterministic and must reuse the same Tensor objects across calls
    (close over them and rebuild only the graph).

    Returns the worst relative error over all checked inputs and raises
    AssertionError if it exceeds the tolerance.
    """
    with use_dtype(np.float64):
        clear_tape()
        loss, inputs = build()
        for t in inputs:
            t.zero_grad()
        # build() may have been called before; recompute cleanly.
        loss.backward()
        analytic = []
        for t in inputs:
            if t.grad is None:
                analytic.append(np.zeros_like(t.data))
            else:
                analytic.append(np.array(t.grad, copy=True))

        def forward_value() -> float:
            clear_tape()
            out, _ = build()
            value = out.item()
            clear_tape()
            return value

        worst = 0.0
        for t, a in zip(inputs, analytic):
            n = numeric_gradient(forward_value, t.data, step=step)
            err = relative_error(a, n)
            worst = max(worst, err)
            if err > tolerance:
                raise AssertionError(
                    f"gradient mismatch for input of shape {t.data.shape}: relative error {err:.3e} > {tolerance:.1e}"
                )
        return worst
