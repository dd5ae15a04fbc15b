"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor
from .errors import ContractError


# central differences at h=1e-5 on O(1) losses carry ~1e-11 round-off; entries
# where both gradients are within ATOL of zero count as agreeing, so true-zero
# gradients (e.g. a key bias under softmax) do not report noise / 1e-8
ATOL = 1e-9


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, 1e-8)``; entries where both are within ``atol`` of 0 count as 0."""
    if analytic.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return float(np.max(np.where(scale <= atol, 0.0, diff / np.maximum(scale, 1e-8))))


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check needs a scalar output, got {shape}")
    return float(out.data)


def numeric_gradient(f: Callable[[], Tensor], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``array``, perturbed in place."""
    if not array.flags.c_contiguous:
        raise ContractError("numeric_gradient perturbs in place and needs a contiguous array")
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = _scalar(f())
        flat[i] = orig - h
        minus = _scalar(f())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients of ``f`` at ``x``."""
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = numeric_gradient(lambda: f(x), x.data, h)
    x.grad = None
    return relative_error(analytic, numeric)


def grad_check_many(
    f: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-5
) -> dict[str, float]:
    """Check ``f()`` against every tensor in ``tensors``; returns per-name max relative error."""
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    out = f()
    _scalar(out)
    out.backward()
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        errors[name] = relative_error(analytic, numeric_gradient(f, t.data, h))
    for t in tensors.values():
        t.grad = None
    return errors
