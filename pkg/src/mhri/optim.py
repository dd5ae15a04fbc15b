"""Named parameter storage and the AdamW update."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .autograd import Tensor
from .errors import TrainingStateError


class ParamSet:
    """Ordered named parameters plus AdamW moment buffers.

    Weight decay is applied only to parameters whose name is in ``decay``;
    parameters are decayed unless added with ``decay=False``.
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.step_count = 0
        self.exp_avg: dict[str, np.ndarray] = {}
        self.exp_avg_sq: dict[str, np.ndarray] = {}
        self.decay: set[str] = set()
        for name, tensor in (params or {}).items():
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor, decay: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self.params[name] = tensor
        self.exp_avg[name] = np.zeros_like(tensor.data)
        self.exp_avg_sq[name] = np.zeros_like(tensor.data)
        if decay:
            self.decay.add(name)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def grad_norm(self) -> float:
        total = 0.0
        for tensor in self.params.values():
            if tensor.grad is not None:
                total += float((tensor.grad * tensor.grad).sum())
        return total ** 0.5

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


def adamw_step(
    params: ParamSet,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    clip_norm: float | None = None,
) -> ParamSet:
    """One bias-corrected Adam step with decoupled weight decay, in place.

    A parameter with no gradient is an error: callers must zero-fill unused
    parameters explicitly rather than silently skipping them.
    """
    for name, tensor in params.items():
        if tensor.grad is None:
            raise TrainingStateError(f"parameter {name!r} has no gradient")
    beta1, beta2 = betas
    scale = 1.0
    if clip_norm is not None:
        norm = params.grad_norm()
        if norm > clip_norm:
            scale = clip_norm / (norm + 1e-12)
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, tensor in params.items():
        g = tensor.grad * scale if scale != 1.0 else tensor.grad
        m = params.exp_avg[name]
        v = params.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and name in params.decay:
            tensor.data *= 1.0 - lr * weight_decay
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params
