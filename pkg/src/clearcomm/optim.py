"""Named parameter collections and the Adam update."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered map from parameter name to tensor, with per-parameter Adam
    state (first moment, second moment, step counter)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = data if isinstance(data, Tensor) else Tensor(np.asarray(data, dtype=np.float64))
        t.requires_grad = True
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._step[name] = 0
        return t

    def replace(self, name: str, data) -> Tensor:
        """Swap the tensor object behind an existing name, keeping Adam
        state. Used to graft externally built tensors into the graph."""
        if name not in self._params:
            raise KeyError(name)
        t = data if isinstance(data, Tensor) else Tensor(
            np.asarray(data, dtype=np.float64))
        if t.shape != self._params[name].shape:
            raise ValueError(f"shape mismatch replacing {name}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def subset(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def adam_state(self, name: str):
        return self._m[name], self._v[name], self._step[name]

    def load_adam_state(self, name: str, m: np.ndarray, v: np.ndarray,
                        step: int):
        if m.shape != self._params[name].shape or v.shape != m.shape:
            raise ValueError(f"adam state shape mismatch for {name}")
        if step < 0:
            raise ValueError(f"negative step counter for {name}")
        self._m[name] = m.astype(np.float64)
        self._v[name] = v.astype(np.float64)
        self._step[name] = int(step)


def backward(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss and return gradients by parameter name.

    Parameters the loss does not reach get zero gradients.
    """
    loss.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    return grads


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient dict so its global L2 norm is at most
    max_norm; returns the pre-clip norm.

    A single runaway batch otherwise inflates Adam's second moments for
    thousands of steps, freezing the effective learning rate.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8):
    """One canonical Adam update over every named gradient.

    The step counter increments before bias correction; non-finite gradients
    abort the run.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter '{name}'; step rejected")
        t = params[name]
        params._step[name] += 1
        step = params._step[name]
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + epsilon)
