"""Named parameter storage and the Adam optimizer."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class ParamStore:
    """Trainable parameters, non-trainable buffers, and Adam moments.

    Buffers (batchnorm running statistics) live beside the parameters so
    they are checkpointed together but are never touched by the optimizer.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value, dtype=np.float32)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def cast(self, dtype):
        """Convert every parameter, buffer and moment to ``dtype`` in place."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k].astype(dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.params.items():
            out[f"param/{k}"] = p.data
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
            out[f"adam/t/{k}"] = np.array([self.steps[k]], dtype=np.float32)
        for k, b in self.buffers.items():
            out[f"buffer/{k}"] = b
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            arr = state[f"param/{k}"]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = np.array(arr, dtype=np.float32)
            self.m[k] = np.array(state.get(f"adam/m/{k}", np.zeros_like(arr)), dtype=np.float32)
            self.v[k] = np.array(state.get(f"adam/v/{k}", np.zeros_like(arr)), dtype=np.float32)
            self.steps[k] = int(state.get(f"adam/t/{k}", np.zeros(1))[0])
        for k in self.buffers:
            self.buffers[k][...] = state[f"buffer/{k}"]


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    grads = [p.grad for p in store.params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-6))
        for p in store.params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> list[str]:
    """Bias-corrected Adam update of every parameter holding a gradient.

    Returns the names of parameters skipped for lack of a gradient.
    """
    skipped = []
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            skipped.append(name)
            continue
        t = store.steps[name] + 1
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        store.steps[name] = t
    if skipped:
        log.debug("adam: %d parameters without gradient: %s", len(skipped), skipped)
    return skipped
