"""Central finite-difference oracle for analytic gradients.

Both the analytic pass and the perturbed forward passes run in float64 so
the comparison measures the differentiation, not float32 round-off.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, Tape, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Perturb ``arr`` in place, one entry at a time."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def check(loss_fn: Callable[[dict[str, Tensor]], Tensor], inputs: dict[str, np.ndarray],
          step: float = 1e-3, wrt: list[str] | None = None) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives fresh float64 leaf tensors keyed like ``inputs`` and
    must return a scalar Tensor.  Returns the relative error per input.
    """
    wrt = list(inputs) if wrt is None else wrt
    with precision(np.float64):
        arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        with Tape():
            leaves = {k: Tensor(a, requires_grad=k in wrt) for k, a in arrays.items()}
            loss = loss_fn(leaves)
            loss.backward()
        analytic = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arrays[k]))
                    for k in wrt}

        def f():
            with Tape():
                ts = {k: Tensor(a) for k, a in arrays.items()}
                return float(loss_fn(ts).data)

        return {k: relative_error(analytic[k], numeric_gradient(f, arrays[k], step)) for k in wrt}
