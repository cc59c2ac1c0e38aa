from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from avaction.numerics.tensor import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to array ``x`` (mutated and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Relative error between autograd and finite-difference gradients.

    Gradients of all inputs are concatenated into one vector before comparing,
    so an input whose true gradient is exactly zero does not produce a 0/0
    ratio. The output of ``fn`` is contracted with a fixed random projection so that
    non-scalar outputs are checked along a generic direction.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).normal(size=out.shape)
    (out * proj).sum().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    numeric = [numerical_gradient(scalar, a, h) for a in arrays]
    return relative_error(
        np.concatenate([g.ravel() for g in analytic]), np.concatenate([n.ravel() for n in numeric])
    )
