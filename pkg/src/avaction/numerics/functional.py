"""Differentiable building blocks used by the model and the training losses.

Every function here accepts and returns :class:`Tensor` objects and works on
arbitrary leading batch dimensions unless noted otherwise.
"""

from __future__ import annotations

import numpy as np

from avaction.numerics.rng import RngState
from avaction.numerics.tensor import Tensor, as_tensor

NEG_INF = -1e30
BCE_EPS = 1e-7


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """A hyperparameter or structural setting is invalid."""


class InputTooShortError(ValueError):
    """A sequence is shorter than an operator's receptive field."""


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise DimensionError(
            f"linear: x{x.shape} incompatible with W{W.shape}"
            + (f" and b{as_tensor(b).shape}" if b is not None else "")
        )
    y = x @ W
    return y + b if b is not None else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    assert gain.shape == (d,) and shift.shape == (d,)
    return Tensor._make(xhat * gain.data + shift.data, (x, gain, shift), backward)


def masked_fill(x: Tensor, allowed: np.ndarray, value: float = NEG_INF) -> Tensor:
    """Replace entries where ``allowed`` is False with a constant."""
    allowed = np.broadcast_to(allowed, x.shape)
    return Tensor._make(
        np.where(allowed, x.data, value), (x,), lambda g: (np.where(allowed, g, 0.0),)
    )


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``n x n`` mask; position i may attend to positions <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    params: dict[str, Tensor],
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with learned projections.

    ``q`` is ``[..., Tq, d]`` and ``k``/``v`` are ``[..., Tk, d]``. ``params``
    holds ``wq, bq, wk, bk, wv, bv, wo, bo``. ``mask`` is a boolean array
    broadcastable to ``[..., Tq, Tk]``; False entries are excluded.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    Q = linear(q, params["wq"], params["bq"])
    K = linear(k, params["wk"], params["bk"])
    V = linear(v, params["wv"], params["bv"])

    def split(t: Tensor) -> Tensor:
        lead = t.shape[:-1]
        return t.reshape(*lead, heads, dh).swapaxes(-2, -3)  # [..., h, T, dh]

    Qh, Kh, Vh = split(Q), split(K), split(V)
    scores = (Qh @ Kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim >= 3:
            m = np.expand_dims(m, -3)  # broadcast over heads
        scores = masked_fill(scores, m)
    attn = softmax(scores, axis=-1)
    ctx = (attn @ Vh).swapaxes(-2, -3)
    ctx = ctx.reshape(*ctx.shape[:-2], d)
    return linear(ctx, params["wo"], params["bo"])


def conv1d_time(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid-mode temporal convolution of ``x[..., T, d]`` with ``kernels[k, d, d_out]``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    k, d, d_out = kernels.shape
    T = x.shape[-2]
    if x.shape[-1] != d:
        raise DimensionError(f"conv1d_time: x{x.shape} incompatible with kernels{kernels.shape}")
    if T < k:
        raise InputTooShortError(f"conv1d_time: sequence length {T} < kernel size {k}")
    starts = np.arange(0, T - k + 1, stride)
    idx = starts[:, None] + np.arange(k)[None, :]  # [T', k]
    windows = x.data[..., idx, :]  # [..., T', k, d]
    y = np.einsum("...tkd,kde->...te", windows, kernels.data)

    def backward(g):
        gw = np.einsum("...tkd,...te->kde", windows, g)
        gwin = np.einsum("...te,kde->...tkd", g, kernels.data)
        gx = np.zeros(x.shape)
        for j in range(k):
            np.add.at(gx, (..., idx[:, j], slice(None)), gwin[..., :, j, :])
        return gx, gw

    out = Tensor._make(y, (x, kernels), backward)
    return out + bias if bias is not None else out


def cross_entropy(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean token negative log-likelihood, skipping ``ignore_id`` positions.

    If every target is ignored the loss is exactly 0 and the gradient is all
    zeros.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets{targets.shape} vs logits{logits.shape}")
    keep = targets != ignore_id
    bad = keep & ((targets < 0) | (targets >= V))
    if bad.any():
        raise IndexError(f"cross_entropy: target id {int(targets[bad][0])} outside [0, {V})")
    n = int(keep.sum())
    safe = np.where(keep, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / n if n else 0.0

    def backward(g):
        if not n:
            return (np.zeros(logits.shape),)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * keep[..., None] / n,)

    return Tensor._make(np.asarray(loss, dtype=np.float64), (logits,), backward)


def gumbel_noise(shape, rng: RngState) -> np.ndarray:
    u = rng.uniform(shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits: Tensor, temperature: float, rng: RngState) -> Tensor:
    """Relaxed one-hot sample ``softmax((logits + g) / temperature)``."""
    if not temperature > 0:
        raise ConfigurationError(f"Gumbel temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    g = gumbel_noise(logits.shape, rng)
    return softmax((logits + g) * (1.0 / temperature), axis=-1)


def binary_cross_entropy(p: Tensor, label: float, eps: float = BCE_EPS) -> Tensor:
    p = as_tensor(p).clip(eps, 1.0 - eps)
    if label == 1:
        return -p.log()
    if label == 0:
        return -(1.0 - p).log()
    return -(p.log() * label + (1.0 - p).log() * (1.0 - label))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = x.data
    c = np.sqrt(2.0 / np.pi)
    u = c * (a + 0.044715 * a**3)
    t = np.tanh(u)
    y = 0.5 * a * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)

    return Tensor._make(y, (x,), backward)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
