"""Differentiable layer operations on :class:`Tensor` (stride 1, no kernel flip)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DataError
from .tensor import Tensor, as_tensor


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    # [B,C,Hp,Wp] -> [B*H'*W', C*k*k]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H',W',k,k
    bsz, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)


def conv2d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,C_in,H,W] (or [C_in,H,W]) with ``weight`` [C_out,C_in,k,k]."""
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"kernel must be square with odd size, got {k}x{k2}")
    if xd.shape[1] != c_in:
        raise ConfigurationError(f"input has {xd.shape[1]} channels but kernel expects {c_in}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")
    bsz, _, h, w = xd.shape
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"kernel {k} too large for input {h}x{w} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T  # [B*ho*wo, c_out]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ConfigurationError(f"bias shape {bias.shape} does not match {c_out} output channels")
        out += bias.data
        parents.append(bias)
    out = out.reshape(bsz, ho, wo, c_out).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grads = [None, None]
        if x.requires_grad:
            gcols = np.ascontiguousarray((gmat @ wmat).reshape(bsz, ho, wo, c_in, k, k).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            grads[0] = gx[0] if squeeze else gx
        if weight.requires_grad:
            grads[1] = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def maxpool2x2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes (odd trailing rows/cols dropped)."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ConfigurationError(f"maxpool2x2 needs spatial size >= 2, got {h}x{w}")
    xc = x.data[..., : 2 * h2, : 2 * w2]
    blocks = xc.reshape(*lead, h2, 2, w2, 2).swapaxes(-3, -2).reshape(*lead, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape)
        gx[..., : 2 * h2, : 2 * w2] = gb.reshape(*lead, h2, w2, 2, 2).swapaxes(-3, -2).reshape(*lead, 2 * h2, 2 * w2)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Average over the two trailing spatial axes: [..., H, W] -> [...]."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input features {x.shape[-1]} != weight columns {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data if g.ndim == 2 else np.outer(g, x.data)]
        if bias is not None:
            grads.append(g.sum(axis=0) if g.ndim == 2 else g)
        return grads

    return Tensor._from_op(out, parents, backward)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: retained units are scaled by 1/(1-p); identity when not training."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain (non-differentiable) stabilised softmax on arrays."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def pick(x, labels: np.ndarray) -> Tensor:
    """Select ``x[n, labels[n]]`` from a [B, C] tensor."""
    x = as_tensor(x)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ConfigurationError(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise DataError(f"labels must lie in [0, {x.shape[1]}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros(x.shape)
        gx[rows, labels] = g
        return (gx,)

    return Tensor._from_op(x.data[rows, labels], (x,), backward)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy against integer labels."""
    return -pick(log_softmax(logits), labels).mean()


def kernel_contract(mixing, basis) -> Tensor:
    """``W[o,i,a,b] = sum_r M[o,i,r] B[r,a,b]``, differentiable in both factors."""
    mixing, basis = as_tensor(mixing), as_tensor(basis)
    if mixing.data.ndim != 3 or basis.data.ndim != 3 or mixing.shape[2] != basis.shape[0]:
        raise ConfigurationError(f"rank mismatch between mixing {mixing.shape} and basis {basis.shape}")
    c_out, c_in, rank = mixing.shape
    _, k1, k2 = basis.shape
    m2 = mixing.data.reshape(c_out * c_in, rank)
    b2 = basis.data.reshape(rank, k1 * k2)
    out = (m2 @ b2).reshape(c_out, c_in, k1, k2)

    def backward(g):
        g2 = g.reshape(c_out * c_in, k1 * k2)
        gm = (g2 @ b2.T).reshape(mixing.shape) if mixing.requires_grad else None
        gb = (m2.T @ g2).reshape(basis.shape) if basis.requires_grad else None
        return gm, gb

    return Tensor._from_op(out, (mixing, basis), backward)
