"""Neural-network layer functions, losses, and the Adam optimizer step.

All functions operate on float64 Tensors and register backward rules on the
active GradTape. Convolution is implemented as cross-correlation (no kernel
flip), the usual deep-learning convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError
from .rng import RngState
from .tensor import Tensor, record

CE_CLAMP = 1e-12


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """Zero padding producing ceil(size/stride) outputs; extra pixel after."""
    out = -(-size // stride)
    total = max(0, (out - 1) * stride + k - size)
    before = total // 2
    return before, total - before


def conv2d(x: Tensor, kernels_t: Tensor, bias: Tensor, stride: int = 1,
           padding: str = "valid") -> Tensor:
    """Cross-correlate [N,C,H,W] with [O,C,kh,kw] kernels plus per-channel bias."""
    if x.values.ndim != 4 or kernels_t.values.ndim != 4:
        raise ShapeError("conv2d expects a 4-D input and 4-D kernels")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels_t.shape
    if c != kc:
        raise ShapeError(f"input has {c} channels but kernels expect {kc}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding requires odd kernel extents")
        pt, pb = _same_padding(h, kh, stride)
        pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError("input smaller than kernel under valid padding")
        pt = pb = pl = pr = 0
    else:
        raise ShapeError(f"unknown padding {padding!r}")

    ho = (h + pt + pb - kh) // stride + 1
    wo = (w + pl + pr - kw) // stride + 1

    xv = np.ascontiguousarray(x.values)
    cols = kernels.im2col(xv, kh, kw, stride, pt, pl, ho, wo)  # [N, C*kh*kw, L]
    k2 = kernels_t.values.reshape(o, c * kh * kw)
    out2 = np.matmul(k2, cols)                                 # [N, O, L]
    out2 += bias.values[None, :, None]
    out = Tensor(out2.reshape(n, o, ho, wo))

    def back(g):
        g2 = g.reshape(n, o, ho * wo)
        dbias = g2.sum(axis=(0, 2))
        # Batched matmul reads the strided transpose in place; tensordot
        # would copy the (large) cols array first.
        dk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels_t.shape)
        dcols = np.matmul(k2.T, g2)                            # [N, C*kh*kw, L]
        dx = kernels.col2im(dcols, n, c, h, w, kh, kw, stride, pt, pl, ho, wo)
        return dx, dk, dbias

    record(out, (x, kernels_t, bias), back)
    return out


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(0.0, x.values))
    mask = x.values > 0
    record(out, (x,), lambda g: (g * mask,))
    return out


def global_pool(x: Tensor, kind: str = "avg") -> Tensor:
    """Collapse [N,C,H,W] to [N,C] by spatial mean or max (first-max ties)."""
    if x.values.ndim != 4:
        raise ShapeError("global_pool expects a 4-D input")
    n, c, h, w = x.shape
    if kind == "avg":
        out = Tensor(x.values.mean(axis=(2, 3)))
        record(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))
    elif kind == "max":
        flat = x.values.reshape(n, c, h * w)
        am = np.argmax(flat, axis=2)
        out = Tensor(np.take_along_axis(flat, am[:, :, None], axis=2)[:, :, 0])

        def back(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, am[:, :, None], g[:, :, None], axis=2)
            return (dflat.reshape(x.shape),)

        record(out, (x,), back)
    else:
        raise ShapeError(f"unknown pool kind {kind!r}")
    return out


@dataclass
class BatchNormState:
    """Per-channel scale/shift parameters plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, s: BatchNormState, mode: str) -> Tensor:
    """Normalize per channel: batch statistics in train mode (updating the
    running estimates), running statistics in infer mode.
    """
    nd = x.values.ndim
    if nd not in (2, 4):
        raise ShapeError("batch_norm expects [N,C] or [N,C,H,W]")
    axes = (0,) if nd == 2 else (0, 2, 3)
    cshape = (1, -1) if nd == 2 else (1, -1, 1, 1)
    gamma, beta = s.gamma, s.beta

    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batch_norm train mode needs a batch of at least 2")
        count = x.size // x.shape[1]
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)  # biased, matching the running estimate
        inv = 1.0 / np.sqrt(var + s.eps)
        xhat = (x.values - mu.reshape(cshape)) * inv.reshape(cshape)
        out = Tensor(gamma.values.reshape(cshape) * xhat + beta.values.reshape(cshape))
        s.running_mean = s.momentum * s.running_mean + (1.0 - s.momentum) * mu
        s.running_var = s.momentum * s.running_var + (1.0 - s.momentum) * var
        sub = "nc" if nd == 2 else "nchw"

        def back(g):
            dbeta = g.sum(axis=axes)
            dgamma = np.einsum(f"{sub},{sub}->c", g, xhat)
            # dx = gamma*inv * (g - mean(g) - xhat * mean(g*xhat)) per channel;
            # mean(g*xhat) is dgamma/count, so no extra full-size temporaries.
            dx = g - g.mean(axis=axes).reshape(cshape) - xhat * (dgamma / count).reshape(cshape)
            dx *= (gamma.values * inv).reshape(cshape)
            return dx, dgamma, dbeta

        record(out, (x, gamma, beta), back)
    elif mode == "infer":
        inv = 1.0 / np.sqrt(s.running_var + s.eps)
        xhat = (x.values - s.running_mean.reshape(cshape)) * inv.reshape(cshape)
        out = Tensor(gamma.values.reshape(cshape) * xhat + beta.values.reshape(cshape))

        def back(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dx = g * (gamma.values * inv).reshape(cshape)
            return dx, dgamma, dbeta

        record(out, (x, gamma, beta), back)
    else:
        raise ShapeError(f"unknown mode {mode!r}")
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x:[N,F], w:[F,U], b:[U]."""
    if x.values.ndim != 2 or w.values.ndim != 2:
        raise ShapeError("dense expects 2-D input and weights")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"dense dims differ: x{x.shape} w{w.shape} b{b.shape}")
    out = Tensor(x.values @ w.values + b.values)
    record(out, (x, w, b), lambda g: (g @ w.values.T, x.values.T @ g, g.sum(axis=0)))
    return out


def dropout(x: Tensor, rate: float, mode: str, rng: RngState) -> tuple[Tensor, RngState]:
    """Inverted dropout: train mode keeps each element with probability
    1-rate and scales by 1/(1-rate); infer mode is the identity.
    """
    if rate >= 1.0 or rate < 0.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, rng
    u, rng2 = rng.uniforms(x.size)
    mask = (u.reshape(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.values * mask)
    record(out, (x,), lambda g: (g * mask,))
    return out, rng2


def softmax(logits: Tensor) -> Tensor:
    """Row-wise max-shifted softmax over [N,K]; rows sum to 1."""
    if logits.values.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError("softmax expects [N,K] with K >= 2")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def back(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    record(out, (logits,), back)
    out._softmax_src = logits
    return out


def sparse_ce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class.

    When `probs` is the direct output of `softmax`, the backward pass fuses
    the two ops and sends (probs - one_hot)/N straight to the logits, which
    stays stable even when a true-class probability underflows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels out of range [0, {k})")
    picked = np.clip(probs.values[np.arange(n), labels], CE_CLAMP, 1.0)
    out = Tensor(-np.mean(np.log(picked)))

    src = probs._softmax_src
    if src is not None:
        def back_fused(g):
            onehot = np.zeros_like(probs.values)
            onehot[np.arange(n), labels] = 1.0
            return ((probs.values - onehot) * (float(g) / n),)

        record(out, (src,), back_fused)
    else:
        def back(g):
            d = np.zeros_like(probs.values)
            raw = probs.values[np.arange(n), labels]
            inside = ((raw >= CE_CLAMP) & (raw <= 1.0)).astype(np.float64)
            d[np.arange(n), labels] = -inside / (n * picked)
            return (d * float(g),)

        record(out, (probs,), back)
    return out


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(named_params: list[tuple[str, Tensor]], s: AdamState, lr: float) -> None:
    """One Adam update over parameters with populated gradients (in place)."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    s.t += 1
    c1 = 1.0 - s.beta1**s.t
    c2 = 1.0 - s.beta2**s.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = s.m.get(name)
        v = s.v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = s.beta1 * m + (1.0 - s.beta1) * g
        v = s.beta2 * v + (1.0 - s.beta2) * (g * g)
        s.m[name] = m
        s.v[name] = v
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
