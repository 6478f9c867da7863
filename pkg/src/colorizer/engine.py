"""Minimal dense-tensor network ops with hand-written backward passes.

Covers exactly the layer vocabulary the colorization architecture needs:
3x3 (optionally strided/dilated) convolution, batch norm, ReLU, 2x nearest
upsampling, bilinear output lifting, weighted softmax cross-entropy, L2
regression loss and the ADAM update. All ops preserve the input dtype, so
gradient checks can run the same code in float64. Summation order is fixed;
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def conv_output_size(size: int, kernel: int, stride: int, dilation: int,
                     pad: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   stride: int = 1, dilation: int = 1,
                   pad: int | None = None):
    """Convolve (N, Cin, H, W) with (Cout, Cin, kh, kw); returns (y, cache).

    ``pad`` defaults to dilation*(kernel-1)/2, i.e. "same" geometry at
    stride 1.
    """
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, weight expects {cin_w}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    if pad is None:
        pad = dilation * (kh - 1) // 2
    ho = conv_output_size(h, kh, stride, dilation, pad)
    wo = conv_output_size(w, kw, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for this convolution")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            hi = ki * dilation
            wi = kj * dilation
            cols[:, :, ki, kj] = xp[:, :,
                                    hi:hi + stride * (ho - 1) + 1:stride,
                                    wi:wi + stride * (wo - 1) + 1:stride]
    colsm = cols.reshape(n, cin * kh * kw, ho * wo)
    y = np.matmul(weight.reshape(cout, -1), colsm)
    y = y.reshape(n, cout, ho, wo) + bias[None, :, None, None]
    cache = (x.shape, xp.shape, colsm, weight, stride, dilation, pad)
    return y, cache


def conv2d_backward(grad_y: np.ndarray, cache):
    """Gradients of conv2d_forward: returns (grad_x, grad_w, grad_b)."""
    x_shape, xp_shape, colsm, weight, stride, dilation, pad = cache
    n, cin, h, w = x_shape
    cout, _, kh, kw = weight.shape
    _, _, ho, wo = grad_y.shape
    g2 = grad_y.reshape(n, cout, ho * wo)

    grad_b = grad_y.sum(axis=(0, 2, 3))
    grad_w = np.matmul(g2, colsm.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(weight.shape)

    grad_cols = np.matmul(weight.reshape(cout, -1).T, g2)
    grad_cols = grad_cols.reshape(n, cin, kh, kw, ho, wo)
    grad_xp = np.zeros(xp_shape, dtype=grad_y.dtype)
    for ki in range(kh):
        for kj in range(kw):
            hi = ki * dilation
            wi = kj * dilation
            grad_xp[:, :,
                    hi:hi + stride * (ho - 1) + 1:stride,
                    wi:wi + stride * (wo - 1) + 1:stride] += grad_cols[:, :, ki, kj]
    if pad:
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype))


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      state: BatchNormState, training: bool):
    """Per-channel batch normalization over (N, H, W); returns (y, cache).

    Training mode normalizes by batch statistics and updates the running
    estimates; eval mode uses running statistics and refuses to run before
    any training step has populated them.
    """
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        state.running_mean = ((1.0 - state.momentum) * state.running_mean
                              + state.momentum * mu).astype(x.dtype)
        state.running_var = ((1.0 - state.momentum) * state.running_var
                             + state.momentum * var).astype(x.dtype)
        state.num_batches_tracked += 1
    else:
        if state.num_batches_tracked == 0:
            raise RuntimeError(
                "batchnorm eval requested before any training step")
        mu = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, training)
    return y, cache


def batchnorm_backward(grad_y: np.ndarray, cache):
    """Gradients of batchnorm_forward: returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_y * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_y.sum(axis=(0, 2, 3))
    dxhat = grad_y * gamma[None, :, None, None]
    if not training:
        return dxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    n_eff = grad_y.shape[0] * grad_y.shape[2] * grad_y.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = (inv_std[None, :, None, None] / n_eff) * (
        n_eff * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray):
    # subgradient at 0 is defined as 0 (mask is strict)
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_y * mask


def upsample_nearest_forward(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_y: np.ndarray, factor: int = 2) -> np.ndarray:
    n, c, h, w = grad_y.shape
    return grad_y.reshape(n, c, h // factor, factor,
                          w // factor, factor).sum(axis=(3, 5))


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (N, C, H, W) with the align-corners=false
    convention (source coordinate = (dst + 0.5) * scale - 0.5)."""
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()

    def axis_coords(out_size, in_size):
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
        src = np.clip(src, 0.0, in_size - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, in_size - 1)
        return i0, i1, (src - i0)

    r0, r1, fr = axis_coords(out_h, h)
    c0, c1, fc = axis_coords(out_w, w)
    top = x[:, :, r0][:, :, :, c0] * (1 - fc) + x[:, :, r0][:, :, :, c1] * fc
    bot = x[:, :, r1][:, :, :, c0] * (1 - fc) + x[:, :, r1][:, :, :, c1] * fc
    out = top * (1 - fr[:, None]) + bot * fr[:, None]
    return out.astype(x.dtype)


def weighted_softmax_xent(logits: np.ndarray, targets: np.ndarray,
                          v: np.ndarray):
    """Per-pixel weighted multinomial cross-entropy, averaged over the batch.

    ``logits`` and ``targets`` are (N, Q, H, W) with targets on the simplex
    per pixel; ``v`` is (N, H, W) nonnegative weights. Returns
    (loss, grad_logits) with grad = v * (softmax - target) / N.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    if v.shape != (n, logits.shape[2], logits.shape[3]):
        raise ValueError(f"weights shape {v.shape} does not match pixels")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    loss = float(-(v[:, None] * targets * logp).sum() / n)
    grad = (v[:, None] * (e / denom - targets) / n).astype(logits.dtype)
    return loss, grad


def l2_loss(pred: np.ndarray, gt: np.ndarray):
    """Half squared error summed over pixels, averaged over the batch."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    n = pred.shape[0]
    diff = pred - gt
    loss = float(0.5 * (diff.astype(np.float64) ** 2).sum() / n)
    return loss, (diff / n).astype(pred.dtype)


@dataclass
class AdamState:
    """ADAM moments and hyperparameters for a named parameter set."""

    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected ADAM update, in place on ``params``.

    Weight decay is classic L2: added to the gradient before the moment
    updates. Parameters are visited in sorted-name order.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name] + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


def he_normal(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-normal (fan-in) initialization for conv weights."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
