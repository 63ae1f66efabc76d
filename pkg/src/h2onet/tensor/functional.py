"""Differentiable neural-network operations on NCHW tensors."""

from __future__ import annotations

import numpy as np

from .engine import Tensor, concat, exp, make_result, tsum

# -- convolution kernels (plain numpy) ------------------------------------------


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns of shape (C*k*k, N*Ho*Wo), ordered (C, ki, kj) x (N, Ho, Wo)."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols: np.ndarray, n: int, c: int, k: int, stride: int, ho: int, wo: int, padded_hw) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to (N, C, Hp, Wp)."""
    d = dcols.reshape(c, k, k, n, ho, wo)
    dx = np.zeros((c, n, padded_hw[0], padded_hw[1]), dtype=dcols.dtype)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + hspan : stride, j : j + wspan : stride] += d[:, i, j]
    return dx.transpose(1, 0, 2, 3)


def _corr(xp: np.ndarray, w: np.ndarray, stride: int, cols: np.ndarray | None = None):
    """Cross-correlate padded input (N,C,Hp,Wp) with weight (O,C,k,k); returns (out, cols)."""
    o, k = w.shape[0], w.shape[2]
    n = xp.shape[0]
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    if cols is None:
        cols = _im2col(xp, k, stride, ho, wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _corr_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padded_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_corr` with respect to its input."""
    n, o, ho, wo = g.shape
    c, k = w.shape[1], w.shape[2]
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dcols = w.reshape(o, -1).T @ gm
    return _col2im(dcols, n, c, k, stride, ho, wo, padded_hw)


def _corr_weight_grad(cols: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    o = g.shape[1]
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
    return (gm @ cols.T).reshape(o, -1, k, k)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a strided, zero-padded cross-correlation: floor((n + 2p - k) / s) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a transposed convolution: (n - 1) * s - 2p + k."""
    return (size - 1) * stride - 2 * padding + kernel


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernels.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, k, k). Output spatial size
    follows :func:`conv_output_size`.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ValueError(f"conv2d expects square kernels, got {weight.shape[2:]}")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if h < k or w < k:
        raise ValueError(f"conv2d padded input {h}x{w} is smaller than kernel {k}x{k}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {weight.shape[0]} output channels")

    xp = _pad(x.data, padding)
    out, cols = _corr(xp, weight.data, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            dxp = _corr_input_grad(g, weight.data, stride, (h, w))
            gx = dxp[:, :, padding : h - padding, padding : w - padding] if padding else dxp
        if weight.requires_grad:
            gw = _corr_weight_grad(cols, g, k)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``weight`` is (C_in, C_out, k, k). Output spatial size follows
    :func:`conv_transpose_output_size`; a 4x4 kernel with stride 2 and
    padding 1 doubles the resolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[0]}"
        )
    k = weight.shape[2]
    full_h = (x.shape[2] - 1) * stride + k
    full_w = (x.shape[3] - 1) * stride + k
    if full_h - 2 * padding < 1 or full_w - 2 * padding < 1:
        raise ValueError("conv_transpose2d padding removes the whole output")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"conv_transpose2d bias shape {bias.shape} does not match {weight.shape[1]} output channels")

    full = _corr_input_grad(x.data, weight.data, stride, (full_h, full_w))
    out = full[:, :, padding : full_h - padding, padding : full_w - padding] if padding else full
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        gp = _pad(g, padding)
        cols = _im2col(gp, k, stride, x.shape[2], x.shape[3])
        if x.requires_grad:
            gx, _ = _corr(gp, weight.data, stride, cols)
        if weight.requires_grad:
            gw = _corr_weight_grad(cols, x.data, k)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv_transpose2d")


# -- normalization -------------------------------------------------------------


def _normalize(x: Tensor, axes: tuple[int, ...], eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Fused (x - mean) / sqrt(var + eps) over ``axes`` with biased variance."""
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    count = 1
    for ax in axes:
        count *= x.shape[ax]

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_result(xhat, (x,), backward, "normalize"), mu, var * count / max(count - 1, 1)


def _affine(xhat: Tensor, gamma: Tensor | None, beta: Tensor | None) -> Tensor:
    c = xhat.shape[1]
    if gamma is not None:
        if gamma.shape != (c,):
            raise ValueError(f"gamma shape {gamma.shape} does not match {c} channels")
        xhat = xhat * gamma.reshape(1, c, 1, 1)
    if beta is not None:
        if beta.shape != (c,):
            raise ValueError(f"beta shape {beta.shape} does not match {c} channels")
        xhat = xhat + beta.reshape(1, c, 1, 1)
    return xhat


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and, when buffers are
    given and ``update_stats`` is set, the running estimates are updated in
    place (unbiased variance). In eval mode the running estimates are used.
    Constant input maps to zeros because the variance is guarded by ``eps``.
    """
    if gamma is not None and gamma.shape != (x.shape[1],):
        raise ValueError(f"gamma shape {gamma.shape} does not match {x.shape[1]} channels")
    if training:
        xhat, mu, unbiased = _normalize(x, (0, 2, 3), eps)
        if update_stats and running_mean is not None and running_var is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased.reshape(-1)
    else:
        c = x.shape[1]
        scale = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        shift = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x - shift) * scale
    return _affine(xhat, gamma, beta)


def instance_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over (H, W); identical in train and eval."""
    xhat, _, _ = _normalize(x, (2, 3), eps)
    return _affine(xhat, gamma, beta)


# -- activations ------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return make_result(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.data.max(axis=axis, keepdims=True)
    e = exp(shifted)
    return e / tsum(e, axis=axis, keepdims=True)


# -- resampling and channel ops -------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights (n_out, n_in) using the half-pixel convention.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]`` (align-corners disabled).
    """
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a


def upsample_bilinear(x: Tensor, scale: int = 2) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    ah = bilinear_matrix(h, h * scale, x.dtype)
    aw = bilinear_matrix(w, w * scale, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return make_result(out, (x,), backward, "upsample_bilinear")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack NCHW tensors along the channel axis, preserving argument order."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ValueError(f"concat_channels shape mismatch: {first.shape} vs {t.shape}")
    return concat(tensors, axis=1)
