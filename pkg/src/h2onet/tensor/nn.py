"""Layer modules with parameters, buffers and train/eval modes."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import functional as F
from .engine import Tensor, matmul, no_grad, tsum

_STATE_FROZEN = False


@contextlib.contextmanager
def frozen_state():
    """Stop stateful side effects of forward passes inside the block.

    Running batch-norm statistics and spectral-norm power-iteration vectors
    are left untouched, so repeated forward passes are pure functions of the
    parameters. Gradient checks rely on this.
    """
    global _STATE_FROZEN
    prev = _STATE_FROZEN
    _STATE_FROZEN = True
    try:
        yield
    finally:
        _STATE_FROZEN = prev


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast parameters and floating buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in m._buffers:
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {value.shape}")
                params[name].data = np.array(value, copy=True)
            else:
                *path, leaf = name.split(".")
                owner = self
                for part in path:
                    owner = owner._modules[part]
                object.__setattr__(owner, leaf, np.array(value, copy=True))


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, slope: float = 0.2) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- spectral normalization ---------------------------------------------------------


def power_iteration(matrix: np.ndarray, u: np.ndarray, n_iter: int) -> tuple[np.ndarray, np.ndarray]:
    """Refine left/right singular-vector estimates of ``matrix`` in place of ``u``."""
    v = matrix.T @ u
    for _ in range(n_iter):
        v = matrix.T @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = matrix @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    return u, v


def spectral_normalize(weight: Tensor, u: np.ndarray, n_iter: int = 1, out_axis: int = 0) -> tuple[Tensor, np.ndarray]:
    """Divide ``weight`` by an estimate of its largest singular value.

    The weight is viewed as a matrix of shape (out-channels, rest), with the
    out-channel axis given by ``out_axis``. ``u`` is the persisted left
    singular-vector estimate; the refreshed estimate is returned alongside the
    normalized weight. The singular vectors are treated as constants, so the
    gradient flows through sigma = u^T W v only. An all-zero weight is returned
    unchanged.
    """
    w = weight
    if out_axis != 0:
        axes = list(range(weight.ndim))
        axes[0], axes[out_axis] = axes[out_axis], axes[0]
        w = weight.transpose(tuple(axes))
    mat = w.reshape(w.shape[0], -1)
    with no_grad():
        u_new, v = power_iteration(mat.data, u, n_iter) if n_iter > 0 else (u, None)
        if v is None:
            v = mat.data.T @ u_new
            v = v / max(np.linalg.norm(v), 1e-12)
    if not np.any(mat.data):
        return weight, u_new
    sigma = tsum(matmul(mat, v.reshape(-1, 1)) * u_new.reshape(-1, 1))
    return weight / sigma, u_new


class _WeightLayer(Module):
    """Shared weight handling for (optionally spectrally normalized) conv layers."""

    out_axis = 0

    def _init_sn(self, spectral_norm: bool, rng: np.random.Generator, power_iterations: int) -> None:
        self.spectral_norm = spectral_norm
        self.power_iterations = power_iterations
        if spectral_norm:
            n_out = self.weight.shape[self.out_axis]
            u = rng.normal(size=n_out)
            self.register_buffer("sn_u", u / np.linalg.norm(u))

    def effective_weight(self) -> Tensor:
        if not self.spectral_norm:
            return self.weight
        n_iter = 0 if (_STATE_FROZEN or not self.training) else self.power_iterations
        w, u = spectral_normalize(self.weight, self.sn_u.astype(self.weight.dtype), n_iter, self.out_axis)
        if n_iter:
            object.__setattr__(self, "sn_u", u)
        return w


class Conv2d(_WeightLayer):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        spectral_norm: bool = False,
        rng: np.random.Generator | None = None,
        power_iterations: int = 1,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self._init_sn(spectral_norm, rng, power_iterations)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class ConvTranspose2d(_WeightLayer):
    out_axis = 1

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int = 4,
        stride: int = 2,
        padding: int = 1,
        bias: bool = True,
        spectral_norm: bool = False,
        rng: np.random.Generator | None = None,
        power_iterations: int = 1,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel // (stride * stride)
        self.weight = Parameter(kaiming_uniform((in_ch, out_ch, kernel, kernel), fan_in, rng))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self._init_sn(spectral_norm, rng, power_iterations)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=not _STATE_FROZEN,
        )


class InstanceNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.instance_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p: float = 0.2, seed: int = 0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.training, self.rng)


class SelfAttention(Module):
    """Non-local attention block with a learnable residual gate initialized to 0.

    ``out = x + gamma * v(x) A^T`` where ``A = softmax(q(x)^T k(x))`` row-wise,
    so each query position's attention weights sum to one and the block is
    exactly the identity while ``gamma == 0``.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None, spectral_norm: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        inner = max(channels // 8, 1)
        self.query = Conv2d(channels, inner, 1, bias=False, spectral_norm=spectral_norm, rng=rng)
        self.key = Conv2d(channels, inner, 1, bias=False, spectral_norm=spectral_norm, rng=rng)
        self.value = Conv2d(channels, channels, 1, bias=False, spectral_norm=spectral_norm, rng=rng)
        self.gamma = Parameter(np.zeros(1))
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q = self.query(x).reshape(n, -1, h * w)
        k = self.key(x).reshape(n, -1, h * w)
        v = self.value(x).reshape(n, c, h * w)
        attn = F.softmax(matmul(q.transpose(0, 2, 1), k), axis=-1)  # (N, query, key)
        self.last_attention = attn.data
        out = matmul(v, attn.transpose(0, 2, 1)).reshape(n, c, h, w)
        return x + self.gamma * out


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    return np.random.default_rng(rng.integers(0, 2**63 - 1))
