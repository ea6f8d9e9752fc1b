"""Neural-network building blocks on top of the autodiff core.

Modules hold :class:`Parameter` leaves and child modules as plain attributes;
`parameters()` / `state_dict()` walk the attribute tree in insertion order,
which makes state serialization deterministic for a fixed architecture.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .autodiff import Tensor, concat, conv3d, softmax, upsample_nearest


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for name, value in vars(self).items():
            self._collect(f"{prefix}{name}", value, out)
        return out

    @staticmethod
    def _collect(key: str, value, out: list) -> None:
        if isinstance(value, Parameter):
            out.append((key, value))
        elif isinstance(value, Module):
            out.extend(value.named_parameters(f"{key}."))
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                Module._collect(f"{key}.{i}", item, out)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.data = value.copy()

    def param_checksum(self) -> str:
        """Digest of all parameter bytes in name order, for frozen-state checks."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Parameter(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv3d(Module):
    """3D convolution over (N, C, H, W, D) with per-axis stride and padding."""

    def __init__(self, in_channels: int, out_channels: int,
                 kernel_size: tuple[int, int, int],
                 rng: np.random.Generator,
                 stride: tuple[int, int, int] = (1, 1, 1),
                 padding: tuple[int, int, int] | None = None):
        kh, kw, kd = kernel_size
        if padding is None:
            padding = (kh // 2, kw // 2, kd // 2)
        fan_in = in_channels * kh * kw * kd
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kh, kw, kd), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    """2D convolution over (N, C, H, W), implemented on the 3D kernels with a unit depth axis."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        if padding is None:
            padding = kernel_size // 2
        self.conv = Conv3d(in_channels, out_channels, (kernel_size, kernel_size, 1),
                           rng, stride=(stride, stride, 1), padding=(padding, padding, 0))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        y = self.conv(x.reshape(n, c, h, w, 1))
        ny, cy, hy, wy, _ = y.shape
        return y.reshape(ny, cy, hy, wy)


class GroupNorm(Module):
    def __init__(self, num_groups: int, num_channels: int, eps: float = 1e-6):
        if num_channels % num_groups != 0:
            raise ValueError(f"{num_channels} channels not divisible into {num_groups} groups")
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Parameter(np.ones(num_channels))
        self.beta = Parameter(np.zeros(num_channels))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        spatial = x.shape[2:]
        g = self.num_groups
        xg = x.reshape(n, g, c // g, *spatial)
        axes = tuple(range(2, xg.ndim))
        mu = xg.mean(axis=axes, keepdims=True)
        centered = xg - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        norm = centered / (var + self.eps).sqrt()
        out = norm.reshape(n, c, *spatial)
        shape = (1, c) + (1,) * len(spatial)
        return out * self.gamma.reshape(shape) + self.beta.reshape(shape)


class ChannelNorm(Module):
    """Per-position normalization over the channel axis of (N, C, ...).

    Unlike GroupNorm it never pools across spatial positions, so layers built
    on it preserve exact spatial/depth locality.
    """

    def __init__(self, num_channels: int, eps: float = 1e-6):
        self.eps = eps
        self.gamma = Parameter(np.ones(num_channels))
        self.beta = Parameter(np.zeros(num_channels))

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        norm = centered / (var + self.eps).sqrt()
        shape = (1, c) + (1,) * (x.ndim - 2)
        return norm * self.gamma.reshape(shape) + self.beta.reshape(shape)


def norm_groups(channels: int) -> int:
    """Largest of (8, 4, 2, 1) that divides the channel count."""
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class Adam:
    """Adam with optional global-norm gradient clipping."""

    def __init__(self, params: list[Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
                grads = [g * scale for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.asarray(a, dtype=np.float64).copy() for a in state["m"]]
        self.v = [np.asarray(a, dtype=np.float64).copy() for a in state["v"]]


__all__ = [
    "Adam",
    "ChannelNorm",
    "Conv2d",
    "Conv3d",
    "GroupNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "concat",
    "conv3d",
    "kaiming_uniform",
    "norm_groups",
    "softmax",
    "upsample_nearest",
]
