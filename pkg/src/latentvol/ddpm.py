"""Latent denoising diffusion: noise-schedule algebra, forward perturbation,
noise-prediction training loss, ancestral reverse sampling, and the
factorized 3D U-Net denoiser.

The denoiser economizes on 3D compute by keeping all convolutions in-plane
(3x3x1 kernels, 2x2x1 downsampling) and covering the depth axis with
attention: each resolution level that carries attention applies a spatial
attention block (depth treated as batch) followed by a depth attention block
(the in-plane axes treated as batch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, no_grad, softmax
from .nn import (
    Adam,  # noqa: F401  (re-export convenience for trainers)
    ChannelNorm,
    Conv3d,
    GroupNorm,
    Linear,
    Module,
    norm_groups,
    upsample_nearest,
)
from .vq import LatentGrid

# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        t = self.timesteps
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            arr = getattr(self, name)
            if arr.shape != (t,):
                raise ValueError(f"{name} must have shape ({t},), got {arr.shape}")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(timesteps: int = 300, beta_start: float = 1e-4,
                  beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule with the derived per-step quantities.

    posterior_var[t-1] is the fixed reverse-step variance
    beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t), zero at t=1.
    """
    if timesteps < 1:
        raise ValueError("need at least one timestep")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, posterior_var=posterior_var)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward perturbation x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    `t` is a 1-based step index: either a scalar or one index per leading
    batch entry of x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.timesteps):
        raise ValueError(f"t must lie in [1, {sched.timesteps}]")
    ab = sched.alpha_bar[t_arr - 1]
    if t_arr.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: interleaved sin/cos over geometric frequencies.

    Scalar t gives a (dim,) vector; a (N,) array gives (N, dim).
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t_arr[:, None] * freqs[None, :]
    emb = np.empty((t_arr.shape[0], dim))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb[0] if np.ndim(t) == 0 else emb


# ---------------------------------------------------------------------------
# attention and factorized convolution blocks
# ---------------------------------------------------------------------------


class _Attention(Module):
    """Single- or multi-head self-attention over one axis of a (N,C,H,W,D) grid.

    Pre-normalization is per-position over channels only, so the block mixes
    information exclusively along the attended axis.
    """

    def __init__(self, channels: int, rng: np.random.Generator, heads: int = 1):
        if channels % heads != 0:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = ChannelNorm(channels)
        self.qkv = Conv3d(channels, 3 * channels, (1, 1, 1), rng, padding=(0, 0, 0))
        self.proj = Conv3d(channels, channels, (1, 1, 1), rng, padding=(0, 0, 0))

    def _attend(self, tokens: Tensor) -> Tensor:
        """tokens: (..., T, 3C) -> (..., T, C) scaled dot-product attention."""
        c3 = tokens.shape[-1]
        c = c3 // 3
        heads = self.heads
        hc = c // heads
        lead = tokens.shape[:-2]
        t_len = tokens.shape[-2]

        q = tokens[..., :c]
        k = tokens[..., c:2 * c]
        v = tokens[..., 2 * c:]
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        split = lead + (t_len, heads, hc)
        q = q.reshape(*split).transpose(perm)
        k = k.reshape(*split).transpose(perm)
        v = v.reshape(*split).transpose(perm)
        attn = softmax((q @ k.transpose(tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)))
                       * (1.0 / math.sqrt(hc)), axis=-1)
        out = attn @ v
        inv = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return out.transpose(inv).reshape(*lead, t_len, c)


class SpatialAttention(_Attention):
    """Self-attention over the HxW positions, depth treated as batch."""

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w, d = x.shape
        qkv = self.qkv(self.norm(x))
        # (N, 3C, H, W, D) -> (N, D, H*W, 3C)
        tok = qkv.reshape(n, 3 * c, h * w, d).transpose((0, 3, 2, 1))
        out = self._attend(tok)
        out = out.transpose((0, 3, 2, 1)).reshape(n, c, h, w, d)
        return x + self.proj(out)


class DepthAttention(_Attention):
    """Self-attention over the depth positions, in-plane axes treated as batch."""

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w, d = x.shape
        qkv = self.qkv(self.norm(x))
        # (N, 3C, H, W, D) -> (N, H*W, D, 3C)
        tok = qkv.reshape(n, 3 * c, h * w, d).transpose((0, 2, 3, 1))
        out = self._attend(tok)
        out = out.transpose((0, 3, 1, 2)).reshape(n, c, h, w, d)
        return x + self.proj(out)


class FactorizedConv(Conv3d):
    """In-plane 3D convolution: the kernel depth is 1, so the output at depth
    index z depends only on the input at depth index z."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = 3, stride: tuple[int, int, int] = (1, 1, 1)):
        # (kernel - stride) // 2 keeps output size at ceil(in / stride) for
        # the (3, stride 1) and (4, stride 2) cases used here
        pad = ((kernel - stride[0]) // 2, (kernel - stride[1]) // 2, 0)
        super().__init__(in_channels, out_channels, (kernel, kernel, 1), rng,
                         stride=stride, padding=pad)


def _grid_to_batch(x: np.ndarray) -> np.ndarray:
    # (h, w, d, c) -> (1, c, h, w, d)
    return np.ascontiguousarray(np.transpose(x, (3, 0, 1, 2)))[None]


def _batch_to_grid(x: np.ndarray) -> np.ndarray:
    return np.transpose(x[0], (1, 2, 3, 0))


def spatial_attention(block: SpatialAttention, x: np.ndarray) -> np.ndarray:
    """Apply a spatial attention block to a single (h, w, d, c) grid."""
    with no_grad():
        return _batch_to_grid(block(Tensor(_grid_to_batch(np.asarray(x)))).data)


def depth_attention(block: DepthAttention, x: np.ndarray) -> np.ndarray:
    """Apply a depth attention block to a single (h, w, d, c) grid."""
    with no_grad():
        return _batch_to_grid(block(Tensor(_grid_to_batch(np.asarray(x)))).data)


def factorized_conv(layer: FactorizedConv, x: np.ndarray) -> np.ndarray:
    """Apply an in-plane convolution layer to a single (h, w, d, c) grid."""
    with no_grad():
        return _batch_to_grid(layer(Tensor(_grid_to_batch(np.asarray(x)))).data)


# ---------------------------------------------------------------------------
# denoiser U-Net
# ---------------------------------------------------------------------------


class ResBlock(Module):
    """Factorized-conv residual block with additive timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = FactorizedConv(in_ch, out_ch, rng)
        self.time_proj = Linear(time_dim, out_ch, rng)
        self.norm2 = GroupNorm(norm_groups(out_ch), out_ch)
        self.conv2 = FactorizedConv(out_ch, out_ch, rng)
        self.skip = (Conv3d(in_ch, out_ch, (1, 1, 1), rng, padding=(0, 0, 0))
                     if in_ch != out_ch else None)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(self.norm1(x).silu())
        shift = self.time_proj(temb.silu())
        h = h + shift.reshape(shift.shape[0], shift.shape[1], 1, 1, 1)
        h = self.conv2(self.norm2(h).silu())
        return h + (self.skip(x) if self.skip is not None else x)


class DenoiserNet(Module):
    """Noise-prediction U-Net over (N, C, H, W, D) latents.

    Downsampling acts in-plane only (stride 2x2x1): the depth axis keeps full
    resolution throughout. Attention (one spatial + depth pair) sits at the
    configured levels, which default to the two lowest resolutions, plus the
    middle block. Output shape always equals input shape.
    """

    def __init__(self, channels: int, base: int = 32,
                 mults: tuple[int, ...] = (1, 2),
                 attn_levels: tuple[int, ...] | None = None,
                 heads: int = 1, seed: int = 0):
        rng = np.random.default_rng(seed)
        levels = len(mults)
        if attn_levels is None:
            attn_levels = tuple(range(max(0, levels - 2), levels))
        self.channels = channels
        self.base = base
        self.mults = tuple(mults)
        self.attn_levels = tuple(attn_levels)
        self.heads = heads
        self.time_dim = base * 4

        self.time_fc1 = Linear(base, self.time_dim, rng)
        self.time_fc2 = Linear(self.time_dim, self.time_dim, rng)
        self.stem = FactorizedConv(channels, base, rng)

        widths = [base * m for m in mults]
        self.down_blocks = []
        self.down_attn = []
        self.downsamplers = []
        ch = base
        for i, width in enumerate(widths):
            self.down_blocks.append(ResBlock(ch, width, self.time_dim, rng))
            self.down_attn.append(
                [SpatialAttention(width, rng, heads), DepthAttention(width, rng, heads)]
                if i in self.attn_levels else [])
            ch = width
            if i < levels - 1:
                self.downsamplers.append(FactorizedConv(ch, ch, rng, kernel=4, stride=(2, 2, 1)))

        self.mid_block1 = ResBlock(ch, ch, self.time_dim, rng)
        self.mid_attn_spatial = SpatialAttention(ch, rng, heads)
        self.mid_attn_depth = DepthAttention(ch, rng, heads)
        self.mid_block2 = ResBlock(ch, ch, self.time_dim, rng)

        self.up_convs = []
        self.up_blocks = []
        self.up_attn = []
        for i in reversed(range(levels)):
            width = widths[i]
            if i < levels - 1:
                self.up_convs.append(FactorizedConv(ch, width, rng))
            else:
                self.up_convs.append(None)
            self.up_blocks.append(ResBlock(width + widths[i], width, self.time_dim, rng))
            self.up_attn.append(
                [SpatialAttention(width, rng, heads), DepthAttention(width, rng, heads)]
                if i in self.attn_levels else [])
            ch = width

        self.out_norm = GroupNorm(norm_groups(ch), ch)
        self.out_conv = FactorizedConv(ch, channels, rng)

    def forward(self, x, t) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        temb = Tensor(timestep_embedding(t_arr, self.base))
        temb = self.time_fc2(self.time_fc1(temb).silu())

        h = self.stem(x)
        skips = []
        levels = len(self.mults)
        for i in range(levels):
            h = self.down_blocks[i](h, temb)
            for attn in self.down_attn[i]:
                h = attn(h)
            skips.append(h)
            if i < levels - 1:
                h = self.downsamplers[i](h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn_spatial(h)
        h = self.mid_attn_depth(h)
        h = self.mid_block2(h, temb)

        for j, i in enumerate(reversed(range(levels))):
            if self.up_convs[j] is not None:
                h = self.up_convs[j](upsample_nearest(h, (2, 2, 1)))
            h = concat([h, skips[i]], axis=1)
            h = self.up_blocks[j](h, temb)
            for attn in self.up_attn[j]:
                h = attn(h)

        return self.out_conv(self.out_norm(h).silu())

    def config(self) -> dict:
        return {
            "channels": self.channels,
            "base": self.base,
            "mults": list(self.mults),
            "attn_levels": list(self.attn_levels),
            "heads": self.heads,
        }


# ---------------------------------------------------------------------------
# training loss and sampling
# ---------------------------------------------------------------------------


def diffusion_loss(net, x0_batch: np.ndarray, sched: NoiseSchedule,
                   rng: np.random.Generator) -> Tensor:
    """Noise-prediction objective: per sample, draw t uniform on [1, T] and
    unit Gaussian eps, form x_t, and return mean squared error between eps
    and the network's prediction."""
    x0 = np.asarray(x0_batch, dtype=np.float64)
    n = x0.shape[0]
    t = rng.integers(1, sched.timesteps + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, sched)
    pred = net(Tensor(x_t), t)
    if not np.isfinite(pred.data).all():
        raise FloatingPointError("denoiser produced non-finite values")
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def p_sample_step(net, x_t: np.ndarray, t: int, sched: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """One reverse step: posterior mean from the predicted noise, plus fixed
    posterior noise for every step except the last (t == 1 is deterministic)."""
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"t must lie in [1, {sched.timesteps}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    with no_grad():
        eps_hat = net(Tensor(x_t), np.full(x_t.shape[0], t)).data
    beta_t = sched.beta[t - 1]
    alpha_t = sched.alpha[t - 1]
    ab_t = sched.alpha_bar[t - 1]
    mu = (x_t - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha_t)
    if not np.isfinite(mu).all():
        raise FloatingPointError(f"non-finite reverse-step mean at t={t}")
    if t > 1:
        z = rng.standard_normal(x_t.shape)
        return mu + math.sqrt(sched.posterior_var[t - 1]) * z
    return mu


def sample(net, shape: tuple[int, int, int, int], sched: NoiseSchedule,
           seed: int) -> LatentGrid:
    """Draw one latent: start from unit Gaussian noise and apply all T reverse
    steps. `shape` is channels-last (h, w, d, k); deterministic per seed."""
    h, w, d, k = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, k, h, w, d))
    for t in range(sched.timesteps, 0, -1):
        x = p_sample_step(net, x, t, sched, rng)
    return LatentGrid(data=np.transpose(x[0], (1, 2, 3, 0)), quantized=False)
