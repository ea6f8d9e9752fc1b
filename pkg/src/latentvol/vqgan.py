"""3D vector-quantized adversarial autoencoder (stage 1).

The encoder downsamples each axis by its configured power-of-two compression
factor; the bottleneck is quantized against the EMA codebook through a
straight-through estimator; the decoder mirrors the encoder and ends in tanh
so reconstructions live in [-1, 1]. Two patch discriminators sharpen the
output: a 2D one rating a random depth slice and a 3D one rating the whole
volume, both with feature-matching terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, no_grad, straight_through
from .nn import (
    Adam,
    Conv2d,
    Conv3d,
    GroupNorm,
    Module,
    norm_groups,
    upsample_nearest,
)
from .vq import Codebook, LatentGrid, ema_update, quantize_array
from .volume import Volume


def _stage_strides(compression: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Factor per-axis compression into per-stage stride triples of 1s and 2s."""
    comp = list(compression)
    for s in comp:
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError(f"compression factors must be powers of two >= 1, got {compression}")
    stages = []
    while any(c > 1 for c in comp):
        stride = tuple(2 if c > 1 else 1 for c in comp)
        comp = [c // 2 if c > 1 else 1 for c in comp]
        stages.append(stride)
    return stages


class ResBlock3d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = Conv3d(in_ch, out_ch, (3, 3, 3), rng)
        self.norm2 = GroupNorm(norm_groups(out_ch), out_ch)
        self.conv2 = Conv3d(out_ch, out_ch, (3, 3, 3), rng)
        self.skip = (Conv3d(in_ch, out_ch, (1, 1, 1), rng, padding=(0, 0, 0))
                     if in_ch != out_ch else None)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(self.norm1(x).silu())
        h = self.conv2(self.norm2(h).silu())
        return h + (self.skip(x) if self.skip is not None else x)


class Encoder(Module):
    """Strided downsampling first, residual refinement at the reduced
    resolution: full-resolution activations only pass through the stem."""

    def __init__(self, latent_channels: int, base: int, mults: tuple[int, ...],
                 strides: list[tuple[int, int, int]], rng: np.random.Generator):
        self.stem = Conv3d(1, base, (3, 3, 3), rng)
        self.downs = []
        self.blocks = []
        ch = base
        for stride, mult in zip(strides, mults):
            width = base * mult
            kernel = tuple(4 if s == 2 else 3 for s in stride)
            pad = tuple((k - s) // 2 for k, s in zip(kernel, stride))
            self.downs.append(Conv3d(ch, width, kernel, rng, stride=stride, padding=pad))
            self.blocks.append(ResBlock3d(width, width, rng))
            ch = width
        self.out_norm = GroupNorm(norm_groups(ch), ch)
        self.out_conv = Conv3d(ch, latent_channels, (3, 3, 3), rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for down, block in zip(self.downs, self.blocks):
            h = block(down(h))
        return self.out_conv(self.out_norm(h).silu())


class Decoder(Module):
    def __init__(self, latent_channels: int, base: int, mults: tuple[int, ...],
                 strides: list[tuple[int, int, int]], rng: np.random.Generator):
        widths = [base * m for m in mults]
        ch = widths[-1] if widths else base
        self.stem = Conv3d(latent_channels, ch, (3, 3, 3), rng)
        self.blocks = []
        self.ups = []
        self.up_factors = []
        for i in reversed(range(len(strides))):
            target = widths[i - 1] if i > 0 else base
            self.blocks.append(ResBlock3d(ch, ch, rng))
            self.up_factors.append(strides[i])
            self.ups.append(Conv3d(ch, target, (3, 3, 3), rng))
            ch = target
        self.out_norm = GroupNorm(norm_groups(ch), ch)
        self.out_conv = Conv3d(ch, 1, (3, 3, 3), rng)

    def forward(self, z: Tensor) -> Tensor:
        h = self.stem(z)
        for block, factors, up in zip(self.blocks, self.up_factors, self.ups):
            h = up(upsample_nearest(block(h), factors))
        return self.out_conv(self.out_norm(h).silu()).tanh()


class VqGanModel(Module):
    """Encoder + decoder + codebook. The codebook is EMA-trained, so it is
    deliberately not a gradient parameter; checkpoints carry it separately."""

    def __init__(self, compression: tuple[int, int, int] = (2, 2, 2),
                 latent_channels: int = 8, base: int = 16,
                 mults: tuple[int, ...] | None = None,
                 codebook_size: int = 512, seed: int = 0,
                 codebook_decay: float = 0.99):
        strides = _stage_strides(tuple(compression))
        if mults is None:
            mults = tuple(2 ** i for i in range(len(strides)))
        if len(mults) != len(strides):
            raise ValueError(f"need {len(strides)} channel multipliers, got {len(mults)}")
        rng = np.random.default_rng(seed)
        self.compression = tuple(compression)
        self.latent_channels = latent_channels
        self.base = base
        self.mults = tuple(mults)
        self.codebook_size = codebook_size
        self.encoder = Encoder(latent_channels, base, mults, strides, rng)
        self.decoder = Decoder(latent_channels, base, mults, strides, rng)
        self.codebook = Codebook.initialize(codebook_size, latent_channels,
                                            seed=seed + 1, decay=codebook_decay)

    def encode_t(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode_t(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def config(self) -> dict:
        return {
            "compression": list(self.compression),
            "latent_channels": self.latent_channels,
            "base": self.base,
            "mults": list(self.mults),
            "codebook_size": self.codebook_size,
        }


def encode(model: VqGanModel, v: Volume) -> LatentGrid:
    """Volume -> unquantized latent grid of shape (H/s, W/s, D/s, k)."""
    for n, s in zip(v.shape, model.compression):
        if n % s != 0:
            raise ValueError(f"shape {v.shape} not divisible by compression {model.compression}")
    with no_grad():
        z = model.encode_t(Tensor(v.data.astype(np.float64)[None, None]))
    return LatentGrid(data=np.transpose(z.data[0], (1, 2, 3, 0)),
                      quantized=False, compression=model.compression)


def decode(model: VqGanModel, q: LatentGrid) -> Volume:
    """Quantized latent grid -> reconstructed volume in [-1, 1]."""
    if not q.quantized:
        raise ValueError("decode expects a quantized latent grid")
    if q.channels != model.latent_channels:
        raise ValueError(f"latent has {q.channels} channels, model expects {model.latent_channels}")
    with no_grad():
        x = model.decode_t(Tensor(np.transpose(q.data, (3, 0, 1, 2))[None]))
    return Volume(data=x.data[0, 0].astype(np.float32), value_range=(-1.0, 1.0))


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------


class SliceDiscriminator(Module):
    """2D patch discriminator over single depth slices; returns a logits map
    plus the intermediate feature maps for feature matching."""

    def __init__(self, base: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(1, base, 4, rng, stride=2, padding=1)
        self.conv2 = Conv2d(base, base * 2, 4, rng, stride=2, padding=1)
        self.out = Conv2d(base * 2, 1, 3, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        f1 = self.conv1(x).leaky_relu(0.2)
        f2 = self.conv2(f1).leaky_relu(0.2)
        return self.out(f2), [f1, f2]


class VolumeDiscriminator(Module):
    """3D patch discriminator over whole volumes."""

    def __init__(self, base: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv3d(1, base, (4, 4, 4), rng, stride=(2, 2, 2), padding=(1, 1, 1))
        self.conv2 = Conv3d(base, base * 2, (4, 4, 4), rng, stride=(2, 2, 2), padding=(1, 1, 1))
        self.out = Conv3d(base * 2, 1, (3, 3, 3), rng)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        f1 = self.conv1(x).leaky_relu(0.2)
        f2 = self.conv2(f1).leaky_relu(0.2)
        return self.out(f2), [f1, f2]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def recon_loss(x, x_hat, feature_extractor=None) -> Tensor:
    """Reconstruction distance between volumes (N, 1, H, W, D).

    With a feature extractor configured, the distance is the mean L1 gap
    between extractor features of corresponding depth slices; without one it
    falls back to plain voxel L1.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if feature_extractor is None:
        return (x - x_hat).abs().mean()
    depth = x.shape[4]
    terms = []
    for z in range(depth):
        fx = feature_extractor(x[:, :, :, :, z])
        fy = feature_extractor(x_hat[:, :, :, :, z])
        terms.append(feature_matching_loss(fx, fy))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / depth)


def feature_matching_loss(real_feats: list[Tensor], fake_feats: list[Tensor]) -> Tensor:
    """Mean over layers of the mean absolute feature-map difference."""
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"layer count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    terms = []
    for r, f in zip(real_feats, fake_feats):
        r = r if isinstance(r, Tensor) else Tensor(r)
        f = f if isinstance(f, Tensor) else Tensor(f)
        if r.shape != f.shape:
            raise ValueError(f"feature shape mismatch: {r.shape} vs {f.shape}")
        terms.append((r - f).abs().mean())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def hinge_losses(d_real_logits, d_fake_logits):
    """Patch hinge GAN losses.

    disc = mean(relu(1 - d_real)) + mean(relu(1 + d_fake)); gen = -mean(d_fake).
    ndarray inputs give float outputs; Tensor inputs keep the graph.
    """
    plain = not isinstance(d_real_logits, Tensor) and not isinstance(d_fake_logits, Tensor)
    d_real = d_real_logits if isinstance(d_real_logits, Tensor) else Tensor(d_real_logits)
    d_fake = d_fake_logits if isinstance(d_fake_logits, Tensor) else Tensor(d_fake_logits)
    disc = (1.0 - d_real).relu().mean() + (1.0 + d_fake).relu().mean()
    gen = -d_fake.mean()
    if plain:
        return disc.item(), gen.item()
    return disc, gen


def random_slice(v, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Uniformly chosen depth slice of a volume; returns (slice, index)."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    depth = data.shape[-1]
    k = int(rng.integers(depth))
    return data[..., k], k


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 2.0) -> float:
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(data_range ** 2 / mse)


class RandomConvFeatures:
    """Frozen random 2D conv stack: a desk-scale stand-in for a pretrained
    perceptual feature extractor. Weights are fixed at construction and never
    receive gradients."""

    def __init__(self, base: int = 8, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(1, base, 3, rng)
        self.conv2 = Conv2d(base, base * 2, 3, rng, stride=2, padding=1)
        for p in self.conv1.parameters() + self.conv2.parameters():
            p.requires_grad = False

    def __call__(self, x: Tensor) -> list[Tensor]:
        f1 = self.conv1(x).leaky_relu(0.2)
        f2 = self.conv2(f1).leaky_relu(0.2)
        return [f1, f2]


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VqGanLossWeights:
    recon: float = 1.0
    commit: float = 0.25
    adv_slice: float = 1.0
    adv_volume: float = 1.0
    fm_slice: float = 1.0
    fm_volume: float = 1.0


@dataclass(frozen=True)
class VqGanLossReport:
    recon: float
    commit: float
    gen_slice: float
    gen_volume: float
    disc_slice: float
    disc_volume: float
    fm_slice: float
    fm_volume: float

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss term {name}={value}")

    def total_generator(self, w: VqGanLossWeights, adv_weight: float) -> float:
        return (w.recon * self.recon + w.commit * self.commit
                + adv_weight * (w.adv_slice * self.gen_slice + w.adv_volume * self.gen_volume)
                + w.fm_slice * self.fm_slice + w.fm_volume * self.fm_volume)


@dataclass
class VqGanTrainState:
    model: VqGanModel
    slice_disc: SliceDiscriminator
    volume_disc: VolumeDiscriminator
    g_opt: Adam
    d_opt: Adam
    slice_rng: np.random.Generator
    step: int = 0
    feature_extractor: object = None
    weights: VqGanLossWeights = field(default_factory=VqGanLossWeights)

    @classmethod
    def create(cls, model: VqGanModel, lr: float, seed: int,
               disc_base: int = 16, weights: VqGanLossWeights | None = None,
               feature_extractor=None) -> "VqGanTrainState":
        from .rng import rng_stream
        slice_disc = SliceDiscriminator(base=disc_base, seed=seed + 101)
        volume_disc = VolumeDiscriminator(base=disc_base, seed=seed + 102)
        return cls(
            model=model, slice_disc=slice_disc, volume_disc=volume_disc,
            g_opt=Adam(model.parameters(), lr=lr, betas=(0.5, 0.9)),
            d_opt=Adam(slice_disc.parameters() + volume_disc.parameters(),
                       lr=lr, betas=(0.5, 0.9)),
            slice_rng=rng_stream(seed, "vqgan.slices"),
            weights=weights or VqGanLossWeights(),
            feature_extractor=feature_extractor,
        )


def train_step_vqgan(state: VqGanTrainState, batch: np.ndarray,
                     adv_weight: float = 1.0) -> VqGanLossReport:
    """One generator + codebook update, then one discriminator update.

    `batch` is (N, 1, H, W, D) in [-1, 1]. With `adv_weight` == 0 the
    adversarial and feature-matching branches are skipped entirely, making the
    step exactly an autoencoder + commitment update (and consuming no slice
    rng), which is how the configured warm-up phase behaves.
    """
    w = state.weights
    x_np = np.asarray(batch, dtype=np.float64)
    if x_np.ndim != 5 or x_np.shape[1] != 1:
        raise ValueError(f"batch must be (N, 1, H, W, D), got {x_np.shape}")
    model = state.model

    # generator pass
    x = Tensor(x_np)
    z = model.encode_t(x)
    sites = np.transpose(z.data, (0, 2, 3, 4, 1))
    idx, q_sites, _ = quantize_array(sites, model.codebook)
    zq = np.transpose(q_sites, (0, 4, 1, 2, 3))
    commit_t = ((z - Tensor(zq)) ** 2).mean()
    x_hat = model.decode_t(straight_through(z, zq))
    rec_t = recon_loss(x, x_hat, state.feature_extractor)
    total = w.recon * rec_t + w.commit * commit_t

    gen_s = gen_v = fm_s = fm_v = disc_s = disc_v = 0.0
    slice_ks = None
    if adv_weight > 0:
        depth = x_np.shape[4]
        slice_ks = [int(state.slice_rng.integers(depth)) for _ in range(x_np.shape[0])]
        real_slices_np = np.stack([x_np[i, :, :, :, k] for i, k in enumerate(slice_ks)])
        fake_slices = concat([x_hat[i:i + 1, :, :, :, k] for i, k in enumerate(slice_ks)], axis=0)

        logits_fake_s, feats_fake_s = state.slice_disc(fake_slices)
        _, feats_real_s = state.slice_disc(Tensor(real_slices_np))
        logits_fake_v, feats_fake_v = state.volume_disc(x_hat)
        _, feats_real_v = state.volume_disc(x)

        gen_s_t = -logits_fake_s.mean()
        gen_v_t = -logits_fake_v.mean()
        fm_s_t = feature_matching_loss([Tensor(f.data) for f in feats_real_s], feats_fake_s)
        fm_v_t = feature_matching_loss([Tensor(f.data) for f in feats_real_v], feats_fake_v)
        total = (total
                 + adv_weight * (w.adv_slice * gen_s_t + w.adv_volume * gen_v_t)
                 + w.fm_slice * fm_s_t + w.fm_volume * fm_v_t)
        gen_s, gen_v = gen_s_t.item(), gen_v_t.item()
        fm_s, fm_v = fm_s_t.item(), fm_v_t.item()

    if not np.isfinite(total.data):
        raise FloatingPointError(f"non-finite generator loss at step {state.step}")
    state.g_opt.zero_grad()
    total.backward()
    state.g_opt.step()

    # EMA codebook update from the (pre-update) encoder outputs
    model.codebook = ema_update(model.codebook, sites.reshape(-1, model.latent_channels),
                                idx.reshape(-1))

    # discriminator pass on detached reconstructions
    if adv_weight > 0:
        fake_np = x_hat.data
        fake_slices_np = np.stack([fake_np[i, :, :, :, k] for i, k in enumerate(slice_ks)])
        real_slices_np = np.stack([x_np[i, :, :, :, k] for i, k in enumerate(slice_ks)])

        d_real_s, _ = state.slice_disc(Tensor(real_slices_np))
        d_fake_s, _ = state.slice_disc(Tensor(fake_slices_np))
        d_real_v, _ = state.volume_disc(Tensor(x_np))
        d_fake_v, _ = state.volume_disc(Tensor(fake_np))
        disc_s_t, _ = hinge_losses(d_real_s, d_fake_s)
        disc_v_t, _ = hinge_losses(d_real_v, d_fake_v)
        d_total = disc_s_t + disc_v_t
        if not np.isfinite(d_total.data):
            raise FloatingPointError(f"non-finite discriminator loss at step {state.step}")
        state.d_opt.zero_grad()
        d_total.backward()
        state.d_opt.step()
        disc_s, disc_v = disc_s_t.item(), disc_v_t.item()

    state.step += 1
    return VqGanLossReport(
        recon=rec_t.item(), commit=commit_t.item(),
        gen_slice=gen_s, gen_volume=gen_v,
        disc_slice=disc_s, disc_volume=disc_v,
        fm_slice=fm_s, fm_volume=fm_v,
    )
