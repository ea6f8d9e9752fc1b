"""Vector quantization: codebook, nearest-code assignment, EMA updates,
commitment loss, and the codebook-extrema latent normalization that maps
encoder outputs into the [-1, 1] range the diffusion stage expects.

The codebook is trained without a gradient term: code vectors track the
exponential moving average of the latent vectors assigned to them, with
Laplace smoothing so rarely-used codes never divide by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .autodiff import straight_through  # noqa: F401  (re-exported: gradient contract lives with the tape)


@dataclass
class Codebook:
    vectors: np.ndarray           # (K, d)
    ema_cluster_size: np.ndarray  # (K,)
    ema_embed_sum: np.ndarray     # (K, d)
    decay: float = 0.99
    eps: float = 1e-5

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.ema_cluster_size = np.asarray(self.ema_cluster_size, dtype=np.float64)
        self.ema_embed_sum = np.asarray(self.ema_embed_sum, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise ValueError(f"codebook must be (K, d) with K, d >= 1, got {self.vectors.shape}")
        if not (0.0 <= self.decay <= 1.0):
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")
        if self.eps <= 0:
            raise ValueError("smoothing eps must be positive")
        if not np.isfinite(self.vectors).all():
            raise ValueError("codebook vectors must be finite")
        if (self.ema_cluster_size < 0).any():
            raise ValueError("ema_cluster_size must be nonnegative")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def initialize(cls, size: int, dim: int, seed: int,
                   decay: float = 0.99, eps: float = 1e-5) -> "Codebook":
        """Uniform init in [-1/K, 1/K]; EMA accumulators start self-consistent
        (unit cluster size, sums equal to the vectors)."""
        rng = np.random.default_rng(seed)
        vectors = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim))
        return cls(vectors=vectors,
                   ema_cluster_size=np.ones(size),
                   ema_embed_sum=vectors.copy(),
                   decay=decay, eps=eps)


@dataclass
class LatentGrid:
    data: np.ndarray                       # (h, w, d, k)
    quantized: bool = False
    compression: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"latent grid must be 4D (h, w, d, k), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("latent grid contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def nearest_code(vec: np.ndarray, cb: Codebook) -> int:
    """Index of the closest codebook row by squared Euclidean distance.

    Ties break to the smallest index.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != cb.dim:
        raise ValueError(f"expected a length-{cb.dim} vector, got shape {vec.shape}")
    if not np.isfinite(vec).all():
        raise ValueError("input vector must be finite")
    return int(kernels.nearest_codes(vec[None, :], cb.vectors)[0])


def quantize_array(z: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray, float]:
    """Quantize an (..., d) array of latent vectors.

    Returns (indices of shape (...), quantized array, commitment loss). The
    commitment loss is the mean squared error between the unquantized vectors
    and their assigned codes, over all sites and channels.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cb.dim:
        raise ValueError(f"latent channel count {z.shape[-1]} != codebook dim {cb.dim}")
    flat = np.ascontiguousarray(z.reshape(-1, cb.dim))
    idx = kernels.nearest_codes(flat, cb.vectors)
    quantized = cb.vectors[idx].reshape(z.shape)
    commit = float(np.mean((z - quantized) ** 2))
    return idx.reshape(z.shape[:-1]), quantized, commit


def quantize(latents: LatentGrid, cb: Codebook) -> tuple[np.ndarray, LatentGrid, float]:
    """Replace each site's vector with its nearest code. See `quantize_array`."""
    if latents.quantized:
        raise ValueError("latent grid is already quantized")
    idx, q, commit = quantize_array(latents.data, cb)
    return idx, replace(latents, data=q, quantized=True), commit


def ema_update(cb: Codebook, latents: np.ndarray, assignments: np.ndarray) -> Codebook:
    """One exponential-moving-average codebook update.

    For each code i with n_i assigned vectors summing to s_i:
        N_i <- decay * N_i + (1 - decay) * n_i
        m_i <- decay * m_i + (1 - decay) * s_i
    and the vectors become m_i / N~_i with Laplace-smoothed counts
        N~_i = (N_i + eps) / (sum(N) + K * eps) * sum(N).
    """
    z = np.asarray(latents, dtype=np.float64).reshape(-1, cb.dim)
    idx = np.asarray(assignments).reshape(-1)
    if idx.shape[0] != z.shape[0]:
        raise ValueError("assignments and latents disagree on the number of sites")
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise ValueError("assignment index out of range")

    counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
    sums = np.empty_like(cb.ema_embed_sum)
    for j in range(cb.dim):
        sums[:, j] = np.bincount(idx, weights=z[:, j], minlength=cb.size)

    g = cb.decay
    new_n = g * cb.ema_cluster_size + (1.0 - g) * counts
    new_m = g * cb.ema_embed_sum + (1.0 - g) * sums
    total = new_n.sum()
    smoothed = (new_n + cb.eps) / (total + cb.size * cb.eps) * total
    vectors = new_m / smoothed[:, None]
    return Codebook(vectors=vectors, ema_cluster_size=new_n, ema_embed_sum=new_m,
                    decay=cb.decay, eps=cb.eps)


def codebook_extrema(cb: Codebook) -> tuple[float, float]:
    """Scalar min and max over all K x d codebook entries."""
    cmin = float(cb.vectors.min())
    cmax = float(cb.vectors.max())
    if cmin == cmax:
        raise ValueError("degenerate codebook: all entries equal")
    return cmin, cmax


def latent_normalize(z: np.ndarray, cmin: float, cmax: float) -> np.ndarray:
    """Map [cmin, cmax] onto [-1, +1]: z_norm = 2 (z - cmin) / (cmax - cmin) - 1.

    Unquantized values outside the codebook extrema pass through and land
    slightly outside [-1, 1]; that overflow is expected and measured, not an
    error.
    """
    if cmax <= cmin:
        raise ValueError(f"need cmax > cmin, got ({cmin}, {cmax})")
    return 2.0 * (np.asarray(z, dtype=np.float64) - cmin) / (cmax - cmin) - 1.0


def latent_denormalize(z_norm: np.ndarray, cmin: float, cmax: float) -> np.ndarray:
    """Exact affine inverse of `latent_normalize`."""
    if cmax <= cmin:
        raise ValueError(f"need cmax > cmin, got ({cmin}, {cmax})")
    return (np.asarray(z_norm, dtype=np.float64) + 1.0) * 0.5 * (cmax - cmin) + cmin


def overflow_fraction(z_norm: np.ndarray) -> float:
    """Fraction of normalized latent values outside [-1, 1]; a training diagnostic."""
    z_norm = np.asarray(z_norm)
    return float(np.mean((z_norm < -1.0) | (z_norm > 1.0)))
