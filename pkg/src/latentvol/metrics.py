"""Quantitative evaluation: SSIM, multi-scale SSIM, pairwise sample
diversity, and Dice overlap.

SSIM statistics use a Gaussian window in valid mode. Volumes are scored
slice-wise in the high-resolution (H, W) plane and averaged over depth by
default; pass ``windows_3d=True`` in the parameters for full 3D windows.

The diversity score is the mean MS-SSIM over randomly sampled pairs of
distinct samples: a set of identical volumes scores exactly 1.0 (the mode
collapse signature), diverse sets score lower.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Canonical five-scale weighting, renormalized to sum exactly to one.
_RAW_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DEFAULT_WEIGHTS = tuple(w / sum(_RAW_WEIGHTS) for w in _RAW_WEIGHTS)


@dataclass(frozen=True)
class MsSsimParams:
    n_scales: int = 5
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    window: int = 7
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 2.0
    windows_3d: bool = False
    strict: bool = False

    def __post_init__(self):
        if len(self.weights) != self.n_scales:
            raise ValueError(f"{self.n_scales} scales need {self.n_scales} weights, "
                             f"got {len(self.weights)}")
        if any(w <= 0 for w in self.weights):
            raise ValueError("scale weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-6:
            raise ValueError(f"scale weights must sum to 1, got {sum(self.weights)}")
        if self.window % 2 != 1 or self.window < 3:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.data_range <= 0:
            raise ValueError("data_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()

def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-mode weighted local mean along every axis."""
    out = img
    for axis in range(img.ndim):
        out = sliding_window_view(out, win.size, axis=axis) @ win
    return out


def _ssim_cs(a: np.ndarray, b: np.ndarray, params: MsSsimParams) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure over all local windows."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < params.window:
        raise ValueError(
            f"window {params.window} larger than image side {min(a.shape)}")
    win = _gaussian_window(params.window, params.sigma)
    mu1 = _windowed_mean(a, win)
    mu2 = _windowed_mean(b, win)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    sigma1_sq = _windowed_mean(a * a, win) - mu1_sq
    sigma2_sq = _windowed_mean(b * b, win) - mu2_sq
    sigma12 = _windowed_mean(a * b, win) - mu12
    c1, c2 = params.c1, params.c2
    luminance = (2.0 * mu12 + c1) / (mu1_sq + mu2_sq + c1)
    cs = (2.0 * sigma12 + c2) / (sigma1_sq + sigma2_sq + c2)
    return float((luminance * cs).mean()), float(cs.mean())


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def _plane_iter(a: np.ndarray, b: np.ndarray, params: MsSsimParams):
    """Yield the 2D or 3D arrays a metric should run on, following the
    slice-wise-vs-3D-window policy."""
    if a.ndim == 2 or params.windows_3d:
        yield a, b
    elif a.ndim == 3:
        for k in range(a.shape[2]):
            yield a[:, :, k], b[:, :, k]
    else:
        raise ValueError(f"expected 2D or 3D arrays, got {a.ndim}D")


def ssim(a, b, params: MsSsimParams | None = None) -> float:
    """Structural similarity; 1.0 for identical inputs, symmetric in (a, b)."""
    params = params or MsSsimParams()
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    vals = [_ssim_cs(pa, pb, params)[0] for pa, pb in _plane_iter(a, b, params)]
    return float(np.mean(vals))


def _downsample2(x: np.ndarray) -> np.ndarray:
    """2x average pooling along every axis, edge-padding odd sizes."""
    pads = [(0, n % 2) for n in x.shape]
    if any(p != (0, 0) for p in pads):
        x = np.pad(x, pads, mode="edge")
    for axis in range(x.ndim):
        n = x.shape[axis]
        shape = x.shape[:axis] + (n // 2, 2) + x.shape[axis + 1:]
        x = x.reshape(shape).mean(axis=axis + 1)
    return x


def _feasible_scales(shape: tuple[int, ...], params: MsSsimParams) -> int:
    side = min(shape)
    scales = 1
    while scales < params.n_scales and side // 2 >= params.window:
        side //= 2
        scales += 1
    return scales


def _ms_ssim_plane(a: np.ndarray, b: np.ndarray, params: MsSsimParams) -> float:
    scales = _feasible_scales(a.shape, params)
    if scales < params.n_scales:
        if params.strict:
            raise ValueError(
                f"image {a.shape} supports only {scales} of {params.n_scales} scales "
                f"at window {params.window}")
        warnings.warn(
            f"image {a.shape} supports only {scales} of {params.n_scales} MS-SSIM "
            f"scales at window {params.window}; reducing", stacklevel=3)
    raw = params.weights[:scales]
    weights = [w / sum(raw) for w in raw]

    score = 1.0
    for level in range(scales):
        s, cs = _ssim_cs(a, b, params)
        if level < scales - 1:
            score *= max(cs, 0.0) ** weights[level]
            a = _downsample2(a)
            b = _downsample2(b)
        else:
            score *= max(s, 0.0) ** weights[level]
    return float(score)


def ms_ssim(a, b, params: MsSsimParams | None = None) -> float:
    """Multi-scale SSIM: contrast-structure terms across dyadic scales,
    luminance at the coarsest scale, combined as a weighted product."""
    params = params or MsSsimParams()
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    vals = [_ms_ssim_plane(pa, pb, params) for pa, pb in _plane_iter(a, b, params)]
    return float(np.mean(vals))


@dataclass(frozen=True)
class DiversityReport:
    mean: float
    n_pairs: int
    scores: tuple[float, ...]
    seed: int

    def __post_init__(self):
        if abs(self.mean - float(np.mean(self.scores))) > 1e-12:
            raise ValueError("mean does not match per-pair scores")


def diversity_score(volumes, n_pairs: int = 1000, seed: int = 0,
                    params: MsSsimParams | None = None) -> DiversityReport:
    """Mean MS-SSIM over `n_pairs` random pairs of distinct samples.

    Pairs are drawn with replacement across pairs but never pair a sample
    with itself. Higher means less diverse; 1.0 means every sampled pair is
    identical (mode collapse).
    """
    arrays = [_as_array(v) for v in volumes]
    if len(arrays) < 2:
        raise ValueError(f"need at least 2 volumes, got {len(arrays)}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(n_pairs):
        i = int(rng.integers(len(arrays)))
        j = int(rng.integers(len(arrays) - 1))
        if j >= i:
            j += 1
        scores.append(ms_ssim(arrays[i], arrays[j], params))
    return DiversityReport(mean=float(np.mean(scores)), n_pairs=n_pairs,
                           scores=tuple(scores), seed=seed)


def dice(a, b) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|) between binary masks; 1.0 when both empty."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    for name, arr in (("first", a), ("second", b)):
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError(f"{name} mask is not binary")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.sum(a * b) / total)
