"""Synthetic-pretraining transfer harness.

Pretext task: masked-volume inpainting on synthetic volumes only (the call
signature admits no label source). Finetuning then trains a 3D
encoder-decoder segmenter on nested patient-level fractions of the labeled
data, either from scratch or from the pretrained encoder; the two arms share
every other setting, including the data-order stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .metrics import dice
from .nn import Adam, Conv3d, GroupNorm, Module, norm_groups, upsample_nearest
from .rng import rng_stream
from .volume import DatasetManifest, Volume, load_manifest, load_volume


@dataclass(frozen=True)
class FractionPlan:
    fractions: tuple[float, ...] = (0.05, 0.10, 0.20, 0.40, 0.80, 1.00)
    seed: int = 0
    patient_level: bool = True

    def __post_init__(self):
        for f in self.fractions:
            if not (0.0 < f <= 1.0):
                raise ValueError(f"fractions must lie in (0, 1], got {f}")

    def select(self, patient_ids: list[str], fraction: float) -> list[str]:
        """Nested subset: a fixed seeded permutation, truncated per fraction,
        so smaller fractions are always contained in larger ones."""
        if fraction not in self.fractions:
            raise ValueError(f"fraction {fraction} not in plan {self.fractions}")
        ordered = np.array(sorted(set(patient_ids)))
        perm = np.random.default_rng(self.seed).permutation(len(ordered))
        k = max(1, round(fraction * len(ordered)))
        return list(ordered[perm[:k]])


@dataclass(frozen=True)
class TransferConfig:
    base: int = 8
    seed: int = 0
    pretrain_steps: int = 100
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 4
    mask_ratio: float = 0.5
    patch_size: tuple[int, int, int] = (4, 4, 4)
    holdout_frac: float = 0.2
    finetune_steps: int = 150
    finetune_lr: float = 1e-3
    finetune_batch: int = 4
    plan: FractionPlan = FractionPlan()


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class _ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 stride: tuple[int, int, int] = (1, 1, 1)):
        self.norm = GroupNorm(norm_groups(in_ch), in_ch)
        kernel = tuple(4 if s == 2 else 3 for s in stride)
        pad = tuple((k - s) // 2 for k, s in zip(kernel, stride))
        self.conv = Conv3d(in_ch, out_ch, kernel, rng, stride=stride, padding=pad)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(self.norm(x).silu())


class SegEncoder(Module):
    """Three-scale feature pyramid: full, half and quarter resolution."""

    def __init__(self, base: int, rng: np.random.Generator):
        self.stem = Conv3d(1, base, (3, 3, 3), rng)
        self.block0 = _ConvBlock(base, base, rng)
        self.down1 = _ConvBlock(base, base * 2, rng, stride=(2, 2, 2))
        self.block1 = _ConvBlock(base * 2, base * 2, rng)
        self.down2 = _ConvBlock(base * 2, base * 4, rng, stride=(2, 2, 2))
        self.block2 = _ConvBlock(base * 4, base * 4, rng)

    def forward(self, x: Tensor) -> list[Tensor]:
        f0 = self.block0(self.stem(x))
        f1 = self.block1(self.down1(f0))
        f2 = self.block2(self.down2(f1))
        return [f0, f1, f2]


class SegDecoder(Module):
    def __init__(self, base: int, rng: np.random.Generator):
        self.up2 = _ConvBlock(base * 4, base * 2, rng)
        self.merge1 = _ConvBlock(base * 4, base * 2, rng)
        self.up1 = _ConvBlock(base * 2, base, rng)
        self.merge0 = _ConvBlock(base * 2, base, rng)
        self.out = Conv3d(base, 1, (1, 1, 1), rng, padding=(0, 0, 0))

    def forward(self, feats: list[Tensor]) -> Tensor:
        f0, f1, f2 = feats
        h = self.up2(upsample_nearest(f2, (2, 2, 2)))
        h = self.merge1(concat([h, f1], axis=1))
        h = self.up1(upsample_nearest(h, (2, 2, 2)))
        h = self.merge0(concat([h, f0], axis=1))
        return self.out(h)


class SegModel(Module):
    """3D encoder-decoder segmenter with a detachable encoder weight set."""

    def __init__(self, base: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.base = base
        self.encoder = SegEncoder(base, rng)
        self.decoder = SegDecoder(base, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))

    def encoder_state(self) -> dict[str, np.ndarray]:
        return self.encoder.state_dict()

    def load_encoder_state(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict(state)


# ---------------------------------------------------------------------------
# masked-volume corruption
# ---------------------------------------------------------------------------


def mask_corrupt(v: Volume, mask_ratio: float, patch_size: tuple[int, int, int],
                 rng: np.random.Generator) -> tuple[Volume, Volume, Volume]:
    """Zero out a fraction of non-overlapping cuboid patches.

    Returns (corrupted, target, mask) where mask marks the corrupted voxels
    and target is the untouched original. round(ratio * n_patches) patches are
    chosen without replacement; deterministic for a given generator state.
    """
    if not (0.0 < mask_ratio < 1.0):
        raise ValueError(f"mask_ratio must lie strictly in (0, 1), got {mask_ratio}")
    patch = tuple(int(p) for p in patch_size)
    for n, p in zip(v.shape, patch):
        if p < 1 or n % p != 0:
            raise ValueError(f"patch {patch} does not divide volume shape {v.shape}")
    grid = tuple(n // p for n, p in zip(v.shape, patch))
    n_patches = int(np.prod(grid))
    k = round(mask_ratio * n_patches)
    chosen = rng.choice(n_patches, size=k, replace=False) if k else np.array([], dtype=int)

    mask = np.zeros(v.shape, dtype=np.float32)
    for flat in chosen:
        i, j, l = np.unravel_index(int(flat), grid)
        mask[i * patch[0]:(i + 1) * patch[0],
             j * patch[1]:(j + 1) * patch[1],
             l * patch[2]:(l + 1) * patch[2]] = 1.0
    corrupted = v.data * (1.0 - mask)
    return (Volume(data=corrupted, spacing=v.spacing, modality=v.modality),
            Volume(data=v.data.copy(), spacing=v.spacing, modality=v.modality),
            Volume(data=mask, spacing=v.spacing, modality=v.modality))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    encoder_state: dict[str, np.ndarray]
    history: list[float]
    holdout_start: float
    holdout_end: float


def _stack_volume_data(volumes) -> np.ndarray:
    arrs = [v.data if isinstance(v, Volume) else np.asarray(v) for v in volumes]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"synthetic volumes must share one shape, got {sorted(shapes)}")
    return np.stack([a.astype(np.float64) for a in arrs])


def _masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    m = Tensor(mask)
    diff = (pred - Tensor(target)) * m
    return (diff * diff).sum() * (1.0 / max(float(mask.sum()), 1.0))


def pretrain(model: SegModel, synthetic_volumes, cfg: TransferConfig) -> PretrainResult:
    """Masked-inpainting pretext on synthetic volumes; returns the trained
    encoder weights. Takes no segmentation labels, by construction."""
    data = _stack_volume_data(synthetic_volumes)
    n_holdout = max(1, int(round(cfg.holdout_frac * len(data))))
    if len(data) <= n_holdout:
        raise ValueError("not enough synthetic volumes for a holdout split")
    train, holdout = data[:-n_holdout], data[-n_holdout:]

    recon_head = SegDecoder(cfg.base, np.random.default_rng(cfg.seed + 31))
    opt = Adam(model.encoder.parameters() + recon_head.parameters(), lr=cfg.pretrain_lr)
    data_rng = rng_stream(cfg.seed, "transfer.pretrain.data")
    mask_rng = rng_stream(cfg.seed, "transfer.pretrain.mask")

    def corrupt_batch(batch: np.ndarray, rng: np.random.Generator):
        cs, ms = [], []
        for x in batch:
            c, _, m = mask_corrupt(Volume(data=x.astype(np.float32)),
                                   cfg.mask_ratio, cfg.patch_size, rng)
            cs.append(c.data.astype(np.float64))
            ms.append(m.data.astype(np.float64))
        return np.stack(cs)[:, None], np.stack(ms)[:, None]

    def holdout_loss() -> float:
        rng = np.random.default_rng(cfg.seed + 97)
        corrupted, mask = corrupt_batch(holdout, rng)
        with no_grad():
            pred = recon_head(model.encoder(Tensor(corrupted)))
        return _masked_mse(pred, holdout[:, None], mask).item()

    start_loss = holdout_loss()
    history = []
    for _ in range(cfg.pretrain_steps):
        idx = data_rng.integers(len(train), size=cfg.pretrain_batch)
        corrupted, mask = corrupt_batch(train[idx], mask_rng)
        pred = recon_head(model.encoder(Tensor(corrupted)))
        loss = _masked_mse(pred, train[idx][:, None], mask)
        if not np.isfinite(loss.data):
            raise FloatingPointError("non-finite pretraining loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    end_loss = holdout_loss()
    return PretrainResult(encoder_state=model.encoder_state(), history=history,
                          holdout_start=start_loss, holdout_end=end_loss)


# ---------------------------------------------------------------------------
# finetuning and evaluation
# ---------------------------------------------------------------------------


def load_labeled_pairs(manifest: DatasetManifest | str | Path,
                       split: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(patient_id, volume, mask) triples for every labeled record in a split."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    out = []
    for rec in manifest.select(split):
        if not rec.mask_path:
            continue
        vol = load_volume(manifest.volume_path(rec))
        mask = load_volume(manifest.mask_path(rec))
        out.append((rec.patient_id, vol.data.astype(np.float64),
                    mask.data.astype(np.float64)))
    if not out:
        raise ValueError(f"no labeled records (with mask_path) in split {split!r}")
    return out


def _seg_losses(logits: Tensor, target: np.ndarray) -> Tensor:
    """Equally weighted soft-Dice + voxel binary cross-entropy on logits."""
    t = Tensor(target)
    prob = logits.sigmoid()
    smooth = 1.0
    inter = (prob * t).sum()
    soft_dice = 1.0 - (2.0 * inter + smooth) / (prob.sum() + t.sum() + smooth)
    # numerically stable BCE-with-logits: relu(x) - x*t + log(1 + exp(-|x|))
    bce = (logits.relu() - logits * t + (1.0 + (-logits.abs()).exp()).log()).mean()
    return soft_dice + bce


def finetune(model: SegModel, manifest: DatasetManifest | str | Path,
             fraction: float, encoder_init: dict[str, np.ndarray] | None,
             cfg: TransferConfig, split: str = "train") -> tuple[SegModel, list[float]]:
    """Train the segmenter on the nested patient subset for `fraction`.

    With `encoder_init` the encoder starts from pretrained weights; everything
    else (data order, optimizer, steps) is identical between arms.
    """
    pairs = load_labeled_pairs(manifest, split)
    patients = [p for p, _, _ in pairs]
    selected = set(cfg.plan.select(patients, fraction))
    subset = [(v, m) for p, v, m in pairs if p in selected]
    if not subset:
        raise ValueError(f"fraction {fraction} selected an empty subset")

    if encoder_init is not None:
        model.load_encoder_state(encoder_init)
    vols = np.stack([v for v, _ in subset])
    masks = np.stack([m for _, m in subset])

    opt = Adam(model.parameters(), lr=cfg.finetune_lr)
    data_rng = rng_stream(cfg.seed, "transfer.finetune.data")
    history = []
    for _ in range(cfg.finetune_steps):
        idx = data_rng.integers(len(vols), size=min(cfg.finetune_batch, len(vols)))
        logits = model(Tensor(vols[idx][:, None]))
        loss = _seg_losses(logits, masks[idx][:, None])
        if not np.isfinite(loss.data):
            raise FloatingPointError("non-finite finetuning loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return model, history


def evaluate_seg(model: SegModel, manifest: DatasetManifest | str | Path,
                 split: str = "test") -> tuple[float, list[float]]:
    """Mean Dice of thresholded predictions (probability 0.5) over a split."""
    pairs = load_labeled_pairs(manifest, split)
    per_case = []
    with no_grad():
        for _, vol, mask in pairs:
            logits = model(Tensor(vol[None, None])).data[0, 0]
            pred = (logits >= 0.0).astype(np.float64)  # sigmoid(x) >= 0.5
            per_case.append(dice(pred, mask))
    return float(np.mean(per_case)), per_case
