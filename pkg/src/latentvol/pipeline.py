"""Two-stage orchestration: experiment configuration, single-file checkpoints,
VQ-GAN then diffusion training, and end-to-end volume generation.

Checkpoints are one file: an 8-byte magic, a little-endian uint64 header
length, a canonical-JSON header (stage, iteration, config, rng states, tensor
directory), then the raw little-endian tensor payloads. Saving a loaded
checkpoint reproduces it byte for byte.

Seeds are namespaced per purpose (data order, slice picks, noise draws,
generation) so no consumer can perturb another's stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import ddpm, vq, vqgan
from .autodiff import Tensor, no_grad
from .nn import Adam
from .rng import generator_state, restore_generator, rng_stream
from .volume import DatasetManifest, ManifestRecord, Volume, load_manifest, load_volume, save_volume

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    seed: int = 0
    image_size: tuple[int, int, int] = (16, 16, 8)
    compression: tuple[int, int, int] = (2, 2, 2)

    codebook_size: int = 512
    codebook_dim: int = 8
    codebook_decay: float = 0.99

    vqgan_lr: float = 1e-3
    vqgan_iters: int = 2000
    vqgan_batch: int = 4
    vqgan_base: int = 16
    vqgan_disc_base: int = 16
    vqgan_warmup_frac: float = 0.1
    recon_weight: float = 1.0
    commit_weight: float = 0.25
    adv_slice_weight: float = 1.0
    adv_volume_weight: float = 1.0
    fm_slice_weight: float = 1.0
    fm_volume_weight: float = 1.0

    diff_lr: float = 1e-3
    diff_iters: int = 500
    diff_batch: int = 8
    diff_base: int = 32
    diff_mults: tuple[int, ...] = (1, 2)
    diff_heads: int = 1
    diff_grad_clip: float = 1.0
    diff_accum_steps: int = 1
    diff_ema: bool = False
    diff_ema_decay: float = 0.999
    timesteps: int = 300
    beta_start: float = 1e-4
    beta_end: float = 0.02

    checkpoint_every: int = 1000
    log_every: int = 1
    eval_every: int = 100
    stop_psnr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(n) for n in self.image_size))
        object.__setattr__(self, "compression", tuple(int(n) for n in self.compression))
        object.__setattr__(self, "diff_mults", tuple(int(n) for n in self.diff_mults))
        for n, s in zip(self.image_size, self.compression):
            if n % s != 0:
                raise ValueError(
                    f"image size {self.image_size} not divisible by compression {self.compression}")
        for name in ("codebook_size", "codebook_dim", "vqgan_iters", "vqgan_batch",
                     "diff_iters", "diff_batch", "timesteps", "diff_accum_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("vqgan_lr", "diff_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        h, w, d = (n // s for n, s in zip(self.image_size, self.compression))
        return (h, w, d, self.codebook_dim)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["image_size"] = list(self.image_size)
        out["compression"] = list(self.compression)
        out["diff_mults"] = list(self.diff_mults)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# Hyperparameter presets; the full-size ones pin the published training
# settings per dataset, `desk` is the CPU-scale configuration the test suite
# trains end to end.
PRESETS: dict[str, ExperimentConfig] = {
    "mrnet": ExperimentConfig(
        name="mrnet", image_size=(256, 256, 32), compression=(4, 4, 4),
        codebook_size=16384, codebook_dim=8,
        vqgan_lr=3e-4, vqgan_iters=100_000, vqgan_batch=2, vqgan_base=64,
        diff_lr=1e-4, diff_iters=150_000, diff_batch=40, diff_base=128,
        timesteps=300),
    "adni": ExperimentConfig(
        name="adni", image_size=(64, 64, 64), compression=(2, 2, 2),
        codebook_size=16384, codebook_dim=8,
        vqgan_lr=3e-4, vqgan_iters=100_000, vqgan_batch=2, vqgan_base=64,
        diff_lr=1e-4, diff_iters=150_000, diff_batch=10, diff_base=128,
        timesteps=300),
    "breast_mri": ExperimentConfig(
        name="breast_mri", image_size=(256, 256, 32), compression=(4, 4, 4),
        codebook_size=16384, codebook_dim=8,
        vqgan_lr=3e-4, vqgan_iters=100_000, vqgan_batch=2, vqgan_base=64,
        diff_lr=1e-4, diff_iters=150_000, diff_batch=40, diff_base=128,
        timesteps=300),
    "lidc": ExperimentConfig(
        name="lidc", image_size=(128, 128, 128), compression=(4, 4, 4),
        codebook_size=16384, codebook_dim=8,
        vqgan_lr=3e-4, vqgan_iters=100_000, vqgan_batch=2, vqgan_base=64,
        diff_lr=1e-4, diff_iters=150_000, diff_batch=50, diff_base=128,
        timesteps=300),
    "desk": ExperimentConfig(
        name="desk", image_size=(16, 16, 8), compression=(2, 2, 2),
        codebook_size=512, codebook_dim=8, codebook_decay=0.9,
        vqgan_lr=2e-3, vqgan_iters=2000, vqgan_batch=4, vqgan_base=16,
        vqgan_disc_base=8, vqgan_warmup_frac=0.5, commit_weight=1.0,
        diff_lr=1e-3, diff_iters=500, diff_batch=8, diff_base=32,
        diff_mults=(1, 2), timesteps=300, eval_every=50),
}

_TOML_SECTIONS = {
    "experiment": ("name", "seed", "image_size", "compression"),
    "codebook": ("codebook_size", "codebook_dim", "codebook_decay"),
    "vqgan": ("vqgan_lr", "vqgan_iters", "vqgan_batch", "vqgan_base",
              "vqgan_disc_base", "vqgan_warmup_frac", "recon_weight",
              "commit_weight", "adv_slice_weight", "adv_volume_weight",
              "fm_slice_weight", "fm_volume_weight"),
    "diffusion": ("diff_lr", "diff_iters", "diff_batch", "diff_base",
                  "diff_mults", "diff_heads", "diff_grad_clip",
                  "diff_accum_steps", "diff_ema", "diff_ema_decay",
                  "timesteps", "beta_start", "beta_end"),
    "run": ("checkpoint_every", "log_every", "eval_every", "stop_psnr"),
}


def config_from_toml(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    flat: dict = {}
    for section, keys in _TOML_SECTIONS.items():
        table = doc.get(section, {})
        unknown = set(table) - set(keys)
        if unknown:
            raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
        flat.update(table)
    unknown_sections = set(doc) - set(_TOML_SECTIONS)
    if unknown_sections:
        raise ValueError(f"unknown config sections: {sorted(unknown_sections)}")
    return ExperimentConfig.from_dict(flat)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def config_to_toml(cfg: ExperimentConfig, path: str | Path) -> Path:
    """Write a config snapshot; `config_from_toml` reads it back identically."""
    data = cfg.to_dict()
    lines = []
    for section, keys in _TOML_SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = data[key]
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines))
    return path


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply `key=value` strings (flag-level overrides) on top of a config."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().split(".")[-1]
        if key not in data:
            raise ValueError(f"unknown config key {key!r}")
        current = data[key]
        if isinstance(current, (list, tuple)):
            data[key] = [int(x) for x in raw.split(",")]
        elif isinstance(current, bool):
            data[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            data[key] = int(raw)
        elif isinstance(current, float) or current is None:
            data[key] = float(raw)
        else:
            data[key] = raw
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"LVCK0001"


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    config: ExperimentConfig
    tensors: dict[str, np.ndarray]
    rng_states: dict[str, dict] = field(default_factory=dict)
    extrema: tuple[float, float] | None = None
    extra: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        return self.config.config_hash()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    payloads = []
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        directory.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        payloads.append(blob)
        offset += len(blob)
    header = {
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config_hash(),
        "rng_states": ckpt.rng_states,
        "extrema": list(ckpt.extrema) if ckpt.extrema is not None else None,
        "extra": ckpt.extra,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    blob = path.read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    header_len = struct.unpack("<Q", blob[8:16])[0]
    header = json.loads(blob[16:16 + header_len].decode())
    base = 16 + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    cfg = ExperimentConfig.from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise ValueError(f"config hash mismatch in {path}")
    extrema = tuple(header["extrema"]) if header["extrema"] is not None else None
    return Checkpoint(stage=header["stage"], iteration=header["iteration"],
                      config=cfg, tensors=tensors, rng_states=header["rng_states"],
                      extrema=extrema, extra=header["extra"])


def _pack_adam(prefix: str, opt: Adam, tensors: dict, extra: dict) -> None:
    extra[f"{prefix}.t"] = opt.t
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        tensors[f"{prefix}.m.{i}"] = m
        tensors[f"{prefix}.v.{i}"] = v


def _unpack_adam(prefix: str, opt: Adam, ckpt: Checkpoint) -> None:
    opt.t = int(ckpt.extra[f"{prefix}.t"])
    opt.m = [ckpt.tensors[f"{prefix}.m.{i}"].copy() for i in range(len(opt.params))]
    opt.v = [ckpt.tensors[f"{prefix}.v.{i}"].copy() for i in range(len(opt.params))]


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------


def load_training_volumes(manifest: DatasetManifest, split: str,
                          image_size: tuple[int, int, int]) -> np.ndarray:
    """Stack a split's volumes as (n, H, W, D) float64; shapes must conform."""
    records = manifest.select(split)
    if not records:
        raise ValueError(f"manifest has no records in split {split!r}")
    stack = []
    for rec in records:
        vol = load_volume(manifest.volume_path(rec))
        if vol.shape != tuple(image_size):
            raise ValueError(
                f"{rec.path} has shape {vol.shape}, config expects {tuple(image_size)}; "
                f"run the prep pipeline first")
        stack.append(vol.data.astype(np.float64))
    return np.stack(stack)


# ---------------------------------------------------------------------------
# stage-1 training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    history: list
    final_iteration: int
    stopped_early: bool = False
    final_psnr: float | None = None


def _new_vqgan_state(cfg: ExperimentConfig) -> vqgan.VqGanTrainState:
    model = vqgan.VqGanModel(
        compression=cfg.compression, latent_channels=cfg.codebook_dim,
        base=cfg.vqgan_base, codebook_size=cfg.codebook_size,
        seed=cfg.seed, codebook_decay=cfg.codebook_decay)
    weights = vqgan.VqGanLossWeights(
        recon=cfg.recon_weight, commit=cfg.commit_weight,
        adv_slice=cfg.adv_slice_weight, adv_volume=cfg.adv_volume_weight,
        fm_slice=cfg.fm_slice_weight, fm_volume=cfg.fm_volume_weight)
    return vqgan.VqGanTrainState.create(
        model, lr=cfg.vqgan_lr, seed=cfg.seed, disc_base=cfg.vqgan_disc_base,
        weights=weights)


def _vqgan_checkpoint(cfg: ExperimentConfig, state: vqgan.VqGanTrainState,
                      data_rng: np.random.Generator, iteration: int) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    extra: dict = {}
    for name, p in state.model.named_parameters():
        tensors[f"model.{name}"] = p.data
    for name, p in state.slice_disc.named_parameters():
        tensors[f"slice_disc.{name}"] = p.data
    for name, p in state.volume_disc.named_parameters():
        tensors[f"volume_disc.{name}"] = p.data
    cb = state.model.codebook
    tensors["codebook.vectors"] = cb.vectors
    tensors["codebook.ema_cluster_size"] = cb.ema_cluster_size
    tensors["codebook.ema_embed_sum"] = cb.ema_embed_sum
    extra["codebook.decay"] = cb.decay
    extra["codebook.eps"] = cb.eps
    _pack_adam("g_opt", state.g_opt, tensors, extra)
    _pack_adam("d_opt", state.d_opt, tensors, extra)
    extrema = vq.codebook_extrema(cb)
    return Checkpoint(
        stage="vqgan", iteration=iteration, config=cfg, tensors=tensors,
        rng_states={
            "data": generator_state(data_rng),
            "slices": generator_state(state.slice_rng),
        },
        extrema=extrema, extra=extra)


def restore_vqgan_state(ckpt: Checkpoint) -> tuple[vqgan.VqGanTrainState, np.random.Generator]:
    cfg = ckpt.config
    state = _new_vqgan_state(cfg)
    state.model.load_state_dict(
        {n[len("model."):]: t for n, t in ckpt.tensors.items() if n.startswith("model.")})
    state.slice_disc.load_state_dict(
        {n[len("slice_disc."):]: t for n, t in ckpt.tensors.items() if n.startswith("slice_disc.")})
    state.volume_disc.load_state_dict(
        {n[len("volume_disc."):]: t for n, t in ckpt.tensors.items() if n.startswith("volume_disc.")})
    state.model.codebook = vq.Codebook(
        vectors=ckpt.tensors["codebook.vectors"],
        ema_cluster_size=ckpt.tensors["codebook.ema_cluster_size"],
        ema_embed_sum=ckpt.tensors["codebook.ema_embed_sum"],
        decay=ckpt.extra["codebook.decay"], eps=ckpt.extra["codebook.eps"])
    _unpack_adam("g_opt", state.g_opt, ckpt)
    _unpack_adam("d_opt", state.d_opt, ckpt)
    state.step = ckpt.iteration
    state.slice_rng = restore_generator(ckpt.rng_states["slices"])
    data_rng = restore_generator(ckpt.rng_states["data"])
    return state, data_rng


def vqgan_model_from_checkpoint(ckpt: Checkpoint) -> vqgan.VqGanModel:
    if ckpt.stage != "vqgan":
        raise ValueError(f"expected a vqgan checkpoint, got stage {ckpt.stage!r}")
    state, _ = restore_vqgan_state(ckpt)
    return state.model


def reconstruction_psnr(model: vqgan.VqGanModel, volumes: np.ndarray,
                        limit: int = 8) -> float:
    """Mean reconstruction PSNR of encode -> quantize -> decode on a sample."""
    scores = []
    with no_grad():
        for x in volumes[:limit]:
            z = model.encode_t(Tensor(x[None, None]))
            sites = np.transpose(z.data, (0, 2, 3, 4, 1))
            _, q_sites, _ = vq.quantize_array(sites, model.codebook)
            zq = np.transpose(q_sites, (0, 4, 1, 2, 3))
            x_hat = model.decode_t(Tensor(zq)).data[0, 0]
            scores.append(vqgan.psnr(x, x_hat))
    return float(np.mean(scores))


def train_vqgan(cfg: ExperimentConfig, manifest: DatasetManifest | str | Path,
                out_dir: str | Path, resume: str | Path | None = None,
                split: str = "train") -> TrainResult:
    """Stage 1: train the compression model, checkpointing periodically.

    The final checkpoint records the codebook extrema used downstream for
    latent normalization. Optional `cfg.stop_psnr` stops as soon as the
    reconstruction PSNR (evaluated every `cfg.eval_every` steps) reaches the
    target.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    volumes = load_training_volumes(manifest, split, cfg.image_size)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_hash() != cfg.config_hash():
            raise ValueError("resume checkpoint was produced by a different config")
        state, data_rng = restore_vqgan_state(ckpt)
        start = ckpt.iteration
    else:
        state = _new_vqgan_state(cfg)
        data_rng = rng_stream(cfg.seed, "vqgan.data")
        start = 0

    config_to_toml(cfg, out_dir / "config_vqgan.toml")
    warmup_steps = int(cfg.vqgan_warmup_frac * cfg.vqgan_iters)
    history: list[vqgan.VqGanLossReport] = []
    stopped_early = False
    final_psnr = None

    log_path = out_dir / "metrics_vqgan.csv"
    log_fh = open(log_path, "a", newline="")
    logger = csv.writer(log_fh)
    if start == 0:
        logger.writerow(["iteration", "recon", "commit", "gen_slice", "gen_volume",
                         "disc_slice", "disc_volume", "fm_slice", "fm_volume"])

    iteration = start
    try:
        for iteration in range(start + 1, cfg.vqgan_iters + 1):
            idx = data_rng.integers(len(volumes), size=cfg.vqgan_batch)
            batch = volumes[idx][:, None]
            adv_weight = 0.0 if iteration <= warmup_steps else 1.0
            report = vqgan.train_step_vqgan(state, batch, adv_weight=adv_weight)
            history.append(report)
            if iteration % cfg.log_every == 0:
                logger.writerow([iteration, report.recon, report.commit,
                                 report.gen_slice, report.gen_volume,
                                 report.disc_slice, report.disc_volume,
                                 report.fm_slice, report.fm_volume])
            if iteration % cfg.checkpoint_every == 0 and iteration < cfg.vqgan_iters:
                save_checkpoint(_vqgan_checkpoint(cfg, state, data_rng, iteration),
                                out_dir / f"vqgan_{iteration:07d}.ckpt")
            if cfg.stop_psnr is not None and iteration % cfg.eval_every == 0:
                final_psnr = reconstruction_psnr(state.model, volumes)
                if final_psnr >= cfg.stop_psnr:
                    stopped_early = True
                    break
    finally:
        log_fh.close()

    path = save_checkpoint(_vqgan_checkpoint(cfg, state, data_rng, iteration),
                           out_dir / "vqgan_final.ckpt")
    return TrainResult(checkpoint_path=path, history=history,
                       final_iteration=iteration, stopped_early=stopped_early,
                       final_psnr=final_psnr)


# ---------------------------------------------------------------------------
# stage-2 training
# ---------------------------------------------------------------------------


def _new_denoiser(cfg: ExperimentConfig) -> ddpm.DenoiserNet:
    return ddpm.DenoiserNet(channels=cfg.codebook_dim, base=cfg.diff_base,
                            mults=cfg.diff_mults, heads=cfg.diff_heads,
                            seed=cfg.seed + 7)


def encode_latents(model: vqgan.VqGanModel, volumes: np.ndarray,
                   extrema: tuple[float, float]) -> tuple[np.ndarray, float]:
    """Frozen-encoder pass over all volumes -> normalized latents (n, k, h, w, d)
    plus the observed fraction of values outside [-1, 1]."""
    cmin, cmax = extrema
    if cmax <= cmin:
        raise ValueError(f"degenerate codebook extrema ({cmin}, {cmax})")
    latents = []
    with no_grad():
        for x in volumes:
            z = model.encode_t(Tensor(x[None, None])).data[0]
            latents.append(vq.latent_normalize(z, cmin, cmax))
    arr = np.stack(latents)
    return arr, vq.overflow_fraction(arr)


def train_diffusion(cfg: ExperimentConfig, vqgan_ckpt: str | Path | Checkpoint,
                    manifest: DatasetManifest | str | Path,
                    out_dir: str | Path, resume: str | Path | None = None,
                    split: str = "train") -> TrainResult:
    """Stage 2: train the latent noise predictor against the frozen stage-1
    encoder, using the codebook extrema recorded in the stage-1 checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(vqgan_ckpt, Checkpoint):
        vqgan_ckpt = load_checkpoint(vqgan_ckpt)
    if vqgan_ckpt.stage != "vqgan":
        raise ValueError(f"stage-1 checkpoint has stage {vqgan_ckpt.stage!r}")
    if vqgan_ckpt.extrema is None:
        raise ValueError("stage-1 checkpoint lacks codebook extrema")
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)

    frozen = vqgan_model_from_checkpoint(vqgan_ckpt)
    frozen_checksum = frozen.param_checksum()
    volumes = load_training_volumes(manifest, split, cfg.image_size)
    latents, overflow = encode_latents(frozen, volumes, vqgan_ckpt.extrema)

    sched = ddpm.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    net = _new_denoiser(cfg)
    opt = Adam(net.parameters(), lr=cfg.diff_lr, clip_norm=cfg.diff_grad_clip)
    ema_shadow = ({n: p.data.copy() for n, p in net.named_parameters()}
                  if cfg.diff_ema else None)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_hash() != cfg.config_hash():
            raise ValueError("resume checkpoint was produced by a different config")
        net.load_state_dict(
            {n[len("net."):]: t for n, t in ckpt.tensors.items() if n.startswith("net.")})
        _unpack_adam("opt", opt, ckpt)
        data_rng = restore_generator(ckpt.rng_states["data"])
        noise_rng = restore_generator(ckpt.rng_states["noise"])
        if ema_shadow is not None:
            loaded = {n[len("ema."):]: t.copy() for n, t in ckpt.tensors.items()
                      if n.startswith("ema.")}
            if loaded:
                ema_shadow = loaded
            else:
                ema_shadow = {n: p.data.copy() for n, p in net.named_parameters()}
        start = ckpt.iteration
    else:
        data_rng = rng_stream(cfg.seed, "diffusion.data")
        noise_rng = rng_stream(cfg.seed, "diffusion.noise")
        start = 0

    def make_ckpt(iteration: int) -> Checkpoint:
        tensors = {f"net.{n}": p.data for n, p in net.named_parameters()}
        extra = {"overflow_fraction": overflow,
                 "latent_shape": list(cfg.latent_shape),
                 "vqgan_config_hash": vqgan_ckpt.config_hash()}
        _pack_adam("opt", opt, tensors, extra)
        if ema_shadow is not None:
            for n, t in ema_shadow.items():
                tensors[f"ema.{n}"] = t
        return Checkpoint(stage="diffusion", iteration=iteration, config=cfg,
                          tensors=tensors,
                          rng_states={"data": generator_state(data_rng),
                                      "noise": generator_state(noise_rng)},
                          extrema=vqgan_ckpt.extrema, extra=extra)

    config_to_toml(cfg, out_dir / "config_diffusion.toml")
    log_path = out_dir / "metrics_diffusion.csv"
    log_fh = open(log_path, "a", newline="")
    logger = csv.writer(log_fh)
    if start == 0:
        logger.writerow(["iteration", "loss", "overflow_fraction"])

    history: list[float] = []
    iteration = start
    try:
        for iteration in range(start + 1, cfg.diff_iters + 1):
            net.zero_grad()
            loss_value = 0.0
            for _ in range(cfg.diff_accum_steps):
                idx = data_rng.integers(len(latents), size=cfg.diff_batch)
                loss = ddpm.diffusion_loss(net, latents[idx], sched, noise_rng) \
                    * (1.0 / cfg.diff_accum_steps)
                loss.backward()
                loss_value += loss.item()
            if not math.isfinite(loss_value):
                raise FloatingPointError(f"non-finite diffusion loss at iteration {iteration}")
            opt.step()
            if ema_shadow is not None:
                d = cfg.diff_ema_decay
                for n, p in net.named_parameters():
                    ema_shadow[n] = d * ema_shadow[n] + (1 - d) * p.data
            history.append(loss_value)
            if iteration % cfg.log_every == 0:
                logger.writerow([iteration, loss_value, overflow])
            if iteration % cfg.checkpoint_every == 0 and iteration < cfg.diff_iters:
                save_checkpoint(make_ckpt(iteration), out_dir / f"diffusion_{iteration:07d}.ckpt")
    finally:
        log_fh.close()

    if frozen.param_checksum() != frozen_checksum:
        raise RuntimeError("stage-1 weights changed during diffusion training")
    path = save_checkpoint(make_ckpt(iteration), out_dir / "diffusion_final.ckpt")
    return TrainResult(checkpoint_path=path, history=history, final_iteration=iteration)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate(vqgan_ckpt: str | Path | Checkpoint, diff_ckpt: str | Path | Checkpoint,
             n: int, seed: int, use_ema: bool | None = None) -> list[Volume]:
    """Sample `n` volumes: prior noise -> reverse diffusion -> denormalize ->
    quantize -> decode. Deterministic per (seed, index)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if not isinstance(vqgan_ckpt, Checkpoint):
        vqgan_ckpt = load_checkpoint(vqgan_ckpt)
    if not isinstance(diff_ckpt, Checkpoint):
        diff_ckpt = load_checkpoint(diff_ckpt)
    if vqgan_ckpt.stage != "vqgan" or diff_ckpt.stage != "diffusion":
        raise ValueError(
            f"need (vqgan, diffusion) checkpoints, got ({vqgan_ckpt.stage}, {diff_ckpt.stage})")
    if diff_ckpt.extra.get("vqgan_config_hash") != vqgan_ckpt.config_hash():
        raise ValueError("checkpoints are incompatible: stage-2 was trained "
                         "against a different stage-1 config")

    cfg = diff_ckpt.config
    model = vqgan_model_from_checkpoint(vqgan_ckpt)
    net = _new_denoiser(cfg)
    prefix = "ema." if (use_ema if use_ema is not None else cfg.diff_ema) and \
        any(k.startswith("ema.") for k in diff_ckpt.tensors) else "net."
    net.load_state_dict({n_[len(prefix):]: t for n_, t in diff_ckpt.tensors.items()
                         if n_.startswith(prefix)})
    sched = ddpm.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    cmin, cmax = diff_ckpt.extrema

    out = []
    for i in range(n):
        child_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i,)).generate_state(1)[0])
        grid = ddpm.sample(net, cfg.latent_shape, sched, seed=child_seed)
        z = vq.latent_denormalize(grid.data, cmin, cmax)
        _, q, _ = vq.quantize(vq.LatentGrid(data=z, compression=cfg.compression), model.codebook)
        out.append(vqgan.decode(model, q))
    return out


def write_generated(volumes: list[Volume], out_dir: str | Path,
                    prefix: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, vol in enumerate(volumes):
        paths.append(save_volume(vol, out_dir / f"{prefix}_{i:04d}"))
    return paths


# ---------------------------------------------------------------------------
# phantom dataset fabrication
# ---------------------------------------------------------------------------


def make_phantom_dataset(out_dir: str | Path, count: int,
                         shape: tuple[int, int, int], seed: int,
                         split_spec: str = "train:1.0",
                         with_masks: bool = False) -> Path:
    """Write `count` phantoms (+optional masks) and a patient-level manifest.

    `split_spec` is e.g. "train:0.8,test:0.2"; volumes are assigned to splits
    in order, one patient per volume.
    """
    from .volume import PhantomSpec, generate_phantom, save_manifest

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = []
    for part in split_spec.split(","):
        name, frac = part.split(":")
        splits.append((name.strip(), float(frac)))
    if abs(sum(f for _, f in splits) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split_spec!r}")

    boundaries = np.cumsum([round(f * count) for _, f in splits])
    boundaries[-1] = count
    records = []
    for i in range(count):
        vol, mask = generate_phantom(PhantomSpec(seed=seed + i, shape=tuple(shape)))
        name = f"phantom_{i:04d}"
        save_volume(vol, out_dir / name)
        split = next(s for (s, _), b in zip(splits, boundaries) if i < b)
        mask_path = None
        if with_masks:
            save_volume(mask, out_dir / f"{name}_mask")
            mask_path = f"{name}_mask.f32raw"
        records.append(ManifestRecord(path=f"{name}.f32raw", patient_id=f"p{i:04d}",
                                      split=split, mask_path=mask_path))
    manifest = DatasetManifest(records=tuple(records), root=out_dir)
    return save_manifest(manifest, out_dir / "manifest.jsonl")
