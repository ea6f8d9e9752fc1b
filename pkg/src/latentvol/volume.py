"""Volume representation, file I/O, deterministic preprocessing and phantoms.

A :class:`Volume` is an (H, W, D) float32 grid with voxel spacing in mm and a
modality tag. All operations are pure: they return new volumes and never
mutate their inputs, so they are safe to call from parallel loader workers.

Native storage is ``<name>.f32raw`` (little-endian float32, H-major) plus a
JSON sidecar carrying shape, spacing and modality. Common neuroimaging
containers (.nii / .nii.gz) are readable behind a small adapter.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels

MODALITIES = ("MRI", "CT")
AXIS_NAMES = {"height": 0, "width": 1, "depth": 2}


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "MRI"
    value_range: tuple[float, float] | None = None
    spacing_defaulted: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if any(n < 1 for n in data.shape):
            raise ValueError(f"all dimensions must be >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_volume(vol: Volume, path: str | Path) -> Path:
    """Write `<path>.f32raw` + `<path>.json`; `path` may carry either suffix or none."""
    base = _strip_suffix(Path(path))
    raw = base.with_suffix(".f32raw")
    raw.parent.mkdir(parents=True, exist_ok=True)
    vol.data.astype("<f4").tofile(raw)
    sidecar = {
        "shape": list(vol.data.shape),
        "spacing": list(vol.spacing),
        "modality": vol.modality,
    }
    if vol.value_range is not None:
        sidecar["value_range"] = list(vol.value_range)
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))
    return raw


def load_volume(path: str | Path, format: str = "auto") -> Volume:
    """Load a volume. Formats: 'f32raw' (native), 'nifti' (read-only), 'auto'."""
    path = Path(path)
    if format == "auto":
        name = path.name.lower()
        format = "nifti" if name.endswith((".nii", ".nii.gz")) else "f32raw"
    if format == "f32raw":
        return _load_f32raw(path)
    if format == "nifti":
        return _load_nifti(path)
    raise ValueError(f"unsupported volume format {format!r}")


def _strip_suffix(path: Path) -> Path:
    if path.suffix in (".f32raw", ".json"):
        return path.with_suffix("")
    return path


def _load_f32raw(path: Path) -> Volume:
    base = _strip_suffix(path)
    raw = base.with_suffix(".f32raw")
    sidecar = base.with_suffix(".json")
    if not raw.exists():
        raise FileNotFoundError(f"no such volume: {raw}")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing sidecar for {raw}")
    try:
        meta = json.loads(sidecar.read_text())
        shape = tuple(int(n) for n in meta["shape"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"corrupt sidecar {sidecar}: {exc}") from exc
    data = np.fromfile(raw, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(
            f"corrupt volume {raw}: {data.size} values on disk, sidecar shape {shape} needs {expected}")
    data = data.reshape(shape)
    if not np.isfinite(data).all():
        raise ValueError(f"volume {raw} contains non-finite values")
    spacing = meta.get("spacing")
    defaulted = spacing is None
    value_range = meta.get("value_range")
    return Volume(
        data=data,
        spacing=tuple(spacing) if spacing else (1.0, 1.0, 1.0),
        modality=meta.get("modality", "MRI"),
        value_range=tuple(value_range) if value_range else None,
        spacing_defaulted=defaulted,
    )


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64, 256: np.int8, 512: np.uint16}


def _load_nifti(path: Path) -> Volume:
    """Minimal NIfTI-1 reader: single-file .nii or .nii.gz, scalar 3D images."""
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    opener = gzip.open if path.name.lower().endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise ValueError(f"corrupt NIfTI file {path}: truncated header")
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    if sizeof_hdr != 348:
        raise ValueError(f"corrupt NIfTI file {path}: bad header size {sizeof_hdr}")
    dim = struct.unpack_from("<8h", blob, 40)
    datatype = struct.unpack_from("<h", blob, 70)[0]
    pixdim = struct.unpack_from("<8f", blob, 76)
    vox_offset = int(struct.unpack_from("<f", blob, 108)[0])
    scl_slope = struct.unpack_from("<f", blob, 112)[0]
    scl_inter = struct.unpack_from("<f", blob, 116)[0]
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"corrupt NIfTI file {path}: bad magic {magic!r}")
    ndim = dim[0]
    dims = [d for d in dim[1:1 + ndim]]
    if ndim > 3 and any(d != 1 for d in dims[3:]):
        raise ValueError(f"unsupported NIfTI image: {ndim}D with dims {dims}")
    dims = (dims + [1, 1, 1])[:3]
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"unsupported NIfTI datatype code {datatype}")
    dt = _NIFTI_DTYPES[datatype]
    count = dims[0] * dims[1] * dims[2]
    arr = np.frombuffer(blob, dtype=np.dtype(dt).newbyteorder("<"),
                        count=count, offset=vox_offset)
    # NIfTI stores the first axis fastest; reshape reversed, then transpose.
    data = arr.reshape(dims[::-1]).transpose(2, 1, 0).astype(np.float64)
    if scl_slope not in (0.0,) and not np.isnan(scl_slope):
        data = data * scl_slope + scl_inter
    if not np.isfinite(data).all():
        raise ValueError(f"volume {path} contains non-finite values")
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    defaulted = any(p <= 0 for p in pixdim[1:4])
    return Volume(data=data.astype(np.float32), spacing=spacing,
                  modality="MRI", spacing_defaulted=defaulted)


# ---------------------------------------------------------------------------
# preprocessing operations
# ---------------------------------------------------------------------------

def resample(v: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Resample to a new voxel spacing with trilinear interpolation.

    New dimension per axis is round(old_dim * old_spacing / target_spacing).
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    new_shape = []
    coords = []
    for n, old, new in zip(v.shape, v.spacing, target):
        m = int(np.floor(n * old / new + 0.5))
        if m < 1:
            raise ValueError(
                f"degenerate resample: axis of size {n} at {old}mm collapses to 0 at {new}mm")
        new_shape.append(m)
        coords.append(np.arange(m, dtype=np.float64) * (new / old))
    out = kernels.trilinear_resample(v.data.astype(np.float64), *coords)
    return replace(v, data=out.astype(np.float32), spacing=target)


def resize(v: Volume, shape: tuple[int, int, int]) -> Volume:
    """Resize to an explicit voxel shape with corner-aligned trilinear interpolation."""
    shape = tuple(int(n) for n in shape)
    if any(n < 1 for n in shape):
        raise ValueError(f"target shape must be >= 1 per axis, got {shape}")
    coords = []
    new_spacing = []
    for src, dst, mm in zip(v.shape, shape, v.spacing):
        if dst > 1:
            coords.append(np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1)))
        else:
            coords.append(np.array([(src - 1) / 2.0]))
        new_spacing.append(mm * src / dst)
    out = kernels.trilinear_resample(v.data.astype(np.float64), *coords)
    return replace(v, data=out.astype(np.float32), spacing=tuple(new_spacing))


def hu_convert(raw: Volume, slope: float, intercept: float) -> Volume:
    """Linear rescale of raw CT values to Hounsfield units; forces CT modality."""
    data = raw.data.astype(np.float64) * slope + intercept
    return replace(raw, data=data.astype(np.float32), modality="CT")


def center_crop(v: Volume, shape: tuple[int, int, int], pad: bool = False) -> Volume:
    """Center crop to `shape`; crop offset per axis is floor((src - dst) / 2).

    When `pad` is enabled, axes where the target exceeds the source are
    symmetrically zero-padded instead of raising.
    """
    shape = tuple(int(n) for n in shape)
    if any(n < 1 for n in shape):
        raise ValueError(f"target shape must be >= 1 per axis, got {shape}")
    oversize = [dst > src for src, dst in zip(v.shape, shape)]
    if any(oversize) and not pad:
        raise ValueError(
            f"crop target {shape} exceeds source {v.shape}; pass pad=True to zero-pad")
    data = v.data
    pads = []
    slices = []
    for src, dst in zip(v.shape, shape):
        if dst > src:
            total = dst - src
            pads.append((total // 2, total - total // 2))
            slices.append(slice(None))
        else:
            off = (src - dst) // 2
            pads.append((0, 0))
            slices.append(slice(off, off + dst))
    data = data[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads)
    return replace(v, data=data.copy())


def minmax_normalize(v: Volume, lo: float = -1.0, hi: float = 1.0) -> Volume:
    """Affine map of the volume's value range onto [lo, hi], exact at the endpoints."""
    if hi <= lo:
        raise ValueError(f"need lo < hi, got ({lo}, {hi})")
    data = v.data.astype(np.float64)
    vmin = data.min()
    vmax = data.max()
    if vmax <= vmin:
        raise ValueError("cannot normalize a constant volume (zero dynamic range)")
    t = (data - vmin) / (vmax - vmin)
    out = lo * (1.0 - t) + hi * t
    return replace(v, data=out.astype(np.float32), value_range=(float(lo), float(hi)))


def flip_augment(v: Volume, axis: str = "height", p: float = 0.5,
                 rng: np.random.Generator | None = None) -> Volume:
    """Reverse one axis with probability `p`. The axis defaults to the
    in-plane vertical (height) axis; pass 'width' or 'depth' to override."""
    if axis not in AXIS_NAMES:
        raise ValueError(f"axis must be one of {sorted(AXIS_NAMES)}, got {axis!r}")
    if rng is None:
        rng = np.random.default_rng()
    if rng.random() < p:
        return replace(v, data=np.flip(v.data, axis=AXIS_NAMES[axis]).copy())
    return replace(v, data=v.data.copy())


def split_lateral(v: Volume) -> tuple[Volume, Volume]:
    """Split along width into left floor(W/2) and right ceil(W/2) halves."""
    w = v.shape[1]
    if w < 2:
        raise ValueError(f"cannot split width {w} < 2")
    half = w // 2
    left = replace(v, data=v.data[:, :half].copy())
    right = replace(v, data=v.data[:, half:].copy())
    return left, right


# ---------------------------------------------------------------------------
# procedural phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    shape: tuple[int, int, int] = (16, 16, 8)
    n_ellipsoids: int = 3
    intensity_bands: tuple[tuple[float, float], ...] = ((0.2, 0.9),)

    def __post_init__(self):
        if any(n < 4 for n in self.shape):
            raise ValueError(f"phantom shape components must be >= 4, got {self.shape}")
        if self.n_ellipsoids < 1:
            raise ValueError("need at least one ellipsoid")
        for lo, hi in self.intensity_bands:
            if not (-1.0 <= lo <= hi <= 1.0):
                raise ValueError(f"intensity band ({lo}, {hi}) outside [-1, 1]")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Deterministic ellipsoid-composite phantom plus its binary foreground mask.

    The background is smooth low-amplitude texture near -0.8; each ellipsoid
    paints a value drawn from one of the configured intensity bands. The mask
    is the union of the ellipsoid interiors (always nonempty: every center
    voxel is inside its own ellipsoid).
    """
    rng = np.random.default_rng(spec.seed)
    h, w, d = spec.shape

    # Smooth background: coarse noise upsampled to the full grid.
    coarse = rng.uniform(-0.95, -0.6, size=(4, 4, 4))
    cx = np.linspace(0, 3, h)
    cy = np.linspace(0, 3, w)
    cz = np.linspace(0, 3, d)
    vol = kernels.trilinear_resample(coarse, cx, cy, cz)

    mask = np.zeros(spec.shape, dtype=bool)
    grids = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    for _ in range(spec.n_ellipsoids):
        center = [rng.uniform(0.25 * n, 0.75 * n) for n in spec.shape]
        radii = [max(1.5, rng.uniform(0.15, 0.35) * n) for n in spec.shape]
        band = spec.intensity_bands[rng.integers(len(spec.intensity_bands))]
        value = rng.uniform(band[0], band[1])
        q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        inside = q <= 1.0
        vol[inside] = value
        mask |= inside

    vol = np.clip(vol, -1.0, 1.0)
    volume = Volume(data=vol.astype(np.float32), value_range=(-1.0, 1.0))
    mask_vol = Volume(data=mask.astype(np.float32))
    return volume, mask_vol


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    patient_id: str
    split: str
    mask_path: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "root", Path(self.root))
        per_split: dict[str, set[str]] = {}
        for rec in self.records:
            per_split.setdefault(rec.split, set()).add(rec.patient_id)
        splits = sorted(per_split)
        for i, a in enumerate(splits):
            for b in splits[i + 1:]:
                shared = per_split[a] & per_split[b]
                if shared:
                    raise ValueError(
                        f"patients {sorted(shared)} appear in both {a!r} and {b!r} splits")

    def select(self, split: str) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def volume_path(self, rec: ManifestRecord) -> Path:
        return self.root / rec.path

    def mask_path(self, rec: ManifestRecord) -> Path | None:
        return self.root / rec.mask_path if rec.mask_path else None


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in manifest.records:
        row = {"path": rec.path, "patient_id": rec.patient_id, "split": rec.split}
        if rec.mask_path:
            row["mask_path"] = rec.mask_path
        lines.append(json.dumps(row, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def load_manifest(path: str | Path, root: str | Path | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            records.append(ManifestRecord(
                path=row["path"], patient_id=str(row["patient_id"]),
                split=row["split"], mask_path=row.get("mask_path")))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValueError(f"corrupt manifest line {lineno} in {path}: {exc}") from exc
    return DatasetManifest(records=tuple(records),
                           root=Path(root) if root is not None else path.parent)
