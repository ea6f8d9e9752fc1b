"""Command-line interface.

Exit codes: 0 on success, 2 for configuration/input errors, 3 when training
aborts on a non-finite value.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click

EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ABORT = 3


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FileNotFoundError, KeyError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except FloatingPointError as exc:
            click.echo(f"numeric abort: {exc}", err=True)
            sys.exit(EXIT_NUMERIC_ABORT)
    return wrapper


def _parse_triple(text: str) -> tuple:
    parts = [p for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) if "." in p else int(p) for p in parts)


def _load_config(preset: str | None, config: str | None, overrides: tuple[str, ...]):
    from .pipeline import PRESETS, apply_overrides, config_from_toml
    if config is not None:
        cfg = config_from_toml(config)
    elif preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        cfg = PRESETS[preset]
    else:
        raise ValueError("pass --config FILE or --preset NAME")
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg


@click.group()
def main():
    """Two-stage 3D latent generative modeling toolkit."""


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@main.group()
def prep():
    """Deterministic volume preprocessing."""


def _prep_io(fn):
    fn = click.option("--out", "out_path", required=True, type=click.Path())(fn)
    fn = click.option("--in", "in_path", required=True, type=click.Path())(fn)
    return fn


@prep.command("resample")
@_prep_io
@click.option("--spacing", required=True, help="target mm spacing, e.g. 1.0,1.0,1.0")
@handle_errors
def prep_resample(in_path, out_path, spacing):
    from .volume import load_volume, resample, save_volume
    vol = resample(load_volume(in_path), _parse_triple(spacing))
    save_volume(vol, out_path)
    click.echo(f"wrote {out_path} shape={vol.shape}")


@prep.command("crop")
@_prep_io
@click.option("--shape", required=True, help="target shape, e.g. 256,256,32")
@click.option("--pad/--no-pad", default=False, help="zero-pad axes where the target exceeds the source")
@handle_errors
def prep_crop(in_path, out_path, shape, pad):
    from .volume import center_crop, load_volume, save_volume
    vol = center_crop(load_volume(in_path), tuple(int(n) for n in _parse_triple(shape)), pad=pad)
    save_volume(vol, out_path)
    click.echo(f"wrote {out_path} shape={vol.shape}")


@prep.command("resize")
@_prep_io
@click.option("--shape", required=True)
@handle_errors
def prep_resize(in_path, out_path, shape):
    from .volume import load_volume, resize, save_volume
    vol = resize(load_volume(in_path), tuple(int(n) for n in _parse_triple(shape)))
    save_volume(vol, out_path)
    click.echo(f"wrote {out_path} shape={vol.shape}")


@prep.command("normalize")
@_prep_io
@click.option("--lo", default=-1.0, show_default=True)
@click.option("--hi", default=1.0, show_default=True)
@handle_errors
def prep_normalize(in_path, out_path, lo, hi):
    from .volume import load_volume, minmax_normalize, save_volume
    vol = minmax_normalize(load_volume(in_path), lo=lo, hi=hi)
    save_volume(vol, out_path)
    click.echo(f"wrote {out_path} range=({lo}, {hi})")


@prep.command("split-lateral")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out-left", required=True, type=click.Path())
@click.option("--out-right", required=True, type=click.Path())
@handle_errors
def prep_split_lateral(in_path, out_left, out_right):
    from .volume import load_volume, save_volume, split_lateral
    left, right = split_lateral(load_volume(in_path))
    save_volume(left, out_left)
    save_volume(right, out_right)
    click.echo(f"wrote {out_left} ({left.shape}) and {out_right} ({right.shape})")


@prep.command("phantom-gen")
@click.option("--count", default=8, show_default=True)
@click.option("--shape", default="16,16,8", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split-spec", default="train:1.0", show_default=True)
@click.option("--with-masks/--no-masks", default=False)
@handle_errors
def prep_phantom_gen(count, shape, seed, out_dir, split_spec, with_masks):
    from .pipeline import make_phantom_dataset
    path = make_phantom_dataset(out_dir, count, tuple(int(n) for n in _parse_triple(shape)),
                                seed, split_spec=split_spec, with_masks=with_masks)
    click.echo(f"wrote {count} phantoms; manifest at {path}")


@main.command("phantom-gen")
@click.option("--count", default=8, show_default=True)
@click.option("--shape", default="16,16,8", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split-spec", default="train:1.0", show_default=True)
@click.option("--with-masks/--no-masks", default=False)
@handle_errors
def phantom_gen(count, shape, seed, out_dir, split_spec, with_masks):
    """Generate a deterministic phantom dataset with a manifest."""
    from .pipeline import make_phantom_dataset
    path = make_phantom_dataset(out_dir, count, tuple(int(n) for n in _parse_triple(shape)),
                                seed, split_spec=split_spec, with_masks=with_masks)
    click.echo(f"wrote {count} phantoms; manifest at {path}")


# ---------------------------------------------------------------------------
# training and generation
# ---------------------------------------------------------------------------


_config_options = [
    click.option("--config", type=click.Path(), default=None, help="TOML config file"),
    click.option("--preset", default=None, help="named preset configuration"),
    click.option("--set", "overrides", multiple=True, help="override config key=value"),
]


def _with_config(fn):
    for opt in reversed(_config_options):
        fn = opt(fn)
    return fn


@main.command("train-vqgan")
@_with_config
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_dir", default="runs/vqgan", show_default=True, type=click.Path())
@click.option("--resume", type=click.Path(), default=None)
@handle_errors
def train_vqgan_cmd(config, preset, overrides, manifest, out_dir, resume):
    """Stage 1: train the compression model."""
    from .pipeline import train_vqgan
    cfg = _load_config(preset, config, overrides)
    result = train_vqgan(cfg, manifest, out_dir, resume=resume)
    click.echo(f"finished at iteration {result.final_iteration}; "
               f"checkpoint: {result.checkpoint_path}")


@main.command("train-diffusion")
@_with_config
@click.option("--vqgan-ckpt", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_dir", default="runs/diffusion", show_default=True, type=click.Path())
@click.option("--resume", type=click.Path(), default=None)
@handle_errors
def train_diffusion_cmd(config, preset, overrides, vqgan_ckpt, manifest, out_dir, resume):
    """Stage 2: train the latent noise predictor against a frozen stage 1."""
    from .pipeline import train_diffusion
    cfg = _load_config(preset, config, overrides)
    result = train_diffusion(cfg, vqgan_ckpt, manifest, out_dir, resume=resume)
    click.echo(f"finished at iteration {result.final_iteration}; "
               f"checkpoint: {result.checkpoint_path}")


@main.command("generate")
@click.option("--vqgan-ckpt", required=True, type=click.Path())
@click.option("--diff-ckpt", required=True, type=click.Path())
@click.option("-n", "count", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def generate_cmd(vqgan_ckpt, diff_ckpt, count, seed, out_dir):
    """Sample volumes from trained checkpoints."""
    from .pipeline import generate, write_generated
    volumes = generate(vqgan_ckpt, diff_ckpt, count, seed)
    paths = write_generated(volumes, out_dir)
    click.echo(f"wrote {len(paths)} volumes to {out_dir}")


@main.command("eval-diversity")
@click.option("--dir", "vol_dir", required=True, type=click.Path())
@click.option("--pairs", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="JSON report path (default: <dir>/diversity.json)")
@handle_errors
def eval_diversity_cmd(vol_dir, pairs, seed, out_path):
    """Pairwise MS-SSIM diversity of a directory of volumes."""
    from .metrics import diversity_score
    from .volume import load_volume
    vol_dir = Path(vol_dir)
    volumes = [load_volume(p) for p in sorted(vol_dir.glob("*.f32raw"))]
    report = diversity_score(volumes, n_pairs=pairs, seed=seed)
    out_path = Path(out_path) if out_path else vol_dir / "diversity.json"
    scores_path = out_path.with_suffix(".csv")
    with open(scores_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "ms_ssim"])
        for i, s in enumerate(report.scores):
            writer.writerow([i, s])
    out_path.write_text(json.dumps({
        "mean": report.mean, "n_pairs": report.n_pairs, "seed": report.seed,
        "scores_path": str(scores_path),
    }, indent=2))
    click.echo(f"mean MS-SSIM over {report.n_pairs} pairs: {report.mean:.6f}")
    click.echo(f"report: {out_path}")


# ---------------------------------------------------------------------------
# transfer harness
# ---------------------------------------------------------------------------


@main.group()
def transfer():
    """Synthetic-pretraining transfer experiments."""


@transfer.command("pretrain")
@click.option("--synthetic-dir", required=True, type=click.Path())
@click.option("--out", "out_path", default="encoder.ckpt", show_default=True, type=click.Path())
@click.option("--steps", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--base", default=8, show_default=True)
@handle_errors
def transfer_pretrain(synthetic_dir, out_path, steps, seed, base):
    """Masked-inpainting pretraining on synthetic volumes (no labels)."""
    from .pipeline import Checkpoint, ExperimentConfig, save_checkpoint
    from .transfer import SegModel, TransferConfig, pretrain
    from .volume import load_volume
    vols = [load_volume(p) for p in sorted(Path(synthetic_dir).glob("*.f32raw"))
            if not p.stem.endswith("_mask")]
    cfg = TransferConfig(base=base, seed=seed, pretrain_steps=steps)
    model = SegModel(base=base, seed=seed)
    result = pretrain(model, vols, cfg)
    ckpt = Checkpoint(stage="encoder", iteration=steps, config=ExperimentConfig(),
                      tensors={f"encoder.{k}": v for k, v in result.encoder_state.items()},
                      extra={"base": base, "seed": seed,
                             "holdout_start": result.holdout_start,
                             "holdout_end": result.holdout_end})
    save_checkpoint(ckpt, out_path)
    click.echo(f"holdout loss {result.holdout_start:.5f} -> {result.holdout_end:.5f}; "
               f"encoder saved to {out_path}")


@transfer.command("finetune")
@click.option("--manifest", required=True, type=click.Path())
@click.option("--fraction", required=True, type=float)
@click.option("--encoder", "encoder_path", default=None, type=click.Path(),
              help="pretrained encoder checkpoint; omit to train from scratch")
@click.option("--out", "out_path", default="segmodel.ckpt", show_default=True, type=click.Path())
@click.option("--steps", default=150, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--base", default=8, show_default=True)
@handle_errors
def transfer_finetune(manifest, fraction, encoder_path, out_path, steps, seed, base):
    """Finetune the segmenter on a nested labeled-data fraction."""
    from .pipeline import Checkpoint, ExperimentConfig, load_checkpoint, save_checkpoint
    from .transfer import SegModel, TransferConfig, finetune
    encoder_state = None
    if encoder_path is not None:
        enc = load_checkpoint(encoder_path)
        if enc.stage != "encoder":
            raise ValueError(f"{encoder_path} is not an encoder checkpoint")
        encoder_state = {k[len("encoder."):]: v for k, v in enc.tensors.items()}
    cfg = TransferConfig(base=base, seed=seed, finetune_steps=steps)
    model = SegModel(base=base, seed=seed)
    model, history = finetune(model, manifest, fraction, encoder_state, cfg)
    ckpt = Checkpoint(stage="segmodel", iteration=steps, config=ExperimentConfig(),
                      tensors=dict(model.state_dict()),
                      extra={"base": base, "seed": seed, "fraction": fraction,
                             "pretrained": encoder_state is not None,
                             "final_loss": history[-1]})
    save_checkpoint(ckpt, out_path)
    click.echo(f"fraction={fraction} pretrained={encoder_state is not None} "
               f"final_loss={history[-1]:.5f}; model saved to {out_path}")


@transfer.command("evaluate")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--test-manifest", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
@handle_errors
def transfer_evaluate(model_path, test_manifest, out_path):
    """Mean Dice of a finetuned segmenter on the test split."""
    from .pipeline import load_checkpoint
    from .transfer import SegModel, evaluate_seg
    ckpt = load_checkpoint(model_path)
    if ckpt.stage != "segmodel":
        raise ValueError(f"{model_path} is not a segmenter checkpoint")
    model = SegModel(base=int(ckpt.extra["base"]), seed=int(ckpt.extra["seed"]))
    model.load_state_dict(ckpt.tensors)
    mean_dice, per_case = evaluate_seg(model, test_manifest)
    payload = {
        "fraction": ckpt.extra.get("fraction"),
        "pretrained": bool(ckpt.extra.get("pretrained")),
        "mean_dice": mean_dice,
        "per_case": per_case,
    }
    text = json.dumps(payload, indent=2)
    if out_path:
        Path(out_path).write_text(text)
    click.echo(text)


# ---------------------------------------------------------------------------
# reader study
# ---------------------------------------------------------------------------


@main.group()
def study():
    """Blinded reader-study service."""


@study.command("create")
@click.option("--db", "db_path", required=True, type=click.Path())
@click.option("--volumes-dir", required=True, type=click.Path())
@click.option("--dataset", default="", help="dataset tag for aggregation (never shown to readers)")
@click.option("--study-id", required=True)
@click.option("--readers", required=True, help="comma-separated reader ids")
@click.option("--seed", default=0, show_default=True)
@handle_errors
def study_create(db_path, volumes_dir, dataset, study_id, readers, seed):
    """Register a volume directory and create a study over it."""
    from .study import StudyStore, register_volume_dir
    store = StudyStore(db_path)
    n = register_volume_dir(store, volumes_dir, dataset)
    if n == 0:
        raise ValueError(f"no .f32raw volumes found in {volumes_dir}")
    definition = store.create_study(study_id, store.list_volumes(),
                                    [r.strip() for r in readers.split(",") if r.strip()],
                                    seed)
    click.echo(f"study {definition.study_id}: {len(definition.volume_ids)} volumes, "
               f"readers {list(definition.readers)}")


@study.command("serve")
@click.option("--db", "db_path", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--token", default=None, help="shared reader bearer token")
@click.option("--ui-dir", default=None, type=click.Path(),
              help="directory with the built frontend to serve at /")
@handle_errors
def study_serve(db_path, host, port, token, ui_dir):
    """Serve the /v1 reader-study API (and optionally the frontend)."""
    import uvicorn
    from .study import StudyStore, create_app
    app = create_app(StudyStore(db_path), token=token, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


@study.command("export")
@click.option("--db", "db_path", required=True, type=click.Path())
@click.option("--study-id", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def study_export(db_path, study_id, out_path):
    """Export all ratings of a study as CSV."""
    from .study import StudyStore
    store = StudyStore(db_path)
    records = store.ratings(study_id)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study_id", "reader_id", "volume_id", "category", "option", "timestamp"])
        for r in records:
            writer.writerow([r.study_id, r.reader_id, r.volume_id, r.category,
                             r.option, r.timestamp])
    click.echo(f"exported {len(records)} ratings to {out_path}")


if __name__ == "__main__":
    main()
