"""Operator command line: dataset synthesis, training, NoC evaluation,
volume propagation and the HTTP service.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import json
import socket
import sys
from pathlib import Path

import click
import numpy as np

from .errors import IsegError
from .masks import load_mask
from .noc import DEFAULT_MAX_CLICKS, ModelBackend, OracleBackend, \
    evaluate_dataset, summary_table, write_records_csv
from .propagation import PropagationConfig, evaluate_volume, load_volume, \
    propagate_volume, save_volume_masks, slice_filenames
from .synthetic import spread_seeds, write_synth_dataset
from .training import TrainConfig, TrainingDiverged, load_model_weights, \
    save_model_weights, train_loop, write_log_csv


@click.group()
def main():
    """Interactive segmentation engine."""


@main.command("gen-synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", default=50, show_default=True, type=int)
@click.option("--size", default=64, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def gen_synth(out_dir: str, count: int, size: int, seed: int):
    """Write COUNT synthetic image/mask PNG pairs in the eval layout."""
    try:
        write_synth_dataset(out_dir, count, size, seed)
    except (OSError, ValueError) as e:
        raise click.ClickException(str(e))
    click.echo(f"wrote {count} pairs to {out_dir}")


def _train_config(config_file: str | None, **overrides) -> TrainConfig:
    data = {}
    if config_file:
        data = json.loads(Path(config_file).read_text())
    cfg = TrainConfig.from_dict(data) if data else TrainConfig()
    clean = {k: v for k, v in overrides.items() if v is not None}
    if clean:
        from dataclasses import replace

        cfg = replace(cfg, **clean)
    return cfg


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(exists=True), default=None,
              help="Directory of image/mask pairs; omit to train on synthetic data.")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--seed", "rng_seed", type=int, default=None)
@click.option("--train-samples", type=int, default=None)
@click.option("--resume", "resume_from", type=click.Path(exists=True), default=None)
@click.option("--progress/--no-progress", default=True)
def train(data_dir, config_file, out_path, epochs, batch_size, learning_rate,
          rng_seed, train_samples, resume_from, progress):
    """Train the model; writes weights plus a CSV loss/validation log."""
    cfg = _train_config(config_file, epochs=epochs, batch_size=batch_size,
                        learning_rate=learning_rate, rng_seed=rng_seed,
                        train_samples=train_samples)
    out = Path(out_path)
    ckpt = out.with_name(out.stem + ".ckpt")
    try:
        weights, rows = train_loop(cfg, data_dir=data_dir,
                                   checkpoint_path=ckpt,
                                   resume_from=resume_from,
                                   progress=progress)
    except TrainingDiverged as e:
        click.echo(f"training diverged: {e}", err=True)
        sys.exit(1)
    except IsegError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    save_model_weights(out, weights, cfg.model)
    write_log_csv(out.with_suffix(".log.csv"), rows)
    click.echo(f"weights -> {out}")


@main.command("eval-noc")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@click.option("--thresholds", default="0.8,0.85,0.9", show_default=True)
@click.option("--max-clicks", default=DEFAULT_MAX_CLICKS, show_default=True, type=int)
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--backend", "backend_name", default="model",
              type=click.Choice(["model", "oracle"]), show_default=True)
def eval_noc(data_dir, weights_path, thresholds, max_clicks, report_path,
             backend_name):
    """Run the click-count protocol over a dataset directory."""
    try:
        ts = tuple(sorted(float(t) for t in thresholds.split(",")))
    except ValueError:
        raise click.UsageError(f"bad thresholds {thresholds!r}")
    if backend_name == "oracle":
        backend = OracleBackend()
    else:
        if not weights_path:
            raise click.UsageError("--weights is required for the model backend")
        w, cfg = load_model_weights(weights_path)
        backend = ModelBackend(w, cfg, name=Path(weights_path).stem)
    try:
        report, records = evaluate_dataset(backend, data_dir, ts, max_clicks)
    except IsegError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    if report_path:
        rp = Path(report_path)
        rp.parent.mkdir(parents=True, exist_ok=True)
        rp.write_text(report.to_json())
        write_records_csv(rp.with_suffix(".csv"), records, ts)
    click.echo(summary_table(report, records))


@main.command("propagate")
@click.option("--volume", "volume_path", required=True, type=click.Path(exists=True))
@click.option("--seeds", default=None,
              help="Comma-separated seed slice indices "
                   "[default: quarter/half/three-quarter depth].")
@click.option("--seed-masks", "seed_mask_dir", required=True,
              type=click.Path(exists=True))
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--gt", "gt_dir", type=click.Path(), default=None)
@click.option("--feature-source", default="raw_patch", show_default=True,
              type=click.Choice(["raw_patch", "encoder_stage2"]))
@click.option("--top-k", default=8, show_default=True, type=int)
def propagate(volume_path, seeds, seed_mask_dir, weights_path, out_dir, gt_dir,
              feature_source, top_k):
    """Propagate seed masks across a volume; prints metrics with --gt."""
    try:
        volume = load_volume(volume_path)
        names = slice_filenames(volume_path, volume.shape[0])
        if seeds is None:
            seed_idxs = spread_seeds(volume.shape[0], 3)
        else:
            try:
                seed_idxs = [int(s) for s in seeds.split(",")]
            except ValueError:
                raise click.UsageError(f"bad seed list {seeds!r}")
        seed_pairs = []
        for idx in seed_idxs:
            mask_path = Path(seed_mask_dir) / names[idx]
            if not mask_path.exists():
                mask_path = Path(seed_mask_dir) / f"{idx:03d}.png"
            if not mask_path.exists():
                click.echo(f"missing seed mask for slice {idx}", err=True)
                sys.exit(1)
            seed_pairs.append((idx, load_mask(mask_path)))
        weights = model_cfg = None
        if feature_source == "encoder_stage2":
            if not weights_path:
                raise click.UsageError("encoder_stage2 keys need --weights")
            weights, model_cfg = load_model_weights(weights_path)
        cfg = PropagationConfig(feature_source=feature_source, top_k=top_k,
                                seed_slices=seed_pairs)
        masks, provenance = propagate_volume(volume, cfg, weights, model_cfg)
        save_volume_masks(out_dir, masks, provenance, names)
    except IsegError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    click.echo(f"masks -> {out_dir}")
    if gt_dir:
        gt = np.stack([load_mask(Path(gt_dir) / n) for n in names])
        m = evaluate_volume(masks, gt)
        click.echo("dsc\tsen\tppv\tiou")
        click.echo(f"{m.dsc:.4f}\t{m.sen:.4f}\t{m.ppv:.4f}\t{m.iou:.4f}")


@main.command("serve")
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--weights", "weights_path", required=True, type=click.Path())
@click.option("--data-dir", default=None, type=click.Path(),
              help="Session storage root [default: $ISEG_DATA_DIR or ./data].")
@click.option("--cors", "cors_origin", default=None,
              help="Allow this browser origin (e.g. http://localhost:5173).")
def serve(port, host, weights_path, data_dir, cors_origin):
    """Serve the interactive session API (blocks until SIGINT)."""
    import os

    import uvicorn

    from .service import create_app_from_weights

    data_dir = data_dir or os.environ.get("ISEG_DATA_DIR", "data")
    try:
        app = create_app_from_weights(weights_path, data_dir,
                                      cors_origin=cors_origin)
    except IsegError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError as e:
        click.echo(f"cannot bind {host}:{port}: {e}", err=True)
        sys.exit(1)
    finally:
        probe.close()
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
