"""Command-line surface for the full pipeline.

Every subcommand resolves its configuration (flags > file > profile),
writes the resolved snapshot and a MANIFEST into its output directory,
and exits non-zero with a machine-readable JSON error on failure.
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import volume_io
from .blending import BlendConfig
from .config import config_hash, resolve_config, write_resolved
from .conditioning import ConditionLabel
from .dataset import DatasetManifest, ScanEntry, filter_scans, split_dataset
from .detector import (
    DetectorConfig,
    infer,
    load_detector,
    train_detector,
    write_detections_csv,
)
from .errors import DependencyError, NoduleAugError
from .evaluation import stratified_cpm, tsne_embed, write_tsne_csv
from .gan_training import (
    GanCheckpoint,
    SynthesisRequest,
    TrainConfig,
    build_augmented_dataset,
    train_gan,
    working_voi,
)
from .phantom import default_class_mix, generate_phantom
from .volume import normalize_hu

CONFIG_ENV = "NODULEAUG_CONFIG"


def _fail(exc: Exception, code: int) -> None:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    if isinstance(exc, DependencyError):
        payload["error"]["producer"] = exc.producer
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def pipeline_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DependencyError as exc:
            _fail(exc, 3)
        except NoduleAugError as exc:
            _fail(exc, 2)
        except (OSError, ValueError) as exc:
            _fail(exc, 1)
    return wrapper


def _require(path: Path, what: str, producer: str) -> Path:
    if not Path(path).exists():
        raise DependencyError(f"missing {what} at {path}; run `noduleaug {producer}` first",
                              producer=producer)
    return Path(path)


def _write_run_manifest(out_dir: Path, resolved: dict, artifacts: list[str]) -> None:
    manifest = {
        "config_hash": config_hash(resolved),
        "artifacts": sorted(artifacts),
        "format_version": 1,
    }
    (out_dir / "MANIFEST.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@click.group()
def main():
    """Conditional 3D GAN augmentation pipeline for lung-nodule detection."""


common = [
    click.option("--profile", default="desk", show_default=True,
                 type=click.Choice(["paper", "desk"])),
    click.option("--config", "config_file", default=None, envvar=CONFIG_ENV,
                 type=click.Path(), help="JSON config file (overrides the profile)."),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@main.command()
@with_common
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--ratios", nargs=3, type=float, default=(0.75, 0.10, 0.15), show_default=True)
@click.option("--nodule-cap", default=None, type=int,
              help="Scans with more nodules than this go to train.")
@click.option("--hu-window", nargs=2, type=float, default=None,
              help="Normalize volumes from this HU window onto [-1, 1].")
@pipeline_command
def ingest(profile, config_file, manifest_path, out_dir, seed, ratios, nodule_cap, hu_window):
    """Filter scans, assign splits, and optionally normalize volumes."""
    resolved = resolve_config(profile, config_file)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "phantom"))

    kept, rejected = filter_scans(manifest)
    entries = []
    for entry in kept.entries:
        if hu_window is not None:
            from .volume import Volume
            src = volume_io.load_volume(entry.path)
            vol = Volume(data=normalize_hu(src.data, tuple(hu_window)), spacing=src.spacing,
                         origin=src.origin, intensity_range=(-1.0, 1.0), background=-1.0,
                         scan_id=src.scan_id)
            path = volume_io.save_raw(vol, out_dir / "volumes" / f"{entry.scan_id}.f32")
            entry = replace(entry, path=str(path))
        entries.append(entry)
    split = split_dataset(DatasetManifest(tuple(entries)), ratios=tuple(ratios),
                          seed=seed, nodule_cap=nodule_cap)
    manifest_out = split.save(out_dir / "manifest.json")
    (out_dir / "rejected.json").write_text(
        json.dumps([{"scan_id": s, "reason": r} for s, r in rejected], indent=2) + "\n")
    write_resolved(resolved, out_dir)
    _write_run_manifest(out_dir, resolved, ["manifest.json", "rejected.json"])
    click.echo(f"kept {len(split.entries)} scans, rejected {len(rejected)}; "
               f"manifest at {manifest_out}")


@main.command()
@with_common
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--scans", "n_scans", default=None, type=int)
@click.option("--nodules-per-scan", default=None, type=int)
@click.option("--shape", nargs=3, type=int, default=None)
@click.option("--ratios", nargs=3, type=float, default=(0.75, 0.10, 0.15), show_default=True)
@click.option("--nodule-cap", default=None, type=int)
@pipeline_command
def phantom(profile, config_file, out_dir, seed, n_scans, nodules_per_scan, shape,
            ratios, nodule_cap):
    """Generate phantom scans with exact annotations and a split manifest."""
    resolved = resolve_config(profile, config_file, {
        "phantom": {"n_scans": n_scans, "n_nodules": nodules_per_scan,
                    "shape": list(shape) if shape else None},
    })
    pcfg = resolved["phantom"]
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    entries = []
    for k in range(pcfg["n_scans"]):
        vol, anns = generate_phantom(
            seed=seed * 100_003 + k, shape=tuple(pcfg["shape"]),
            n_nodules=pcfg["n_nodules"],
            classes=default_class_mix(pcfg["n_nodules"], offset=k))
        path = volume_io.save_raw(vol, vol_dir / f"{vol.scan_id}.f32")
        entries.append(ScanEntry(
            scan_id=vol.scan_id, path=str(path), spacing_mm=vol.spacing,
            n_slices=vol.shape[0], nodules=tuple(anns)))
    manifest = split_dataset(DatasetManifest(tuple(entries)), ratios=tuple(ratios),
                             seed=seed, nodule_cap=nodule_cap)
    manifest.save(out_dir / "manifest.json")
    write_resolved(resolved, out_dir)
    _write_run_manifest(out_dir, resolved, ["manifest.json", "volumes/"])
    click.echo(f"wrote {len(entries)} phantom scans to {out_dir}")


def _gan_config(resolved: dict, seed: int | None, steps: int | None,
                mode: str | None) -> TrainConfig:
    g = dict(resolved["gan"])
    if seed is not None:
        g["seed"] = seed
    if steps is not None:
        g["total_steps"] = steps
    if mode is not None:
        g["mode"] = mode
    return TrainConfig(**g)


@main.command("train-gan")
@with_common
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--steps", default=None, type=int)
@click.option("--mode", default=None, type=click.Choice(["no_l1", "with_l1"]))
@pipeline_command
def train_gan_cmd(profile, config_file, manifest_path, out_dir, seed, steps, mode):
    """Train the conditional generator on the manifest's training split."""
    resolved = resolve_config(profile, config_file)
    config = _gan_config(resolved, seed, steps, mode)
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "phantom"))
    out_dir = Path(out_dir)
    ckpt = train_gan(manifest, config, out_dir)
    write_resolved({**resolved, "gan": config.__dict__}, out_dir)
    click.echo(f"checkpoint at {ckpt}")


@main.command()
@with_common
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--scan-id", required=True)
@click.option("--nodule-index", default=0, show_default=True, type=int)
@click.option("--shift", nargs=3, type=float, default=(0.0, 0.0, 0.0), show_default=True)
@click.option("--zoom", default=1.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@pipeline_command
def synthesize(profile, config_file, checkpoint_path, manifest_path, scan_id, nodule_index,
               shift, zoom, seed, out_dir):
    """Generate one nodule for a chosen annotation; writes cube + placement."""
    resolved = resolve_config(profile, config_file)
    checkpoint = GanCheckpoint.load(_require(Path(checkpoint_path), "checkpoint", "train-gan"))
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "phantom"))
    entry = next((e for e in manifest.entries if e.scan_id == scan_id), None)
    if entry is None:
        raise DependencyError(f"scan {scan_id!r} not in manifest", producer="phantom")
    ann = entry.nodules[nodule_index]
    volume = volume_io.load_volume(entry.path)
    from .gan_training import synthesize_nodule
    request = SynthesisRequest(
        annotation=ann, label=ConditionLabel(ann.size_class, ann.attenuation_class),
        shift=tuple(shift), zoom=zoom, seed=seed)
    nodule, placement = synthesize_nodule(checkpoint, volume, request)
    out_dir = Path(out_dir)
    from .volume import Volume
    volume_io.save_raw(Volume(data=nodule, intensity_range=volume.intensity_range),
                       out_dir / "nodule.f32")
    (out_dir / "placement.json").write_text(json.dumps(
        {"scan_id": scan_id, "box": placement.as_list()}, indent=2) + "\n")
    write_resolved(resolved, out_dir)
    click.echo(f"nodule written to {out_dir}")


@main.command()
@with_common
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--ratio", default=1, show_default=True, type=click.IntRange(1, 3))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@pipeline_command
def augment(profile, config_file, checkpoint_path, manifest_path, ratio, seed, out_dir):
    """Write synthetic copies of every training scan plus the merged manifest."""
    resolved = resolve_config(profile, config_file)
    checkpoint = GanCheckpoint.load(_require(Path(checkpoint_path), "checkpoint", "train-gan"))
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "phantom"))
    blend = BlendConfig(**resolved["blend"])
    out_dir = Path(out_dir)
    augmented = build_augmented_dataset(checkpoint, manifest, ratio=ratio, seed=seed,
                                        out_dir=out_dir, blend_config=blend)
    write_resolved(resolved, out_dir)
    _write_run_manifest(out_dir, resolved, ["manifest.json", "volumes/"])
    n_syn = sum(1 for e in augmented.entries if e.synthetic)
    click.echo(f"augmented manifest with {n_syn} synthetic scans at {out_dir / 'manifest.json'}")


def _detector_config(resolved: dict, seed: int | None, steps: int | None) -> DetectorConfig:
    d = dict(resolved["detector"])
    d["input_shape"] = tuple(d["input_shape"])
    d["anchor_sizes"] = tuple(d["anchor_sizes"])
    d["val_window"] = tuple(d["val_window"])
    if seed is not None:
        d["seed"] = seed
    if steps is not None:
        d["total_steps"] = steps
    return DetectorConfig(**d)


@main.command("train-detector")
@with_common
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--steps", default=None, type=int)
@pipeline_command
def train_detector_cmd(profile, config_file, manifest_path, out_dir, seed, steps):
    """Train the proposal detector on the manifest's training split."""
    resolved = resolve_config(profile, config_file)
    config = _detector_config(resolved, seed, steps)
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "augment"))
    out_dir = Path(out_dir)
    ckpt = train_detector(manifest, config, out_dir)
    write_resolved({**resolved, "detector": {**resolved["detector"], "seed": config.seed,
                                             "total_steps": config.total_steps}}, out_dir)
    click.echo(f"detector checkpoint at {ckpt}")


@main.command()
@with_common
@click.option("--detector", "detector_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--by", "stratify_by", default="all", show_default=True,
              type=click.Choice(["size", "attenuation", "all"]))
@click.option("--out", "out_dir", required=True, type=click.Path())
@pipeline_command
def evaluate(profile, config_file, detector_path, manifest_path, split, stratify_by, out_dir):
    """Run inference on a split and report FROC/CPM, overall and stratified."""
    resolved = resolve_config(profile, config_file)
    model = load_detector(_require(Path(detector_path), "detector checkpoint", "train-detector"))
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "augment"))
    entries = manifest.split_entries(split)
    if not entries:
        raise DependencyError(f"manifest has no scans in the {split!r} split",
                              producer="phantom")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dets_by_scan, gts_by_scan, all_dets = {}, {}, []
    for entry in entries:
        volume = volume_io.load_volume(entry.path)
        dets = infer(model, volume)
        dets_by_scan[entry.scan_id] = dets
        gts_by_scan[entry.scan_id] = list(entry.nodules)
        all_dets.extend(dets)
    write_detections_csv(out_dir / "detections.csv", all_dets)

    report = stratified_cpm(dets_by_scan, gts_by_scan,
                            iou_threshold=resolved["evaluation"]["iou_threshold"])
    report_json = report.to_json()
    if stratify_by == "size":
        report_json.pop("by_attenuation", None)
    elif stratify_by == "attenuation":
        report_json.pop("by_size", None)
    (out_dir / "report.json").write_text(json.dumps(report_json, indent=2, sort_keys=True) + "\n")

    from .evaluation import froc
    curve = froc(dets_by_scan, gts_by_scan,
                 iou_threshold=resolved["evaluation"]["iou_threshold"])
    lines = ["fp_per_scan,sensitivity,threshold"]
    for (fp, sens), thr in zip(curve.points, curve.thresholds or [0.0] * len(curve.points)):
        lines.append(f"{fp:.6f},{sens:.6f},{thr:.6f}")
    (out_dir / "froc.csv").write_text("\n".join(lines) + "\n")

    write_resolved(resolved, out_dir)
    _write_run_manifest(out_dir, resolved, ["detections.csv", "report.json", "froc.csv"])
    click.echo(json.dumps({"cpm": report.cpm}, indent=2))


@main.command()
@with_common
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--checkpoint-l1", "checkpoint_l1_path", default=None, type=click.Path())
@click.option("--per-category", default=None, type=int,
              help="Images per category (defaults to every training nodule).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@pipeline_command
def tsne(profile, config_file, manifest_path, checkpoint_path, checkpoint_l1_path,
         per_category, seed, out_dir):
    """Embed real & synthetic nodules into 2D scatter data."""
    resolved = resolve_config(profile, config_file)
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "phantom"))
    checkpoint = GanCheckpoint.load(_require(Path(checkpoint_path), "checkpoint", "train-gan"))
    checkpoint_l1 = None
    if checkpoint_l1_path is not None:
        checkpoint_l1 = GanCheckpoint.load(
            _require(Path(checkpoint_l1_path), "with-l1 checkpoint", "train-gan"))

    from .gan_training import synthesize_nodule
    rng = np.random.default_rng(seed)
    sources = []
    for entry in manifest.split_entries("train"):
        volume = volume_io.load_volume(entry.path)
        for ann in entry.nodules:
            sources.append((volume, ann))
    if per_category is not None and per_category < len(sources):
        picks = rng.permutation(len(sources))[:per_category]
        sources = [sources[int(i)] for i in picks]

    images, categories = [], []
    for volume, ann in sources:
        _, nodule = working_voi(volume, ann.box)
        images.append(nodule)
        categories.append("real")
    for name, ckpt in (("synthetic", checkpoint), ("synthetic_l1", checkpoint_l1)):
        if ckpt is None:
            continue
        for volume, ann in sources:
            request = SynthesisRequest(
                annotation=ann, label=ConditionLabel(ann.size_class, ann.attenuation_class),
                seed=int(rng.integers(0, 2 ** 31)))
            nodule, _ = synthesize_nodule(ckpt, volume, request)
            images.append(nodule)
            categories.append(name)

    ecfg = resolved["evaluation"]
    perplexity = min(ecfg["tsne_perplexity"], len(images) - 1)
    points = tsne_embed(images, perplexity=perplexity,
                        iterations=ecfg["tsne_iterations"], seed=seed, categories=categories)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tsne_csv(out_dir / "tsne.csv", points, categories)
    write_resolved(resolved, out_dir)
    _write_run_manifest(out_dir, resolved, ["tsne.csv"])
    click.echo(f"scatter data at {out_dir / 'tsne.csv'}")


@main.command("vtt-pool")
@with_common
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--checkpoint-l1", "checkpoint_l1_path", required=True, type=click.Path())
@click.option("--per-class", default=50, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@pipeline_command
def vtt_pool(profile, config_file, manifest_path, checkpoint_path, checkpoint_l1_path,
             per_class, seed, out_dir):
    """Build the four test pools of real and synthetic items."""
    from .vtt import build_pool
    resolved = resolve_config(profile, config_file)
    manifest = DatasetManifest.load(_require(Path(manifest_path), "manifest", "phantom"))
    ckpt = GanCheckpoint.load(_require(Path(checkpoint_path), "checkpoint", "train-gan"))
    ckpt_l1 = GanCheckpoint.load(
        _require(Path(checkpoint_l1_path), "with-l1 checkpoint", "train-gan"))
    out_dir = Path(out_dir)
    build_pool(manifest, ckpt, ckpt_l1, out_dir, per_class=per_class, seed=seed)
    write_resolved(resolved, out_dir)
    click.echo(f"pool at {out_dir}")


@main.command("vtt-serve")
@click.option("--pool", "pool_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--items-per-class", default=50, show_default=True, type=int)
@click.option("--static", "static_dir", default=None, type=click.Path(),
              help="Frontend asset bundle to serve at /.")
@pipeline_command
def vtt_serve(pool_dir, data_dir, host, port, items_per_class, static_dir):
    """Launch the visual-Turing-test service."""
    import uvicorn
    from .vtt import create_app
    _require(Path(pool_dir), "item pool", "vtt-pool")
    app = create_app(pool_dir, data_dir, items_per_class=items_per_class,
                     static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("vtt-report")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--test-id", default=None, type=int)
@click.option("--items-per-session", default=100, show_default=True, type=int)
@pipeline_command
def vtt_report(data_dir, test_id, items_per_session):
    """Print per-rater statistics from persisted session logs."""
    from .evaluation import VttResponse, vtt_statistics
    from .vtt.service import VttStore
    store = VttStore(data_dir)
    responses, raters = [], {}
    for sid in store.all_session_ids():
        events = store.events(sid)
        if not events or events[0]["event"] != "create":
            continue
        head = events[0]
        if test_id is not None and head["test_id"] != test_id:
            continue
        raters[sid] = head["rater_id"]
        for ev in events:
            if ev["event"] == "submit":
                responses.append(VttResponse(
                    session_id=sid, test_id=head["test_id"], item_id=ev["item_id"],
                    truth=ev["truth"], answer=ev["answer"], timestamp=ev["ts"]))
    rows, flagged = vtt_statistics(responses, expected_items=items_per_session, raters=raters)
    click.echo(json.dumps({
        "rows": [r.to_json() for r in rows],
        "incomplete_sessions": flagged,
    }, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
