"""Adversarial training loop, synthesis, and augmented-dataset assembly.

Working resolution: each nodule's box is cubified (side s) and its 2s
surroundings are resized to the 64-cube VOI, so the nodule occupies the
centered 32-cube regardless of physical size. Synthesis reverses the
zoom when the result is written back into the scan.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import volume_io
from .blending import BlendConfig, blend_boundary, finalize_synthetic
from .conditioning import (
    CHANNEL_ORDER,
    ConditionLabel,
    NOISE_HIGH,
    NOISE_LOW,
    assemble_input,
    insert_noise_box,
    tiles_for_nodule,
)
from .dataset import DatasetManifest, NoduleAnnotation, ScanEntry, require_split
from .errors import (
    ConfigurationError,
    ConsistencyError,
    InvalidArgumentError,
    NonFiniteLossError,
    OutOfBoundsError,
)
from .losses import (
    DEFAULT_GP_WEIGHT,
    generator_objective,
    l1_term,
    lsgan_d_loss,
    lsgan_g_loss,
    wgan_g_loss,
    wgan_gp_d_loss,
)
from .models import (
    ContextDiscriminator,
    ContextDiscriminatorSpec,
    GeneratorSpec,
    NoduleCritic,
    NoduleCriticSpec,
    NoduleGenerator,
    composite_batch,
    generator_forward,
    init_gan_weights,
)
from .volume import (
    NODULE_SIDE,
    VOI_SIDE,
    Box3,
    Voi,
    Volume,
    crop_with_padding,
    cubify,
    resize_trilinear,
)

CHECKPOINT_FORMAT_VERSION = 1
LOSS_LOG_HEADER = "step,d1_loss,d2_loss,g_loss,l1_term,flipped"

MAX_SHIFT_FRACTION = 0.10
ZOOM_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2_000
    batch_size: int = 2
    learning_rate: float = 2.0e-4
    beta1: float = 0.5
    beta2: float = 0.9
    label_flip_period: int = 3
    mode: str = "no_l1"
    seed: int = 0
    base_channels: int = 4
    gp_weight: float = DEFAULT_GP_WEIGHT
    intensity_range: tuple[float, float] = (-1.0, 1.0)
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise InvalidArgumentError("batch_size and total_steps must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgumentError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.mode not in ("no_l1", "with_l1"):
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        if self.label_flip_period < 1:
            raise InvalidArgumentError("label_flip_period must be >= 1")

    def config_hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=str)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SynthesisRequest:
    annotation: NoduleAnnotation
    label: ConditionLabel
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    zoom: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(abs(s) > MAX_SHIFT_FRACTION + 1e-12 for s in self.shift):
            raise InvalidArgumentError(f"shift fractions limited to ±{MAX_SHIFT_FRACTION}, got {self.shift}")
        if not ZOOM_RANGE[0] - 1e-12 <= self.zoom <= ZOOM_RANGE[1] + 1e-12:
            raise InvalidArgumentError(f"zoom must lie in {ZOOM_RANGE}, got {self.zoom}")
        if (self.label.size_class != self.annotation.size_class
                or self.label.attenuation_class != self.annotation.attenuation_class):
            raise InvalidArgumentError("condition label must equal the source nodule's label")


@dataclass(frozen=True)
class TrainingItem:
    voi: np.ndarray        # 64^3 working-resolution surroundings
    nodule: np.ndarray     # 32^3 working-resolution nodule
    label: ConditionLabel
    split: str = "train"


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def placement_box(source_box: Box3, shift: tuple[float, float, float], zoom: float) -> Box3:
    """Cubified source box, shifted by fractions of its side and rescaled."""
    cube = cubify(source_box)
    side = cube.extents[0]
    new_side = max(1, round_half_up(side * zoom))
    center = cube.center
    mins = []
    for i in range(3):
        offset = round_half_up(shift[i] * side)
        mins.append(round_half_up(center[i] + offset - new_side / 2.0))
    return Box3(tuple(mins), tuple(m + new_side for m in mins))


def surrounding_box(nodule_cube: Box3) -> Box3:
    """The 2s cube sharing the nodule cube's center."""
    s = nodule_cube.extents[0]
    mn = tuple(nodule_cube.min_corner[i] - s // 2 for i in range(3))
    return Box3(mn, tuple(m + 2 * s for m in mn))


def working_voi(volume: Volume, nodule_box: Box3) -> tuple[Voi, np.ndarray]:
    """Extract the zoomed (VOI, nodule cube) training pair for one nodule."""
    cube = cubify(nodule_box)
    surround = surrounding_box(cube)
    raw = crop_with_padding(volume, surround)
    voi = Voi(data=resize_trilinear(raw, (VOI_SIDE,) * 3),
              source_scan_id=volume.scan_id, source_origin=surround)
    nodule_raw = crop_with_padding(volume, cube)
    nodule = resize_trilinear(nodule_raw, (NODULE_SIDE,) * 3)
    return voi, nodule


def build_training_items(manifest: DatasetManifest,
                         base_dir: str | Path | None = None) -> list[TrainingItem]:
    """Load every train-split nodule as a working-resolution (VOI, nodule) pair."""
    entries = require_split(manifest, "train")
    base = Path(base_dir) if base_dir is not None else None
    items: list[TrainingItem] = []
    for entry in entries:
        path = Path(entry.path)
        if base is not None and not path.is_absolute():
            path = base / path
        volume = volume_io.load_volume(path)
        for ann in entry.nodules:
            voi, nodule = working_voi(volume, ann.box)
            items.append(TrainingItem(
                voi=np.array(voi.data), nodule=nodule,
                label=ConditionLabel(ann.size_class, ann.attenuation_class)))
    if not items:
        raise ConfigurationError("training split contains no nodules")
    return items


def _flip_axes(rng: np.random.Generator) -> tuple[bool, bool]:
    return bool(rng.integers(0, 2)), bool(rng.integers(0, 2))  # (vertical y, horizontal x)


def _apply_flips(arr: np.ndarray, flip_y: bool, flip_x: bool) -> np.ndarray:
    if flip_y:
        arr = arr[:, ::-1, :]
    if flip_x:
        arr = arr[:, :, ::-1]
    return np.ascontiguousarray(arr)


def train_gan(items: list[TrainingItem] | DatasetManifest, config: TrainConfig,
                out_dir: str | Path, base_dir: str | Path | None = None) -> Path:
    """Run the two-discriminator adversarial loop; returns the checkpoint path.

    Per step: sample a batch, flip-augment, draw fresh noise boxes, update
    the context discriminator (least squares), the nodule critic
    (Wasserstein + gradient penalty), then the generator. On every step
    with index = period - 1 (mod period) the real/synthetic targets fed to
    both discriminators are swapped. Writes loss_log.csv and MANIFEST.json
    next to the checkpoints; fully reproducible given the seed.
    """
    if isinstance(items, DatasetManifest):
        items = build_training_items(items, base_dir)
    if not items:
        raise ConfigurationError("no training items provided")
    bad = [it for it in items if it.split != "train"]
    if bad:
        raise ConfigurationError(
            f"{len(bad)} items tagged {sorted({it.split for it in bad})} reached the trainer; "
            "only the training split may be used")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    eps_gen = torch.Generator().manual_seed(config.seed + 1)

    lo, hi = config.intensity_range
    generator = NoduleGenerator(GeneratorSpec(base_channels=config.base_channels,
                                              intensity_range=(lo, hi)))
    d_context = ContextDiscriminator(ContextDiscriminatorSpec(base_channels=config.base_channels))
    d_nodule = NoduleCritic(NoduleCriticSpec(base_channels=config.base_channels))
    for m in (generator, d_context, d_nodule):
        init_gan_weights(m)

    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas)
    opt_d1 = torch.optim.Adam(d_context.parameters(), lr=config.learning_rate, betas=betas)
    opt_d2 = torch.optim.Adam(d_nodule.parameters(), lr=config.learning_rate, betas=betas)

    tile_cache = {it.label: tiles_for_nodule(it.label).transpose(3, 0, 1, 2) for it in items}
    voi_tile_cache = {
        label: np.broadcast_to(tiles[:, :1, :1, :1], (6, VOI_SIDE, VOI_SIDE, VOI_SIDE))
        for label, tiles in tile_cache.items()
    }

    log_rows = [LOSS_LOG_HEADER]
    checkpoint_every = config.checkpoint_every or config.total_steps
    final_path: Path | None = None

    for step in range(config.total_steps):
        idx = rng.integers(0, len(items), size=config.batch_size)
        vois, nodules, tiles32, tiles64 = [], [], [], []
        for i in idx:
            it = items[int(i)]
            flip_y, flip_x = _flip_axes(rng)
            voi = _apply_flips(it.voi, flip_y, flip_x)
            nodule = _apply_flips(it.nodule, flip_y, flip_x)
            noise = rng.uniform(NOISE_LOW, NOISE_HIGH,
                                size=(NODULE_SIDE,) * 3).astype(np.float32)
            noised = voi.copy()
            noised[16:48, 16:48, 16:48] = noise
            vois.append((voi, noised))
            nodules.append(nodule)
            tiles32.append(tile_cache[it.label])
            tiles64.append(voi_tile_cache[it.label])

        voi_t = torch.from_numpy(np.stack([v for v, _ in vois]))[:, None]
        noised_t = torch.from_numpy(np.stack([n for _, n in vois]))[:, None]
        x_in = torch.cat([noised_t, torch.from_numpy(np.stack(tiles64).copy())], dim=1)
        real_nodule_t = torch.from_numpy(np.stack(nodules))[:, None]
        cond32_t = torch.from_numpy(np.stack(tiles32))
        flipped = (step % config.label_flip_period) == (config.label_flip_period - 1)

        fake = generator(x_in)
        comp_fake = composite_batch(voi_t, fake)

        # context discriminator (least squares), targets swapped on flip steps
        scores_real = d_context(voi_t)
        scores_fake = d_context(comp_fake.detach())
        if flipped:
            d1_loss = lsgan_d_loss(d_real=scores_fake, d_fake=scores_real)
        else:
            d1_loss = lsgan_d_loss(d_real=scores_real, d_fake=scores_fake)
        opt_d1.zero_grad()
        d1_loss.backward()
        opt_d1.step()

        # nodule critic (Wasserstein + gradient penalty)
        real_in = torch.cat([real_nodule_t, cond32_t], dim=1)
        fake_in = torch.cat([fake.detach(), cond32_t], dim=1)
        if flipped:
            d2_loss = wgan_gp_d_loss(d_nodule, fake_in, real_in,
                                     gp_weight=config.gp_weight, rng_seed=eps_gen)
        else:
            d2_loss = wgan_gp_d_loss(d_nodule, real_in, fake_in,
                                     gp_weight=config.gp_weight, rng_seed=eps_gen)
        opt_d2.zero_grad()
        d2_loss.backward()
        opt_d2.step()

        # generator
        g_lsgan = lsgan_g_loss(d_context(comp_fake))
        g_wgan = wgan_g_loss(d_nodule(torch.cat([fake, cond32_t], dim=1)))
        l1 = l1_term(fake, real_nodule_t)
        g_loss = generator_objective(config.mode, g_lsgan, g_wgan,
                                     l1 if config.mode == "with_l1" else None)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        values = (d1_loss.item(), d2_loss.item(), g_loss.item(), l1.item())
        if not all(math.isfinite(v) for v in values):
            snapshot = out_dir / f"diagnostic_step{step:08d}.pt"
            _save_checkpoint(snapshot, generator, d_context, d_nodule, config, step)
            (out_dir / "loss_log.csv").write_text("\n".join(log_rows) + "\n")
            raise NonFiniteLossError(
                f"non-finite loss at step {step}: d1={values[0]}, d2={values[1]}, "
                f"g={values[2]}", snapshot_path=snapshot)
        log_rows.append(
            f"{step},{values[0]:.6f},{values[1]:.6f},{values[2]:.6f},{values[3]:.6f},{int(flipped)}")

        if (step + 1) % checkpoint_every == 0 or step == config.total_steps - 1:
            final_path = out_dir / f"checkpoint_step{step + 1:08d}.pt"
            _save_checkpoint(final_path, generator, d_context, d_nodule, config, step + 1)

    (out_dir / "loss_log.csv").write_text("\n".join(log_rows) + "\n")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "mode": config.mode,
        "final_checkpoint": final_path.name,
        "total_steps": config.total_steps,
    }
    (out_dir / "MANIFEST.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return final_path


def _save_checkpoint(path: Path, generator, d_context, d_nodule,
                     config: TrainConfig, step: int) -> None:
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "channel_order": list(CHANNEL_ORDER),
        "mode": config.mode,
        "gp_weight": config.gp_weight,
        "step": step,
        "config": config.__dict__,
        "generator": generator.state_dict(),
        "context_discriminator": d_context.state_dict(),
        "nodule_critic": d_nodule.state_dict(),
    }, path)


@dataclass
class GanCheckpoint:
    generator: NoduleGenerator
    mode: str
    gp_weight: float
    step: int
    channel_order: tuple[str, ...]
    config: TrainConfig

    @staticmethod
    def load(path: str | Path) -> "GanCheckpoint":
        blob = torch.load(Path(path), weights_only=False)
        if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConsistencyError(
                f"checkpoint format {blob.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}")
        if tuple(blob["channel_order"]) != CHANNEL_ORDER:
            raise ConsistencyError(
                f"checkpoint channel order {blob['channel_order']} does not match this build")
        cfg_dict = dict(blob["config"])
        cfg_dict["intensity_range"] = tuple(cfg_dict["intensity_range"])
        config = TrainConfig(**cfg_dict)
        generator = NoduleGenerator(GeneratorSpec(base_channels=config.base_channels,
                                                  intensity_range=config.intensity_range))
        generator.load_state_dict(blob["generator"])
        generator.eval()
        return GanCheckpoint(
            generator=generator, mode=blob["mode"], gp_weight=blob["gp_weight"],
            step=blob["step"], channel_order=tuple(blob["channel_order"]), config=config)


def synthesize_nodule(checkpoint: GanCheckpoint, volume: Volume,
                      request: SynthesisRequest) -> tuple[np.ndarray, Box3]:
    """Generate one nodule for a shifted/zoomed copy of a source annotation.

    Returns the 32-cube nodule at working resolution and its placement box
    in scan voxel coordinates.
    """
    placement = placement_box(request.annotation.box, request.shift, request.zoom)
    if placement.clip_to(volume.shape) != placement:
        raise OutOfBoundsError(
            f"placement {placement} escapes scan of shape {volume.shape}")
    surround = surrounding_box(placement)
    raw = crop_with_padding(volume, surround)
    voi = Voi(data=resize_trilinear(raw, (VOI_SIDE,) * 3),
              source_scan_id=volume.scan_id, source_origin=surround)
    noised = insert_noise_box(voi, request.seed)
    conditioned = assemble_input(noised, request.label)
    nodule = generator_forward(checkpoint.generator, conditioned)
    return nodule, placement


def synthesize_into_scan(checkpoint: GanCheckpoint, volume: Volume,
                         request: SynthesisRequest,
                         blend_config: BlendConfig = BlendConfig()) -> tuple[Volume, Box3]:
    """Synthesize, blend the seam, and write back at native resolution."""
    placement = placement_box(request.annotation.box, request.shift, request.zoom)
    if placement.clip_to(volume.shape) != placement:
        raise OutOfBoundsError(
            f"placement {placement} escapes scan of shape {volume.shape}")
    surround = surrounding_box(placement)
    raw = crop_with_padding(volume, surround)
    voi = Voi(data=resize_trilinear(raw, (VOI_SIDE,) * 3),
              source_scan_id=volume.scan_id, source_origin=surround)
    noised = insert_noise_box(voi, request.seed)
    conditioned = assemble_input(noised, request.label)
    nodule = generator_forward(checkpoint.generator, conditioned)
    composited = np.array(voi.data)
    composited[16:48, 16:48, 16:48] = nodule
    blended = blend_boundary(composited, voi.nodule_box, blend_config)
    out = finalize_synthetic(volume, voi, blended, blend_config.shell_depth)
    return out, placement


def build_augmented_dataset(checkpoint: GanCheckpoint, manifest: DatasetManifest,
                            ratio: int, seed: int, out_dir: str | Path,
                            blend_config: BlendConfig = BlendConfig()) -> DatasetManifest:
    """For each ratio unit, one synthetic copy of every training scan.

    Each copy replaces every annotated nodule with a synthesized one at a
    random shift/zoom within the augmentation bounds; annotations carry
    over onto the placement boxes. The returned manifest holds the real
    and synthetic training entries in shuffled order (val/test entries
    follow unchanged) and is also written to <out_dir>/manifest.json.
    """
    if ratio < 1:
        raise InvalidArgumentError(f"ratio must be >= 1, got {ratio}")
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)

    train_entries = require_split(manifest, "train")
    synthetic_entries: list[ScanEntry] = []
    for unit in range(ratio):
        for entry_idx, entry in enumerate(train_entries):
            volume = volume_io.load_volume(entry.path)
            rng = np.random.default_rng([seed, unit, entry_idx])
            new_id = f"{entry.scan_id}-syn{unit + 1}"
            working = Volume(data=np.array(volume.data), spacing=volume.spacing,
                             origin=volume.origin, intensity_range=volume.intensity_range,
                             background=volume.background, scan_id=new_id)
            new_anns: list[NoduleAnnotation] = []
            for ann in entry.nodules:
                label = ConditionLabel(ann.size_class, ann.attenuation_class)
                placed = None
                for _ in range(10):
                    shift = tuple(rng.uniform(-MAX_SHIFT_FRACTION, MAX_SHIFT_FRACTION, 3))
                    zoom = float(rng.uniform(*ZOOM_RANGE))
                    req = SynthesisRequest(
                        annotation=replace(ann, scan_id=new_id), label=label,
                        shift=shift, zoom=zoom, seed=int(rng.integers(0, 2 ** 31)))
                    try:
                        working, placed = synthesize_into_scan(
                            checkpoint, working, req, blend_config)
                        break
                    except OutOfBoundsError:
                        continue
                if placed is None:
                    # border nodule: keep the original voxels and annotation
                    new_anns.append(replace(ann, scan_id=new_id))
                    continue
                new_anns.append(replace(ann, scan_id=new_id, box=placed))
            path = volume_io.save_raw(working, vol_dir / f"{new_id}.f32")
            synthetic_entries.append(ScanEntry(
                scan_id=new_id, path=str(path), spacing_mm=entry.spacing_mm,
                n_slices=working.shape[0], split="train", nodules=tuple(new_anns),
                synthetic=True, source_scan_id=entry.scan_id))

    shuffled = shuffle_entries(list(train_entries) + synthetic_entries, seed)
    rest = [e for e in manifest.entries if e.split != "train"]
    out = DatasetManifest(tuple(shuffled + rest))
    out.save(out_dir / "manifest.json")
    return out


def shuffle_entries(entries: list[ScanEntry], seed: int) -> list[ScanEntry]:
    """Uniform seeded shuffle interleaving real and synthetic entries."""
    out = list(entries)
    np.random.default_rng([seed, 0xC0FFEE]).shuffle(out)
    return out


def assert_loss_log_ordered(path: str | Path) -> None:
    """Loss-log rows must be strictly increasing in step index."""
    lines = Path(path).read_text().strip().splitlines()
    steps = [int(line.split(",", 1)[0]) for line in lines[1:]]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ConsistencyError(f"loss log {path} is not strictly increasing in step")
