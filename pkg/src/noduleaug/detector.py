"""Anchor-based 3D region-proposal detector.

A single-stage proposal network: a stride-8 convolutional backbone over
the input volume, one objectness logit and six box deltas per anchor.
Detection quality is measured downstream by FROC/CPM; this detector's
job is to turn augmented training sets into comparable scored boxes.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataset import DatasetManifest
from .errors import ConfigurationError, InvalidArgumentError
from .evaluation import Detection, match_detections
from .volume import Box3, Volume, resize_trilinear
from . import volume_io

TOTAL_STRIDE = 8


@dataclass(frozen=True)
class DetectorConfig:
    input_shape: tuple[int, int, int] = (64, 64, 96)
    base_channels: int = 16
    extra_blocks: int = 2  # stride-1 blocks appended to the stride-8 stem
    anchor_sizes: tuple[int, ...] = (8, 16, 32)
    pos_iou: float = 0.5
    neg_iou: float = 0.1
    nms_iou: float = 0.1
    detection_threshold: float = 0.5
    batch_size: int = 2
    learning_rate: float = 1.0e-3
    lr_drop_step: int = 20_000
    learning_rate_after_drop: float = 1.0e-4
    momentum: float = 0.9
    total_steps: int = 40_000
    val_window: tuple[int, int] = (30_000, 40_000)
    val_every: int = 2_000
    da_shift: float = 0.15
    da_zoom: float = 0.15
    anchors_per_volume: int = 64
    seed: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.anchor_sizes) or list(self.anchor_sizes) != sorted(self.anchor_sizes):
            raise InvalidArgumentError(f"anchor sizes must be positive ascending, got {self.anchor_sizes}")
        for name in ("pos_iou", "neg_iou", "nms_iou", "detection_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {v}")
        if any(s % TOTAL_STRIDE for s in self.input_shape):
            raise InvalidArgumentError(
                f"input shape must be divisible by {TOTAL_STRIDE}, got {self.input_shape}")


class RpnDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels

        def block(i, o, stride):
            return nn.Sequential(
                nn.Conv3d(i, o, 3, stride, 1), nn.BatchNorm3d(o), nn.ReLU(inplace=True))

        # downsample immediately; refinement blocks run on the stride-8 grid
        layers = [block(1, c, 2), block(c, c * 2, 2), block(c * 2, c * 4, 2)]
        for _ in range(config.extra_blocks):
            layers.append(block(c * 4, c * 4, 1))
        self.backbone = nn.Sequential(*layers)
        a = len(config.anchor_sizes)
        self.cls_head = nn.Conv3d(c * 4, a, 1)
        self.reg_head = nn.Conv3d(c * 4, a * 6, 1)
        nn.init.constant_(self.cls_head.bias, -2.0)  # start near background

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.backbone(x)
        return self.cls_head(feats), self.reg_head(feats)


def feature_grid_shape(input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    return tuple(s // TOTAL_STRIDE for s in input_shape)


def generate_anchors(config: DetectorConfig,
                     input_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """(N, 6) int boxes, one per (anchor size, feature cell), clipped.

    Flattened in head layout order: anchor size first, then z, y, x cell.
    """
    shape = input_shape or config.input_shape
    grid = feature_grid_shape(shape)
    anchors = []
    for side in config.anchor_sizes:
        for z in range(grid[0]):
            for y in range(grid[1]):
                for x in range(grid[2]):
                    center = ((z + 0.5) * TOTAL_STRIDE, (y + 0.5) * TOTAL_STRIDE,
                              (x + 0.5) * TOTAL_STRIDE)
                    mn = [int(round(center[i] - side / 2.0)) for i in range(3)]
                    mx = [m + side for m in mn]
                    mn = [max(0, min(mn[i], shape[i] - 1)) for i in range(3)]
                    mx = [max(mn[i] + 1, min(mx[i], shape[i])) for i in range(3)]
                    anchors.append(mn + mx)
    return np.asarray(anchors, dtype=np.int64)


def _pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix for (N, 6) x (M, 6) half-open integer boxes."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    lo = np.maximum(boxes_a[:, None, :3], boxes_b[None, :, :3])
    hi = np.minimum(boxes_a[:, None, 3:], boxes_b[None, :, 3:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=2)
    vol_a = np.prod(boxes_a[:, 3:] - boxes_a[:, :3], axis=1)
    vol_b = np.prod(boxes_b[:, 3:] - boxes_b[:, :3], axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    return inter / union


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                   config: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor labels {1 positive, 0 negative, -1 ignore} + regression deltas.

    Positive: IoU >= pos_iou with some ground truth, or being a ground
    truth's best anchor (so every ground truth trains at least one anchor).
    Negative: best IoU < neg_iou. Deltas are center offsets over anchor
    side and log size ratios against the matched ground truth.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    deltas = np.zeros((n, 6), dtype=np.float32)
    if len(gt_boxes) == 0:
        return labels, deltas

    ious = _pairwise_iou(anchors.astype(np.float64), gt_boxes.astype(np.float64))
    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)

    labels[:] = -1
    labels[best_iou < config.neg_iou] = 0
    labels[best_iou >= config.pos_iou] = 1
    # argmax fallback: the best anchor of each ground truth is positive
    for j in range(len(gt_boxes)):
        i = int(ious[:, j].argmax())
        labels[i] = 1
        best_gt[i] = j

    pos = np.flatnonzero(labels == 1)
    a = anchors[pos].astype(np.float64)
    g = gt_boxes[best_gt[pos]].astype(np.float64)
    a_center = (a[:, :3] + a[:, 3:]) / 2.0
    g_center = (g[:, :3] + g[:, 3:]) / 2.0
    a_size = a[:, 3:] - a[:, :3]
    g_size = g[:, 3:] - g[:, :3]
    deltas[pos, :3] = ((g_center - a_center) / a_size).astype(np.float32)
    deltas[pos, 3:] = np.log(g_size / a_size).astype(np.float32)
    return labels, deltas


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray,
                 clip_shape: tuple[int, int, int]) -> np.ndarray:
    a = anchors.astype(np.float64)
    a_center = (a[:, :3] + a[:, 3:]) / 2.0
    a_size = a[:, 3:] - a[:, :3]
    center = a_center + deltas[:, :3] * a_size
    size = a_size * np.exp(np.clip(deltas[:, 3:], -4.0, 4.0))
    mn = np.round(center - size / 2.0).astype(np.int64)
    mx = np.round(center + size / 2.0).astype(np.int64)
    mn = np.clip(mn, 0, np.asarray(clip_shape) - 1)
    mx = np.clip(mx, 1, np.asarray(clip_shape))
    mx = np.maximum(mx, mn + 1)
    return np.concatenate([mn, mx], axis=1)


def detector_loss(cls_logits: torch.Tensor, reg_outputs: torch.Tensor,
                  labels: np.ndarray, reg_targets: np.ndarray,
                  rng: np.random.Generator,
                  n_sample: int = 64) -> torch.Tensor:
    """Balanced binary cross-entropy + smooth-L1 over sampled anchors (1:1).

    cls_logits: (N,) anchor logits; reg_outputs: (N, 6). Ignored anchors
    never contribute; regression runs on the sampled positives only.
    """
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), n_sample // 2)
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), max(n_sample - len(pos), len(pos)))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    picked = np.concatenate([pos, neg]).astype(np.int64)
    if picked.size == 0:
        warnings.warn("no anchors available for the loss; returning zero")
        return cls_logits.sum() * 0.0

    idx = torch.from_numpy(picked)
    target = torch.from_numpy((labels[picked] == 1).astype(np.float32))
    cls_loss = nn.functional.binary_cross_entropy_with_logits(cls_logits[idx], target)
    if len(pos):
        pos_idx = torch.from_numpy(pos.astype(np.int64))
        reg_t = torch.from_numpy(reg_targets[pos])
        reg_loss = nn.functional.smooth_l1_loss(reg_outputs[pos_idx], reg_t)
    else:
        reg_loss = cls_logits.sum() * 0.0
    return cls_loss + reg_loss


def nms(boxes: list[Box3] | np.ndarray, scores: list[float] | np.ndarray,
        iou_threshold: float) -> list[int]:
    """Greedy descending-score suppression; returns kept indices.

    Ties break toward the lower input index, so the result is invariant
    to input permutation under strict ordering.
    """
    if len(boxes) != len(scores):
        raise InvalidArgumentError(f"{len(boxes)} boxes vs {len(scores)} scores")
    box_list = [b if isinstance(b, Box3) else Box3(tuple(b[:3]), tuple(b[3:])) for b in boxes]
    order = sorted(range(len(box_list)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(_box_iou(box_list[i], box_list[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def _box_iou(a: Box3, b: Box3) -> float:
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    iv = inter.volume
    return iv / float(a.volume + b.volume - iv)


def _pad_to_stride(volume: Volume) -> tuple[np.ndarray, tuple[int, int, int]]:
    shape = volume.shape
    padded_shape = tuple(int(math.ceil(s / TOTAL_STRIDE)) * TOTAL_STRIDE for s in shape)
    if padded_shape == shape:
        return np.array(volume.data), padded_shape
    out = np.full(padded_shape, volume.background, dtype=np.float32)
    out[:shape[0], :shape[1], :shape[2]] = volume.data
    return out, padded_shape


def infer(model: RpnDetector, volume: Volume,
          config: DetectorConfig | None = None) -> list[Detection]:
    """Threshold + NMS over the model's scored anchors, descending by score."""
    config = config or model.config
    if any(s < TOTAL_STRIDE * 2 for s in volume.shape):
        raise InvalidArgumentError(
            f"scan shape {volume.shape} below the network minimum {TOTAL_STRIDE * 2} per axis")
    data, padded_shape = _pad_to_stride(volume)
    anchors = generate_anchors(config, padded_shape)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            cls, reg = model(torch.from_numpy(data)[None, None])
    finally:
        model.train(was_training)
    # flatten in anchor-major order, matching generate_anchors
    scores = torch.sigmoid(cls)[0].reshape(-1).numpy()
    a = len(config.anchor_sizes)
    reg_np = reg[0].reshape(a, 6, -1).permute(0, 2, 1).reshape(-1, 6).numpy()

    keep = scores >= config.detection_threshold
    if not keep.any():
        return []
    boxes = decode_boxes(anchors[keep], reg_np[keep], volume.shape)
    kept_scores = scores[keep]
    order = nms(boxes, kept_scores, config.nms_iou)
    dets = [
        Detection(scan_id=volume.scan_id or "", score=float(min(kept_scores[i], 1.0)),
                  box=Box3(tuple(boxes[i, :3]), tuple(boxes[i, 3:])))
        for i in order
    ]
    return dets


def write_detections_csv(path: str | Path, dets: list[Detection]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "z0", "y0", "x0", "z1", "y1", "x1", "score"])
        for d in dets:
            writer.writerow([d.scan_id, *d.box.as_list(), f"{d.score:.6f}"])
    return path


def read_detections_csv(path: str | Path) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Detection(
                scan_id=row["scan_id"],
                box=Box3((int(row["z0"]), int(row["y0"]), int(row["x0"])),
                         (int(row["z1"]), int(row["y1"]), int(row["x1"]))),
                score=float(row["score"])))
    return out


# ------------------------------------------------------------------ training

def _augment_sample(volume: Volume, boxes: np.ndarray, config: DetectorConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random shift/zoom crop onto the network input shape.

    A window of input_shape / zoom is cut around the jittered center and
    resized to input_shape; boxes map through the same affine and are
    clipped, dropping those that leave the window.
    """
    shape = volume.shape
    target = config.input_shape
    zoom = 1.0 + rng.uniform(-config.da_zoom, config.da_zoom) if config.da_zoom else 1.0
    window = tuple(min(shape[i], int(round(target[i] / zoom))) for i in range(3))
    mins = []
    for i in range(3):
        center = shape[i] / 2.0
        if config.da_shift:
            center += rng.uniform(-config.da_shift, config.da_shift) * shape[i]
        mn = int(round(center - window[i] / 2.0))
        mins.append(max(0, min(mn, shape[i] - window[i])))
    window_box = Box3(tuple(mins), tuple(mins[i] + window[i] for i in range(3)))
    crop = volume.data[window_box.min_corner[0]:window_box.max_corner[0],
                       window_box.min_corner[1]:window_box.max_corner[1],
                       window_box.min_corner[2]:window_box.max_corner[2]]
    scale = [target[i] / window[i] for i in range(3)]
    data = resize_trilinear(crop, target) if crop.shape != target else crop.copy()

    out_boxes = []
    for b in boxes:
        mn = [(b[i] - window_box.min_corner[i]) * scale[i] for i in range(3)]
        mx = [(b[3 + i] - window_box.min_corner[i]) * scale[i] for i in range(3)]
        mn = [int(round(v)) for v in mn]
        mx = [int(round(v)) for v in mx]
        mn = [max(0, min(mn[i], target[i] - 1)) for i in range(3)]
        mx = [max(mn[i] + 1, min(mx[i], target[i])) for i in range(3)]
        orig_vol = np.prod(b[3:] - b[:3]) * np.prod(scale)
        new_vol = np.prod([mx[i] - mn[i] for i in range(3)])
        if new_vol >= 0.25 * orig_vol:  # drop boxes mostly outside the window
            out_boxes.append(mn + mx)
    return data, np.asarray(out_boxes, dtype=np.int64).reshape(-1, 6)


def _flat_outputs(cls: torch.Tensor, reg: torch.Tensor, n_anchor_sizes: int
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    cls_flat = cls.reshape(n_anchor_sizes, -1).reshape(-1)
    reg_flat = reg.reshape(n_anchor_sizes, 6, -1).permute(0, 2, 1).reshape(-1, 6)
    return cls_flat, reg_flat


@dataclass
class _TrainItem:
    volume: Volume
    boxes: np.ndarray
    synthetic: bool


def _load_items(manifest: DatasetManifest, split: str, base_dir: Path | None) -> list[_TrainItem]:
    items = []
    for entry in manifest.split_entries(split):
        path = Path(entry.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        vol = volume_io.load_volume(path)
        boxes = np.asarray([n.box.as_list() for n in entry.nodules], dtype=np.int64).reshape(-1, 6)
        items.append(_TrainItem(volume=vol, boxes=boxes, synthetic=entry.synthetic))
    return items


def training_sensitivity(model: RpnDetector, items: list[_TrainItem],
                         config: DetectorConfig, iou_threshold: float = 0.25) -> float:
    """Fraction of ground truths hit at the configured detection threshold."""
    hit = total = 0
    for item in items:
        if len(item.boxes) == 0:
            continue
        dets = infer(model, item.volume, config)
        gt = [Box3(tuple(b[:3]), tuple(b[3:])) for b in item.boxes]
        _, _, gt_hit = match_detections(dets, gt, iou_threshold)
        hit += sum(gt_hit)
        total += len(gt)
    return hit / total if total else 0.0


def train_detector(manifest: DatasetManifest, config: DetectorConfig,
                   out_dir: str | Path, base_dir: str | Path | None = None,
                   log_every: int = 50) -> Path:
    """Train on the train split; keep the checkpoint with the best validation
    sensitivity inside the configured window (final weights if none measured).

    Writes <out_dir>/detector.pt and <out_dir>/train_log.csv (step, loss, lr).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_dir = Path(base_dir) if base_dir is not None else None

    train_items = _load_items(manifest, "train", base_dir)
    if not train_items:
        raise ConfigurationError("manifest has no scans in the 'train' split")
    val_items = _load_items(manifest, "val", base_dir)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = RpnDetector(config)
    anchors = generate_anchors(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                momentum=config.momentum)

    # real/synthetic entries are drawn through a reshuffled epoch order
    order: list[int] = []
    best_state = None
    best_sens = -1.0
    log_rows = ["step,loss,lr"]
    model.train()
    for step in range(config.total_steps):
        lr = config.learning_rate if step < config.lr_drop_step else config.learning_rate_after_drop
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch_idx = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(train_items)))
            batch_idx.append(order.pop())

        volumes, labels_list, deltas_list = [], [], []
        for i in batch_idx:
            data, boxes = _augment_sample(train_items[i].volume, train_items[i].boxes,
                                          config, rng)
            labels, deltas = assign_targets(anchors, boxes, config)
            volumes.append(data)
            labels_list.append(labels)
            deltas_list.append(deltas)

        x = torch.from_numpy(np.stack(volumes))[:, None]
        cls, reg = model(x)
        losses = []
        for b in range(len(batch_idx)):
            cls_flat, reg_flat = _flat_outputs(cls[b], reg[b], len(config.anchor_sizes))
            losses.append(detector_loss(cls_flat, reg_flat, labels_list[b],
                                        deltas_list[b], rng,
                                        n_sample=config.anchors_per_volume))
        loss = torch.stack(losses).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step % log_every == 0 or step == config.total_steps - 1 \
                or step + 1 == config.lr_drop_step or step == config.lr_drop_step:
            log_rows.append(f"{step},{loss.item():.6f},{lr:g}")

        in_window = config.val_window[0] <= step + 1 <= config.val_window[1]
        if val_items and in_window and (step + 1) % config.val_every == 0:
            sens = training_sensitivity(model, val_items, config)
            if sens > best_sens:
                best_sens = sens
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            model.train()

    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt_path = out_dir / "detector.pt"
    torch.save({
        "format_version": 1,
        "config": config.__dict__,
        "state_dict": model.state_dict(),
        "best_val_sensitivity": best_sens if best_sens >= 0 else None,
    }, ckpt_path)
    (out_dir / "train_log.csv").write_text("\n".join(log_rows) + "\n")
    return ckpt_path


def load_detector(path: str | Path) -> RpnDetector:
    blob = torch.load(path, weights_only=False)
    cfg_dict = dict(blob["config"])
    cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
    cfg_dict["anchor_sizes"] = tuple(cfg_dict["anchor_sizes"])
    cfg_dict["val_window"] = tuple(cfg_dict["val_window"])
    config = DetectorConfig(**cfg_dict)
    model = RpnDetector(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
