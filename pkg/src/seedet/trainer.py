"""Training, inference and report-side evaluation glue.

Determinism scheme: every stochastic choice draws from its own generator
derived from (config.seed, purpose tag, step, slot), so results do not
depend on scheduling or on how many workers a host has. A checkpoint
therefore only needs the seed and the step counter to describe the RNG
state exactly; `Checkpoint.meta["rng_state"]` records that.
"""

from __future__ import annotations

import ctypes
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import assign_label_codes, decode_array, encode_array, generate_anchor_array, nms_array
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    NoduleAnnotation,
    PatchSample,
    Volume,
    augment,
    extract_train_patch,
    preprocess,
    read_annotations,
    read_vol3,
    tile_test_patches,
)
from .evaluation import Candidate
from .losses import LossBreakdown, LossParams, classification_weights, detection_loss
from .network import DetectorNet, build_network
from .tensor import Tensor

# purpose tags for derived RNG streams
_RNG_SAMPLE = 11
_RNG_NEGPICK = 13


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


try:
    _LIBC = ctypes.CDLL("libc.so.6", use_errno=True)
except OSError:  # non-glibc platform
    _LIBC = None


def _trim_allocator() -> None:
    """Hand freed arena pages back to the OS (glibc only, no-op elsewhere).

    Training churns through many activation-sized buffers per step; glibc
    retains them on free lists, and over hundreds of steps that retention
    looks like a leak and can exhaust small machines. A trim per step keeps
    the resident set flat.
    """
    if _LIBC is not None:
        try:
            _LIBC.malloc_trim(0)
        except AttributeError:
            pass


# -- target construction ------------------------------------------------------


def anchors_for_grid(grid_shape: tuple[int, int, int], config: RunConfig) -> np.ndarray:
    return generate_anchor_array(grid_shape, config.anchor_stride, config.anchor_sizes)


def annotations_to_boxes(annotations: Sequence[NoduleAnnotation]) -> np.ndarray:
    """[G,4] array (cx, cy, cz, r) from annotation records."""
    if not annotations:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array(
        [[a.x, a.y, a.z, a.diameter / 2.0] for a in annotations], dtype=np.float64
    )


def build_targets(
    annotations: Sequence[NoduleAnnotation],
    grid_shape: tuple[int, int, int],
    config: RunConfig,
    anchors: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels [A,Z,Y,X] (1/0/-1) and offsets [A,4,Z,Y,X] for one patch.

    Anchor k of the flat (z, y, x, slot) order maps to grid cell
    (k // A) and slot (k % A); the reshape/transpose below inverts that so
    the arrays line up with [N, A, ...] network outputs.
    """
    gz, gy, gx = grid_shape
    a = len(config.anchor_sizes)
    if anchors is None:
        anchors = anchors_for_grid(grid_shape, config)
    gts = annotations_to_boxes(annotations)
    codes = assign_label_codes(
        anchors, gts, config.iou_pos, config.iou_neg, config.force_closest_match
    )
    labels_flat = np.where(codes >= 0, 1, np.where(codes == -1, 0, -1)).astype(np.int8)
    targets_flat = np.zeros((anchors.shape[0], 4), dtype=np.float64)
    pos = np.flatnonzero(codes >= 0)
    if pos.size:
        targets_flat[pos] = encode_array(gts[codes[pos]], anchors[pos])
    labels = labels_flat.reshape(gz, gy, gx, a).transpose(3, 0, 1, 2)
    targets = targets_flat.reshape(gz, gy, gx, a, 4).transpose(3, 4, 0, 1, 2)
    return np.ascontiguousarray(labels), np.ascontiguousarray(targets)


def split_outputs(out: Tensor, num_anchors: int) -> tuple[Tensor, Tensor]:
    """[N, A*5, Z, Y, X] -> probabilities [N,A,Z,Y,X] and offsets [N,A,4,Z,Y,X]."""
    n, c, gz, gy, gx = out.data.shape
    if c != num_anchors * 5:
        raise ValueError(f"expected {num_anchors * 5} channels, got {c}")
    r5 = T.reshape(out, (n, num_anchors, 5, gz, gy, gx))
    return r5[:, :, 0], r5[:, :, 1:5]


# -- optimizer ----------------------------------------------------------------


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    velocity = momentum * velocity + grad + weight_decay * param
    param   -= lr * velocity
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self) -> None:
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: v for name, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            if name in state:
                v[...] = np.asarray(state[name]).astype(v.dtype, copy=False)


# -- dataset ------------------------------------------------------------------


@dataclass
class ScanRecord:
    volume: Volume  # preprocessed
    annotations: list[NoduleAnnotation]


def load_dataset(data_dir, config: RunConfig) -> list[ScanRecord]:
    """Read every .vol3 under data_dir plus annotations.csv, preprocess."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    vol_paths = sorted(p for p in root.glob("*.vol3") if not p.name.endswith(".mask.vol3"))
    if not vol_paths:
        raise FileNotFoundError(f"no .vol3 volumes in {root}")
    ann_path = root / "annotations.csv"
    annotations = read_annotations(ann_path) if ann_path.exists() else []
    by_scan: dict[str, list[NoduleAnnotation]] = {}
    for a in annotations:
        by_scan.setdefault(a.scan_id, []).append(a)
    records = []
    for p in vol_paths:
        scan_id = p.stem
        raw = Volume(scan_id, read_vol3(p))
        vol = preprocess(raw, config.clip_lo, config.clip_hi)
        vol = Volume(scan_id, vol.data.astype(_np_dtype(config.dtype)))
        records.append(ScanRecord(vol, by_scan.get(scan_id, [])))
    return records


def _np_dtype(name: str):
    return np.float32 if name == "float32" else np.float64


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Optional[str]
    log_path: Optional[str]
    steps: int
    final_loss: float
    loss_log: list[tuple[int, LossBreakdown]]


def sample_batch(
    records: Sequence[ScanRecord], step: int, config: RunConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one deterministic training batch.

    Returns (x [N,1,D,H,W], labels [N,A,Z,Y,X], targets [N,A,4,Z,Y,X]).
    """
    p = config.train_patch
    grid = (p // config.anchor_stride,) * 3
    anchors = anchors_for_grid(grid, config)
    xs, labels, targets = [], [], []
    for slot in range(config.batch_size):
        rng = _stream(config.seed, _RNG_SAMPLE, step, slot)
        rec = records[int(rng.integers(0, len(records)))]
        sample = extract_train_patch(
            rec.volume, rec.annotations, p, rng, config.nodule_patch_prob
        )
        if config.augment_enabled:
            sample = augment(
                sample,
                rng,
                flip_prob=config.flip_prob,
                scale_range=(config.scale_min, config.scale_max),
            )
        lab, tgt = build_targets(sample.annotations, grid, config, anchors)
        xs.append(sample.data[None, ...])
        labels.append(lab)
        targets.append(tgt)
    dtype = _np_dtype(config.dtype)
    x = np.stack(xs).astype(dtype)
    return x, np.stack(labels), np.stack(targets)


def loss_for_batch(
    net: DetectorNet,
    x: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    config: RunConfig,
    step: int,
) -> tuple[Tensor, LossBreakdown]:
    params = LossParams(
        alpha=config.focal_alpha, gamma=config.focal_gamma, plain_ce=not config.uses_focal
    )
    out = net.forward(Tensor(x))
    prob, deltas = split_outputs(out, config.network.num_anchors)
    weights = classification_weights(
        labels, params, _stream(config.seed, _RNG_NEGPICK, step)
    )
    return detection_loss(prob, deltas, labels, targets, params, weights)


def train(
    config: RunConfig,
    data_dir,
    out_checkpoint: Optional[str] = None,
    log_path: Optional[str] = None,
    progress: Optional[Callable[[int, int, LossBreakdown], None]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Full training run; returns the loss log and writes the checkpoint.

    Steps = epochs * ceil(n_volumes / batch_size), capped by `max_steps`.
    The loss log CSV has one row per step:
    step,cls,reg,total,n_pos,n_neg.
    """
    config.validate()
    records = load_dataset(data_dir, config)
    dtype = _np_dtype(config.dtype)
    net = build_network(config.network, seed=config.seed, dtype=dtype)
    net.train()
    opt = SGD(
        list(net.named_parameters()),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    steps = config.epochs * math.ceil(len(records) / config.batch_size)
    if max_steps is not None:
        steps = min(steps, max_steps)

    # fail on an unwritable destination now, not after a long run
    for out in (out_checkpoint, log_path):
        if out:
            Path(out).parent.mkdir(parents=True, exist_ok=True)

    log_rows: list[tuple[int, LossBreakdown]] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        if log_file:
            log_file.write("step,cls,reg,total,n_pos,n_neg\n")
        for step in range(steps):
            x, labels, targets = sample_batch(records, step, config)
            T.clear_tape()
            net.zero_grad()
            loss, breakdown = loss_for_batch(net, x, labels, targets, config, step)
            T.backward(loss, free_tape=True)
            opt.step()
            T.clear_tape()
            _trim_allocator()
            log_rows.append((step, breakdown))
            if log_file and step % max(1, config.log_every) == 0:
                log_file.write(
                    f"{step},{breakdown.cls!r},{breakdown.reg!r},{breakdown.total!r},"
                    f"{breakdown.n_pos},{breakdown.n_neg}\n"
                )
            if progress is not None:
                progress(step, steps, breakdown)
            if (
                out_checkpoint
                and config.checkpoint_every
                and step
                and step % config.checkpoint_every == 0
            ):
                _save(net, config, step, f"{out_checkpoint}.step{step}")
        T.clear_tape()
    finally:
        if log_file:
            log_file.close()
    if out_checkpoint:
        _save(net, config, steps, out_checkpoint)
    return TrainResult(
        checkpoint_path=out_checkpoint,
        log_path=log_path,
        steps=steps,
        final_loss=log_rows[-1][1].total if log_rows else float("nan"),
        loss_log=log_rows,
    )


def _save(net: DetectorNet, config: RunConfig, step: int, path) -> None:
    meta = {
        "kind": "seedet-checkpoint",
        "config": config.to_dict(),
        "step": int(step),
        "rng_state": {"scheme": "derived-streams", "seed": int(config.seed), "next_step": int(step)},
    }
    params = {name: arr.copy() for name, arr in net.state_dict().items()}
    save_checkpoint(path, params, meta)


def restore(path) -> tuple[DetectorNet, RunConfig, Checkpoint]:
    """Rebuild a network from a training checkpoint."""
    ckpt = load_checkpoint(path)
    if "config" not in ckpt.meta:
        raise ValueError(f"{path} has no run config; was it saved by train()?")
    config = RunConfig.from_dict(ckpt.meta["config"])
    net = build_network(config.network, seed=config.seed, dtype=_np_dtype(config.dtype))
    net.load_state_dict(ckpt.params)
    net.eval()
    return net, config, ckpt


# -- inference ----------------------------------------------------------------


def detect_volume(
    net: DetectorNet, volume: Volume, config: RunConfig, preprocessed: bool = False
) -> list[Candidate]:
    """Tile a scan, run the network, decode and fuse candidates.

    Returns candidates sorted by descending probability, at most
    config.max_candidates_per_scan, positions clamped into the scan bounds.
    """
    vol = volume if preprocessed else preprocess(volume, config.clip_lo, config.clip_hi)
    data = vol.data.astype(_np_dtype(config.dtype))
    patches = tile_test_patches(Volume(vol.scan_id, data), config.eval_patch, config.eval_overlap)
    net.eval()
    all_boxes, all_probs = [], []
    s = config.anchor_stride
    grid = (config.eval_patch // s,) * 3
    anchors = anchors_for_grid(grid, config)
    with T.no_grad():
        for sample in patches:
            x = Tensor(sample.data[None, None, ...])
            out = net.forward(x)
            prob_t, deltas_t = split_outputs(out, config.network.num_anchors)
            probs = prob_t.data[0].transpose(1, 2, 3, 0).reshape(-1)
            deltas = deltas_t.data[0].transpose(2, 3, 4, 0, 1).reshape(-1, 4)
            sel = np.flatnonzero(probs >= config.prob_threshold)
            if sel.size == 0:
                continue
            boxes = decode_array(anchors[sel], deltas[sel])
            ox, oy, oz = sample.origin
            boxes[:, 0] += ox
            boxes[:, 1] += oy
            boxes[:, 2] += oz
            all_boxes.append(boxes)
            all_probs.append(probs[sel].astype(np.float64))
    if not all_boxes:
        return []
    boxes = np.concatenate(all_boxes)
    probs = np.concatenate(all_probs)
    keep = nms_array(boxes, probs, config.nms_iou)[: config.max_candidates_per_scan]
    xdim, ydim, zdim = volume.dims_xyz
    out_list = []
    for i in keep:
        cx = float(np.clip(boxes[i, 0], 0.0, xdim - 1.0))
        cy = float(np.clip(boxes[i, 1], 0.0, ydim - 1.0))
        cz = float(np.clip(boxes[i, 2], 0.0, zdim - 1.0))
        out_list.append(Candidate(vol.scan_id, cx, cy, cz, float(probs[i])))
    return out_list


def detect_dataset(net: DetectorNet, data_dir, config: RunConfig) -> list[Candidate]:
    records = load_dataset(data_dir, config)
    out: list[Candidate] = []
    for rec in records:
        out.extend(detect_volume(net, rec.volume, config, preprocessed=True))
        _trim_allocator()
    return out
