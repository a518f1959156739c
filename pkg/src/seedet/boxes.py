"""Cubic boxes, anchor grids, IoU, target encoding and NMS.

Boxes are cubes: a center (cx, cy, cz) in voxel coordinates plus a radius
(half the side length). External coordinates are always ordered x, y, z
even though volume arrays are indexed [z, y, x].

Array-based helpers (`*_array`) operate on [K, 4] float arrays laid out as
columns (cx, cy, cz, r); the scalar Box3 API delegates to them so both
paths cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.02


@dataclass(frozen=True)
class Box3:
    cx: float
    cy: float
    cz: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"box radius must be positive, got {self.r}")

    @property
    def side(self) -> float:
        return 2.0 * self.r

    @property
    def volume(self) -> float:
        return self.side**3

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.r], dtype=np.float64)


def boxes_to_array(boxes: Sequence[Box3]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [K,4] and [G,4] cube arrays -> [K,G]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lo_a, hi_a = a[:, :3] - a[:, 3:4], a[:, :3] + a[:, 3:4]
    lo_b, hi_b = b[:, :3] - b[:, 3:4], b[:, :3] + b[:, 3:4]
    inter_side = np.minimum(hi_a[:, None, :], hi_b[None, :, :]) - np.maximum(
        lo_a[:, None, :], lo_b[None, :, :]
    )
    inter = np.prod(np.clip(inter_side, 0.0, None), axis=2)
    vol_a = (2.0 * a[:, 3]) ** 3
    vol_b = (2.0 * b[:, 3]) ** 3
    union = vol_a[:, None] + vol_b[None, :] - inter
    return inter / union


def iou(a: Box3, b: Box3) -> float:
    """Intersection-over-union of two cubes."""
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def generate_anchor_array(
    grid_shape: tuple[int, int, int], stride: int, sizes: Sequence[float]
) -> np.ndarray:
    """All anchors for a (Gz, Gy, Gx) output grid as a [K, 4] array.

    Anchor k sits at the center of its stride cell,
    (gx + 0.5) * stride along x and likewise for y, z, with radius size/2.
    Order is (z, y, x, slot) row-major with the size slot fastest, i.e.
    k = ((gz * Gy + gy) * Gx + gx) * len(sizes) + slot.
    """
    gz, gy, gx = grid_shape
    sizes = np.asarray(sizes, dtype=np.float64)
    zz, yy, xx = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    centers = (np.stack([xx, yy, zz], axis=-1).reshape(-1, 3) + 0.5) * stride
    k = centers.shape[0]
    a = sizes.size
    out = np.empty((k * a, 4), dtype=np.float64)
    out[:, :3] = np.repeat(centers, a, axis=0)
    out[:, 3] = np.tile(sizes / 2.0, k)
    return out


def generate_anchors(
    grid_shape: tuple[int, int, int], stride: int, sizes: Sequence[float]
) -> list[Box3]:
    arr = generate_anchor_array(grid_shape, stride, sizes)
    return [Box3(*row) for row in arr]


def encode_box(gt: Box3, anchor: Box3) -> tuple[float, float, float, float]:
    """Offsets (dx, dy, dz, dr) that map `anchor` onto `gt`:
    d_axis = (gt_center - anchor_center) / anchor_radius, dr = ln(gt_r / anchor_r).
    """
    return (
        (gt.cx - anchor.cx) / anchor.r,
        (gt.cy - anchor.cy) / anchor.r,
        (gt.cz - anchor.cz) / anchor.r,
        float(np.log(gt.r / anchor.r)),
    )


def decode_box(anchor: Box3, deltas: Sequence[float]) -> Box3:
    dx, dy, dz, dr = (float(v) for v in deltas)
    return Box3(
        anchor.cx + dx * anchor.r,
        anchor.cy + dy * anchor.r,
        anchor.cz + dz * anchor.r,
        anchor.r * float(np.exp(dr)),
    )


def encode_array(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Row-wise encode_box for matched [K,4] gt / anchor arrays."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(gts)
    out[:, :3] = (gts[:, :3] - anchors[:, :3]) / anchors[:, 3:4]
    out[:, 3] = np.log(gts[:, 3] / anchors[:, 3])
    return out


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(anchors)
    out[:, :3] = anchors[:, :3] + deltas[:, :3] * anchors[:, 3:4]
    out[:, 3] = anchors[:, 3] * np.exp(deltas[:, 3])
    return out


# label codes for assign_label_codes
NEGATIVE = -1
IGNORED = -2


def assign_label_codes(
    anchors: np.ndarray,
    gts: np.ndarray,
    iou_pos: float = POSITIVE_IOU,
    iou_neg: float = NEGATIVE_IOU,
    force_closest: bool = True,
) -> np.ndarray:
    """Label every anchor: matched gt index (>= 0), NEGATIVE or IGNORED.

    An anchor is positive for the gt it overlaps most if that IoU exceeds
    iou_pos, negative if its best IoU is below iou_neg, ignored otherwise.
    With `force_closest`, every gt additionally claims its highest-IoU
    anchor (processed in ascending gt order, skipping anchors already
    forced by an earlier gt) so no nodule goes unsupervised.
    """
    k = anchors.shape[0]
    if gts.shape[0] == 0:
        return np.full(k, NEGATIVE, dtype=np.int64)
    ious = iou_matrix(anchors, gts)  # [K, G]
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(k), best_gt]
    codes = np.full(k, IGNORED, dtype=np.int64)
    codes[best_iou < iou_neg] = NEGATIVE
    pos = best_iou > iou_pos
    codes[pos] = best_gt[pos]
    if force_closest:
        forced: set[int] = set()
        for g in range(gts.shape[0]):
            order = np.argsort(-ious[:, g], kind="stable")
            for idx in order:
                if int(idx) not in forced:
                    codes[idx] = g
                    forced.add(int(idx))
                    break
    return codes


@dataclass(frozen=True)
class AnchorLabel:
    """Assignment outcome for one anchor."""

    kind: str  # "positive" | "negative" | "ignored"
    gt_index: Optional[int] = None


def assign_labels(
    anchors: Sequence[Box3],
    gts: Sequence[Box3],
    iou_pos: float = POSITIVE_IOU,
    iou_neg: float = NEGATIVE_IOU,
    force_closest: bool = True,
) -> list[AnchorLabel]:
    codes = assign_label_codes(
        boxes_to_array(anchors), boxes_to_array(gts), iou_pos, iou_neg, force_closest
    )
    out = []
    for c in codes:
        if c >= 0:
            out.append(AnchorLabel("positive", int(c)))
        elif c == NEGATIVE:
            out.append(AnchorLabel("negative"))
        else:
            out.append(AnchorLabel("ignored"))
    return out


def nms_array(boxes: np.ndarray, probs: np.ndarray, iou_thresh: float = 0.1) -> list[int]:
    """Greedy NMS on a [K,4] cube array; returns kept indices into the input.

    Candidates are visited in descending probability (ties: lower original
    index first); each kept box suppresses everything overlapping it above
    `iou_thresh`.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != probs.shape[0]:
        raise ValueError("boxes and probs disagree on count")
    order = np.argsort(-probs, kind="stable")
    alive = np.ones(len(order), dtype=bool)
    kept: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        overlapping = iou_matrix(boxes[i], boxes).reshape(-1) > iou_thresh
        alive &= ~overlapping
    return kept


def nms(boxes: Sequence[Box3], probs: Sequence[float], iou_thresh: float = 0.1) -> list[int]:
    return nms_array(boxes_to_array(boxes), np.asarray(probs, dtype=np.float64), iou_thresh)
