"""Axis-aligned box arithmetic shared by all detection stages.

Boxes are numpy arrays of shape (N, 4) holding ``(y1, x1, y2, x2)`` corner
coordinates, continuous, with inclusive-exclusive extent so that
``area = (y2 - y1) * (x2 - x1)``.  Coordinates are image pixels unless a
function says normalized, in which case they lie in ``[0, 1]``.

Box regression deltas are arrays of shape (N, 4) holding ``(dy, dx, dh, dw)``:
center offsets in units of the anchor extent and log size ratios.

Every function here is pure and safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Guard on |dh|, |dw| before exponentiation so decoded boxes cannot overflow.
DELTA_CLAMP = float(np.log(1000.0 / 16.0))


class GeometryError(ValueError):
    """Malformed boxes or inconsistent geometry configuration."""


def as_boxes(boxes, *, validate: bool = True) -> np.ndarray:
    """Coerce input to a float64 (N, 4) box array, optionally validating extents."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 4:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise GeometryError(f"boxes must have shape (N, 4), got {arr.shape}")
    if validate and arr.size:
        bad = np.nonzero((arr[:, 2] < arr[:, 0]) | (arr[:, 3] < arr[:, 1]))[0]
        if bad.size:
            raise GeometryError(
                f"malformed boxes (y2 < y1 or x2 < x1) at indices {bad.tolist()[:8]}"
            )
    return arr


def box_area(boxes) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise intersection-over-union between two box sets.

    Entry (i, j) is ``|a_i ∩ b_j| / |a_i ∪ b_j|``; a zero-area union yields 0.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    y1 = np.maximum(a[:, None, 0], b[None, :, 0])
    x1 = np.maximum(a[:, None, 1], b[None, :, 1])
    y2 = np.minimum(a[:, None, 2], b[None, :, 2])
    x2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(y2 - y1, 0.0, None) * np.clip(x2 - x1, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def _centers(boxes: np.ndarray):
    h = boxes[:, 2] - boxes[:, 0]
    w = boxes[:, 3] - boxes[:, 1]
    cy = boxes[:, 0] + 0.5 * h
    cx = boxes[:, 1] + 0.5 * w
    return cy, cx, h, w


def encode_deltas(anchors, targets) -> np.ndarray:
    """Encode target boxes as ``(dy, dx, dh, dw)`` deltas relative to anchors.

    dy = (cy_t - cy_a) / h_a, dx = (cx_t - cx_a) / w_a,
    dh = ln(h_t / h_a),       dw = ln(w_t / w_a).
    """
    anchors = as_boxes(anchors)
    targets = as_boxes(targets)
    if anchors.shape != targets.shape:
        raise GeometryError(
            f"anchor/target shape mismatch: {anchors.shape} vs {targets.shape}"
        )
    cy_a, cx_a, h_a, w_a = _centers(anchors)
    if np.any(h_a <= 0.0) or np.any(w_a <= 0.0):
        raise GeometryError("anchors must have positive height and width")
    cy_t, cx_t, h_t, w_t = _centers(targets)
    return np.stack(
        [
            (cy_t - cy_a) / h_a,
            (cx_t - cx_a) / w_a,
            np.log(h_t / h_a),
            np.log(w_t / w_a),
        ],
        axis=1,
    )


def decode_deltas(anchors, deltas, clamp: float = DELTA_CLAMP) -> np.ndarray:
    """Apply ``(dy, dx, dh, dw)`` deltas to anchors; inverse of :func:`encode_deltas`.

    ``dh``/``dw`` are clamped to ``[-clamp, clamp]`` before exponentiation.
    """
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim == 1 and deltas.size == 4:
        deltas = deltas.reshape(1, 4)
    if deltas.shape != anchors.shape:
        raise GeometryError(
            f"anchor/delta shape mismatch: {anchors.shape} vs {deltas.shape}"
        )
    cy, cx, h, w = _centers(anchors)
    if np.any(h <= 0.0) or np.any(w <= 0.0):
        raise GeometryError("anchors must have positive height and width")
    dy, dx = deltas[:, 0], deltas[:, 1]
    dh = np.clip(deltas[:, 2], -clamp, clamp)
    dw = np.clip(deltas[:, 3], -clamp, clamp)
    cy = cy + dy * h
    cx = cx + dx * w
    h = h * np.exp(dh)
    w = w * np.exp(dw)
    return np.stack(
        [cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w], axis=1
    )


def nms(boxes, scores, iou_threshold: float, cap: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, score-descending.

    The highest-score box is kept and every box with IoU strictly greater
    than ``iou_threshold`` against a kept box is suppressed, until ``cap``
    survivors are collected.  Ties in score are broken by lower index.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (boxes.shape[0],):
        raise GeometryError(
            f"scores shape {scores.shape} does not match {boxes.shape[0]} boxes"
        )
    if not 0.0 <= iou_threshold <= 1.0:
        raise GeometryError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    limit = n if cap is None else int(cap)
    y1, x1, y2, x2 = (boxes[:, i] for i in range(4))
    areas = (y2 - y1) * (x2 - x1)
    keep: list[int] = []
    alive = np.ones(n, dtype=bool)
    for idx in order:
        if not alive[idx]:
            continue
        keep.append(int(idx))
        if len(keep) >= limit:
            break
        iy1 = np.maximum(y1[idx], y1)
        ix1 = np.maximum(x1[idx], x1)
        iy2 = np.minimum(y2[idx], y2)
        ix2 = np.minimum(x2[idx], x2)
        inter = np.clip(iy2 - iy1, 0.0, None) * np.clip(ix2 - ix1, 0.0, None)
        union = areas[idx] + areas - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(union > 0.0, inter / union, 0.0)
        alive &= iou <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


@dataclass(frozen=True)
class AnchorSet:
    """Anchors tiled over every feature cell of a feature pyramid.

    ``boxes`` are image-pixel corner boxes ordered level-major, row-major,
    ratio-minor.  ``level`` gives the pyramid level index per anchor and
    ``strides`` the pixels-per-feature-cell of each level.
    """

    boxes: np.ndarray
    level: np.ndarray
    strides: tuple[int, ...]
    feature_shapes: tuple[tuple[int, int], ...] = field(default=())

    def __len__(self) -> int:
        return self.boxes.shape[0]


def generate_anchors(
    feature_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    scales: Sequence[float],
    ratios: Sequence[float],
) -> AnchorSet:
    """Tile one anchor per aspect ratio over every cell of every pyramid level.

    An anchor at cell (i, j) of a level with stride s is centered at
    ``((i + 0.5) * s, (j + 0.5) * s)`` with height ``scale * sqrt(r)`` and
    width ``scale / sqrt(r)``, so anchors of all ratios share an area of
    ``scale**2``.  One scale per level.
    """
    if not (len(feature_shapes) == len(strides) == len(scales)):
        raise GeometryError(
            "feature_shapes, strides and scales must have one entry per level "
            f"(got {len(feature_shapes)}, {len(strides)}, {len(scales)})"
        )
    if len(ratios) == 0:
        raise GeometryError("need at least one aspect ratio")
    ratios_arr = np.asarray(ratios, dtype=np.float64)
    all_boxes = []
    all_levels = []
    for lvl, ((fh, fw), stride, scale) in enumerate(
        zip(feature_shapes, strides, scales)
    ):
        heights = scale * np.sqrt(ratios_arr)
        widths = scale / np.sqrt(ratios_arr)
        cy = (np.arange(fh, dtype=np.float64) + 0.5) * stride
        cx = (np.arange(fw, dtype=np.float64) + 0.5) * stride
        # (fh, fw, R) grids, flattened row-major with ratio as the fastest axis.
        cy_g = np.broadcast_to(cy[:, None, None], (fh, fw, len(ratios)))
        cx_g = np.broadcast_to(cx[None, :, None], (fh, fw, len(ratios)))
        h_g = np.broadcast_to(heights[None, None, :], (fh, fw, len(ratios)))
        w_g = np.broadcast_to(widths[None, None, :], (fh, fw, len(ratios)))
        boxes = np.stack(
            [
                cy_g - 0.5 * h_g,
                cx_g - 0.5 * w_g,
                cy_g + 0.5 * h_g,
                cx_g + 0.5 * w_g,
            ],
            axis=-1,
        ).reshape(-1, 4)
        all_boxes.append(boxes)
        all_levels.append(np.full(boxes.shape[0], lvl, dtype=np.int64))
    return AnchorSet(
        boxes=np.concatenate(all_boxes, axis=0),
        level=np.concatenate(all_levels, axis=0),
        strides=tuple(int(s) for s in strides),
        feature_shapes=tuple((int(h), int(w)) for h, w in feature_shapes),
    )


def sanitize_boxes(boxes, image_h: float, image_w: float, normalize: bool = False) -> np.ndarray:
    """Clip boxes to ``[0, H] x [0, W]`` and optionally divide by the image extent."""
    if image_h <= 0 or image_w <= 0:
        raise GeometryError(f"image extent must be positive, got {image_h}x{image_w}")
    boxes = as_boxes(boxes, validate=False).copy()
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, image_h)
    boxes[:, 2] = np.clip(boxes[:, 2], 0.0, image_h)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, image_w)
    boxes[:, 3] = np.clip(boxes[:, 3], 0.0, image_w)
    if normalize:
        boxes[:, 0] /= image_h
        boxes[:, 2] /= image_h
        boxes[:, 1] /= image_w
        boxes[:, 3] /= image_w
    return boxes


def denormalize_boxes(boxes, image_h: float, image_w: float) -> np.ndarray:
    """Scale normalized boxes back to pixel coordinates."""
    boxes = as_boxes(boxes, validate=False).copy()
    boxes[:, 0] *= image_h
    boxes[:, 2] *= image_h
    boxes[:, 1] *= image_w
    boxes[:, 3] *= image_w
    return boxes


def boxes_from_masks(masks: np.ndarray) -> np.ndarray:
    """Tight ``(y1, x1, y2, x2)`` bounding rectangle for each binary mask.

    ``masks`` is (N, H, W); empty masks yield a zero box.  The exclusive lower
    corner convention makes a single pixel at (r, c) the box (r, c, r+1, c+1).
    """
    masks = np.asarray(masks)
    out = np.zeros((masks.shape[0], 4), dtype=np.float64)
    for i, m in enumerate(masks):
        ys, xs = np.nonzero(m)
        if ys.size:
            out[i] = (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)
    return out
