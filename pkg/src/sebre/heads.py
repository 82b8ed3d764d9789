"""RoIAlign feature pooling, the classifier/regressor/mask heads, their
multi-task loss, inference post-processing, and the two-stage trainer.

Pooling samples each output cell once at its center by bilinear
interpolation of the assigned pyramid level, keeping sub-pixel
correspondence to the image.  All resampling here (pooling, mask-target
downsampling, mask paste-back) shares one pixel-center convention: pixel
``p`` of a raster is centered at continuous coordinate ``p + 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import Conv, Dense, assign_roi_levels
from .config import LossConfig, ModelConfig
from .geometry import (
    decode_deltas,
    denormalize_boxes,
    encode_deltas,
    iou_matrix,
    sanitize_boxes,
)
from .nn import Parameter, Tensor


class HeadsError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


# ---------------------------------------------------------------------------
# bilinear sampling helpers (shared convention)


def _bilinear_sample(src: np.ndarray, yf: np.ndarray, xf: np.ndarray) -> np.ndarray:
    """Sample ``src`` ([H,W] or [C,H,W]) at fractional index coordinates."""
    h, w = src.shape[-2:]
    yf = np.clip(yf, 0.0, h - 1.0)
    xf = np.clip(xf, 0.0, w - 1.0)
    y0 = np.floor(yf).astype(np.int64)
    x0 = np.floor(xf).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yf - y0
    wx = xf - x0
    v00 = src[..., y0, x0]
    v01 = src[..., y0, x1]
    v10 = src[..., y1, x0]
    v11 = src[..., y1, x1]
    return (
        v00 * (1 - wy) * (1 - wx)
        + v01 * (1 - wy) * wx
        + v10 * wy * (1 - wx)
        + v11 * wy * wx
    )


def crop_resize(src: np.ndarray, box_px, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample the (float) pixel box of ``src`` onto an out grid."""
    y1, x1, y2, x2 = (float(v) for v in box_px)
    ys = y1 + (np.arange(out_h) + 0.5) * (y2 - y1) / out_h - 0.5
    xs = x1 + (np.arange(out_w) + 0.5) * (x2 - x1) / out_w - 0.5
    return _bilinear_sample(src, ys[:, None], xs[None, :])


# ---------------------------------------------------------------------------
# RoIAlign


def roi_align(
    pyramid: list[Tensor],
    rois: np.ndarray,
    image_h: int,
    image_w: int,
    out_size: int,
) -> Tensor:
    """Pool an ``out x out`` grid per normalized RoI from its pyramid level.

    Output is [n, C, out, out]; differentiable w.r.t. the pyramid features.
    Each cell takes one bilinear sample at its center.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    n = rois.shape[0]
    channels = pyramid[0].shape[0]
    dtype = pyramid[0].dtype
    if n == 0:
        return Tensor(np.zeros((0, channels, out_size, out_size), dtype=dtype))
    levels = assign_roi_levels(rois, image_h, image_w, len(pyramid))
    out = np.empty((n, channels, out_size, out_size), dtype=dtype)
    records = []  # (level, roi_idx, tap flat indices, tap weights) for backward
    for lvl in range(len(pyramid)):
        sel = np.nonzero(levels == lvl)[0]
        if sel.size == 0:
            continue
        feat = pyramid[lvl].data
        fh, fw = feat.shape[-2:]
        stride_y = image_h / fh
        stride_x = image_w / fw
        b = rois[sel]
        grid = np.arange(out_size) + 0.5
        y_img = b[:, 0:1] * image_h + grid[None, :] * ((b[:, 2] - b[:, 0])[:, None] * image_h / out_size)
        x_img = b[:, 1:2] * image_w + grid[None, :] * ((b[:, 3] - b[:, 1])[:, None] * image_w / out_size)
        yf = np.clip(y_img / stride_y - 0.5, 0.0, fh - 1.0)  # (k, out)
        xf = np.clip(x_img / stride_x - 0.5, 0.0, fw - 1.0)
        y0 = np.floor(yf).astype(np.int64)
        x0 = np.floor(xf).astype(np.int64)
        y1 = np.minimum(y0 + 1, fh - 1)
        x1 = np.minimum(x0 + 1, fw - 1)
        wy = (yf - y0)[:, :, None]  # (k, out, 1)
        wx = (xf - x0)[:, None, :]  # (k, 1, out)
        idx = [
            (y0[:, :, None] * fw + x0[:, None, :], (1 - wy) * (1 - wx)),
            (y0[:, :, None] * fw + x1[:, None, :], (1 - wy) * wx),
            (y1[:, :, None] * fw + x0[:, None, :], wy * (1 - wx)),
            (y1[:, :, None] * fw + x1[:, None, :], wy * wx),
        ]
        flat = feat.reshape(channels, -1)
        acc = np.zeros((channels, sel.size, out_size, out_size), dtype=np.float64)
        flat_idx = []
        weights = []
        for tap_idx, tap_w in idx:
            tap_idx = np.broadcast_to(tap_idx, (sel.size, out_size, out_size))
            tap_w = np.broadcast_to(tap_w, (sel.size, out_size, out_size))
            acc += flat[:, tap_idx] * tap_w[None]
            flat_idx.append(tap_idx.reshape(-1))
            weights.append(tap_w.reshape(-1))
        out[sel] = acc.transpose(1, 0, 2, 3).astype(dtype)
        records.append((lvl, sel, np.concatenate(flat_idx), np.concatenate(weights)))

    def backward(g):
        grads: list[np.ndarray | None] = [None] * len(pyramid)
        for lvl, sel, flat_idx, weights in records:
            feat = pyramid[lvl].data
            fh, fw = feat.shape[-2:]
            gsel = g[sel].transpose(1, 0, 2, 3).reshape(channels, -1)  # (C, k*out*out)
            vals = np.tile(gsel, (1, 4)) * weights[None, :]
            dflat = np.zeros((channels, fh * fw), dtype=g.dtype)
            np.add.at(dflat, (np.arange(channels)[:, None], flat_idx[None, :]), vals)
            grads[lvl] = dflat.reshape(feat.shape)
        return grads

    return nn.make_op(out, tuple(pyramid), backward)


# ---------------------------------------------------------------------------
# head networks


class HeadModel:
    """Classifier/regressor from the 7x7 pool and the mask FCN from 14x14."""

    def __init__(self, params: list[Parameter], rng, cfg: ModelConfig, in_channels: int):
        self.cfg = cfg
        hidden = cfg.head_hidden
        k_fg = cfg.num_fg_classes
        d_in = in_channels * cfg.pool_size * cfg.pool_size
        self.fc1 = Dense("heads.fc1", params, rng, d_in, hidden)
        self.fc2 = Dense("heads.fc2", params, rng, hidden, hidden)
        self.cls = Dense("heads.cls", params, rng, hidden, cfg.num_classes)
        self.reg = Dense("heads.reg", params, rng, hidden, 4 * k_fg)
        mc = cfg.mask_channels
        self.mconv1 = Conv("heads.mask.conv1", params, rng, in_channels, mc, 3, 1, 1)
        self.mconv2 = Conv("heads.mask.conv2", params, rng, mc, mc, 3, 1, 1)
        self.mconv3 = Conv("heads.mask.conv3", params, rng, mc, mc, 3, 1, 1)
        self.mout = Conv("heads.mask.out", params, rng, mc, k_fg, 1)

    def classify(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        """Class logits [n, num_classes] and per-class deltas [n, K*4]."""
        n = pooled.shape[0]
        h = nn.reshape(pooled, (n, -1))
        h = nn.relu(self.fc1(h))
        h = nn.relu(self.fc2(h))
        return self.cls(h), self.reg(h)

    def mask(self, pooled: Tensor) -> Tensor:
        """Per-class mask logits [n, K, m, m] from the mask_pool-sized pool."""
        h = nn.relu(self.mconv1(pooled))
        h = nn.relu(self.mconv2(h))
        h = nn.resample2d(h, "nearest_upsample_2x")
        h = nn.relu(self.mconv3(h))
        return self.mout(h)


def heads_forward(
    model: HeadModel, pooled_cls: Tensor, pooled_mask: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Full head pass: class probabilities, per-class deltas, per-class masks.

    Shapes for n RoIs, num_classes c and mask size m:
    [n, c], [n, (c-1)*4], [n, c-1, m, m].
    """
    logits, deltas = model.classify(pooled_cls)
    mask_logits = model.mask(pooled_mask)
    return (
        nn.activation(logits, "softmax_rows"),
        deltas,
        nn.activation(mask_logits, "sigmoid"),
    )


# ---------------------------------------------------------------------------
# RoI target building and the multi-task loss


@dataclass
class HeadPredictions:
    class_logits: Tensor  # [n, num_classes]
    deltas: Tensor  # [n, K*4]
    mask_logits: Tensor | None  # [p, K, m, m] for the positive RoIs


@dataclass
class RoiTargets:
    """Sampled RoIs with their training targets; positives come first."""

    boxes: np.ndarray  # [n, 4] normalized sampled proposals
    class_ids: np.ndarray  # [n] 0 = background
    deltas: np.ndarray  # [p, 4] encode(proposal, matched gt)
    mask_targets: np.ndarray  # [p, m, m] binary

    @property
    def num_positive(self) -> int:
        return self.deltas.shape[0]


def build_roi_targets(
    proposals: np.ndarray,
    gt_boxes_norm: np.ndarray,
    gt_class_ids: np.ndarray,
    gt_masks: np.ndarray,
    image_h: int,
    image_w: int,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator | None = None,
    append_gt: bool = True,
) -> RoiTargets:
    """Match proposals to ground truth at IoU 0.5 and draw the head sample.

    Ground-truth boxes are appended to the proposal set during training so
    the heads always see well-placed positives.  At most
    ``roi_sample_size * roi_positive_fraction`` positives are drawn.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes_norm, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0:
        raise HeadsError("need at least one ground-truth instance")
    if append_gt:
        proposals = np.concatenate([proposals, gt], axis=0)
    iou = iou_matrix(proposals, gt)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(proposals)), best_gt]
    pos_all = np.nonzero(best_iou >= 0.5)[0]
    neg_all = np.nonzero(best_iou < 0.5)[0]

    pos_cap = max(1, int(round(model_cfg.roi_sample_size * model_cfg.roi_positive_fraction)))
    if pos_all.size > pos_cap:
        pos_sel = (
            np.sort(rng.choice(pos_all, pos_cap, replace=False)) if rng is not None else pos_all[:pos_cap]
        )
    else:
        pos_sel = pos_all
    neg_need = max(0, model_cfg.roi_sample_size - pos_sel.size)
    if neg_all.size > neg_need:
        neg_sel = (
            np.sort(rng.choice(neg_all, neg_need, replace=False)) if rng is not None else neg_all[:neg_need]
        )
    else:
        neg_sel = neg_all

    order = np.concatenate([pos_sel, neg_sel]).astype(np.int64)
    boxes = proposals[order]
    class_ids = np.zeros(order.size, dtype=np.int64)
    class_ids[: pos_sel.size] = np.asarray(gt_class_ids, dtype=np.int64)[best_gt[pos_sel]]
    deltas = (
        encode_deltas(proposals[pos_sel], gt[best_gt[pos_sel]])
        if pos_sel.size
        else np.zeros((0, 4))
    )
    if loss_cfg.standardize_deltas:
        deltas = deltas / np.asarray(loss_cfg.delta_std)

    m = model_cfg.mask_size
    mask_targets = np.zeros((pos_sel.size, m, m), dtype=np.float32)
    gt_masks = np.asarray(gt_masks)
    for row, p_idx in enumerate(pos_sel):
        box_px = denormalize_boxes(proposals[p_idx : p_idx + 1], image_h, image_w)[0]
        resampled = crop_resize(gt_masks[best_gt[p_idx]].astype(np.float64), box_px, m, m)
        mask_targets[row] = (resampled >= 0.5).astype(np.float32)
    return RoiTargets(boxes=boxes, class_ids=class_ids, deltas=deltas, mask_targets=mask_targets)


def multitask_loss(
    predictions: HeadPredictions, targets: RoiTargets, cfg: LossConfig
) -> tuple[Tensor, dict[str, float]]:
    """L = L_cls + L_reg + L_mask over one sampled RoI batch.

    Classification covers every sampled RoI (background included); box
    regression covers positives on their target-class delta slot only; the
    mask term is the per-pixel binary cross-entropy of the target-class
    channel, averaged over pixels of the positive RoIs.
    """
    n = predictions.class_logits.shape[0]
    if targets.class_ids.shape[0] != n:
        raise HeadsError(
            f"{n} predictions vs {targets.class_ids.shape[0]} target rows"
        )
    p = targets.num_positive
    cls_loss = nn.scale(
        nn.softmax_cross_entropy(predictions.class_logits, targets.class_ids, reduction="sum"),
        cfg.weight_cls / max(n, 1),
    )
    components = {"head_cls": cls_loss.item()}
    total = cls_loss
    if p:
        k4 = predictions.deltas.shape[1]
        target_full = np.zeros((n, k4), dtype=np.float64)
        weight_full = np.zeros((n, k4), dtype=np.float64)
        for row in range(p):
            slot = (targets.class_ids[row] - 1) * 4
            target_full[row, slot : slot + 4] = targets.deltas[row]
            weight_full[row, slot : slot + 4] = 1.0
        reg_loss = nn.scale(
            nn.smooth_l1(predictions.deltas, target_full, reduction="sum", weight=weight_full),
            cfg.weight_reg / p,
        )
        total = nn.add(total, reg_loss)
        components["head_reg"] = reg_loss.item()

        if predictions.mask_logits is not None:
            mlog = predictions.mask_logits
            if mlog.shape[0] != p:
                raise HeadsError(f"mask logits cover {mlog.shape[0]} RoIs, expected {p}")
            m = mlog.shape[-1]
            k_fg = mlog.shape[1]
            mask_t = np.zeros(mlog.shape, dtype=np.float32)
            mask_w = np.zeros(mlog.shape, dtype=np.float64)
            for row in range(p):
                ch = targets.class_ids[row] - 1
                mask_t[row, ch] = targets.mask_targets[row]
                mask_w[row, ch] = 1.0
            mask_loss = nn.scale(
                nn.sigmoid_cross_entropy(mlog, mask_t, reduction="sum", weight=mask_w),
                cfg.weight_mask / (p * m * m),
            )
            total = nn.add(total, mask_loss)
            components["head_mask"] = mask_loss.item()
    else:
        components["head_reg"] = 0.0
        components["head_mask"] = 0.0
    return total, components


# ---------------------------------------------------------------------------
# inference post-processing


@dataclass
class Detection:
    """One segmented region instance at image resolution."""

    class_id: int
    score: float
    box: np.ndarray  # (4,) normalized (y1, x1, y2, x2)
    mask: np.ndarray  # (H, W) bool


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def select_detections(
    class_probs, deltas, proposals, image_h: int, image_w: int, cfg: ModelConfig, delta_std=None
):
    """Score/refine/filter proposals into final boxes.

    Per proposal the best non-background class is taken and its delta slot
    applied; candidates below the detection threshold are dropped, each
    class keeps only its best candidate, and the top ``max_detections``
    survive.  Returns (indices into proposals, class ids, scores, refined
    normalized boxes).
    """
    probs = _as_array(class_probs)
    deltas = _as_array(deltas).reshape(probs.shape[0], cfg.num_fg_classes, 4)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    empty = (
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        np.zeros(0),
        np.zeros((0, 4)),
    )
    if probs.shape[0] == 0:
        return empty
    fg = probs[:, 1:]
    rel = fg.argmax(axis=1)
    scores = fg[np.arange(len(fg)), rel]
    chosen = decode_deltas(
        proposals,
        deltas[np.arange(len(fg)), rel]
        * (np.asarray(delta_std) if delta_std is not None else 1.0),
    )
    chosen = sanitize_boxes(chosen, 1.0, 1.0)
    keep = np.nonzero(scores >= cfg.detection_threshold)[0]
    if keep.size == 0:
        return empty
    # one detection per class: highest score wins, ties to the lower index
    best_per_class: dict[int, int] = {}
    for i in keep:
        c = int(rel[i]) + 1
        j = best_per_class.get(c)
        if j is None or scores[i] > scores[j]:
            best_per_class[c] = int(i)
    chosen_idx = np.array(sorted(best_per_class.values(), key=lambda i: (-scores[i], i)))
    chosen_idx = chosen_idx[: cfg.max_detections]
    return (
        chosen_idx,
        rel[chosen_idx].astype(np.int64) + 1,
        scores[chosen_idx],
        chosen[chosen_idx],
    )


def paste_mask(
    mask_map: np.ndarray, box_norm, image_h: int, image_w: int, threshold: float = 0.5
) -> np.ndarray:
    """Resample an m x m mask map into its box on a full-resolution canvas."""
    out = np.zeros((image_h, image_w), dtype=bool)
    y1 = float(box_norm[0]) * image_h
    x1 = float(box_norm[1]) * image_w
    y2 = float(box_norm[2]) * image_h
    x2 = float(box_norm[3]) * image_w
    r1, c1 = max(0, int(np.floor(y1))), max(0, int(np.floor(x1)))
    r2, c2 = min(image_h, int(np.ceil(y2))), min(image_w, int(np.ceil(x2)))
    if r2 <= r1 or c2 <= c1 or y2 <= y1 or x2 <= x1:
        return out
    m = mask_map.shape[0]
    rows = np.arange(r1, r2) + 0.5
    cols = np.arange(c1, c2) + 0.5
    yf = (rows - y1) * m / (y2 - y1) - 0.5
    xf = (cols - x1) * m / (x2 - x1) - 0.5
    patch = _bilinear_sample(mask_map.astype(np.float64), yf[:, None], xf[None, :])
    out[r1:r2, c1:c2] = patch >= threshold
    return out


def detection_postprocess(
    class_probs,
    deltas,
    masks,
    proposals,
    image_h: int,
    image_w: int,
    cfg: ModelConfig,
    delta_std=None,
) -> list[Detection]:
    """Turn per-proposal head outputs into final Detections.

    ``masks`` holds per-class mask probability maps aligned with the
    proposals, [n, K, m, m].  Candidates scoring below the detection
    threshold are dropped, at most one detection per class and
    ``max_detections`` overall survive, and each mask map is thresholded
    and pasted into its refined box at full image resolution.  Detections
    whose pasted mask comes out empty are dropped.
    """
    masks = _as_array(masks)
    idx, class_ids, scores, boxes = select_detections(
        class_probs, deltas, proposals, image_h, image_w, cfg, delta_std
    )
    detections = []
    for i, cid, score, box in zip(idx, class_ids, scores, boxes):
        mask = paste_mask(masks[i, cid - 1], box, image_h, image_w, cfg.mask_threshold)
        if not mask.any():
            continue
        detections.append(Detection(int(cid), float(score), box.copy(), mask))
    return detections


# ---------------------------------------------------------------------------
# two-stage training


def train_two_stage(model, dataset, schedule, rng=None, on_step=None) -> list[dict]:
    """Run the staged schedule: heads first (backbone frozen), then all layers.

    One image per step; records a per-step loss trace.  Aborts with a
    diagnostic snapshot on a non-finite loss.
    """
    records = list(dataset)
    if not records:
        raise HeadsError("dataset is empty")
    trace: list[dict] = []
    global_step = 0
    for stage_num, stage in enumerate(schedule.stages):
        params = model.trainable_parameters(stage.scope)
        order = np.arange(len(records))
        cursor = len(records)  # force a reshuffle on the first step
        for it in range(stage.iterations):
            if cursor >= len(records):
                if rng is not None:
                    order = rng.permutation(len(records))
                cursor = 0
            record = records[order[cursor]]
            cursor += 1
            loss, parts = model.training_loss(record, rng=rng, scope=stage.scope)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at stage {stage_num} step {it}",
                    snapshot={"stage": stage_num, "step": it, "components": parts},
                )
            loss.backward()
            nn.sgd_step(params, stage.learning_rate, schedule.momentum)
            model.zero_grad()
            entry = {
                "stage": stage_num,
                "step": global_step,
                "loss": value,
                **parts,
            }
            trace.append(entry)
            if on_step is not None:
                on_step(entry)
            global_step += 1
    return trace
