"""Region proposal stage: anchor labeling, scoring heads, and the proposal
pipeline (refine deltas, clip, suppress, normalize).

Anchor labeling follows the single 0.5 IoU threshold: overlaps >= 0.5 are
positive, everything below is negative — there is no ignore band between
separate positive/negative thresholds, so anchors just under 0.5 become
negatives.  The highest-IoU anchor of each ground-truth box is additionally
forced positive so no target is left unclaimed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import Conv
from .config import LossConfig
from .geometry import (
    AnchorSet,
    as_boxes,
    decode_deltas,
    encode_deltas,
    iou_matrix,
    nms,
    sanitize_boxes,
)
from .nn import Parameter, Tensor


class RpnError(ValueError):
    pass


@dataclass
class AnchorLabels:
    """Per-anchor training assignment.

    ``p_star``: 1 positive, 0 negative, -1 unsampled.  ``positive_idx`` are
    the sampled positive anchor indices; ``q_star``/``matched_gt`` align
    with them.
    """

    p_star: np.ndarray
    positive_idx: np.ndarray
    q_star: np.ndarray
    matched_gt: np.ndarray

    @property
    def sampled_idx(self) -> np.ndarray:
        return np.nonzero(self.p_star >= 0)[0]


def label_anchors(
    anchors: AnchorSet,
    gt_boxes,
    sample_size: int,
    rng: np.random.Generator | None = None,
    delta_std=None,
) -> AnchorLabels:
    """Label anchors against ground truth and draw a balanced loss sample.

    Positives are anchors with IoU >= 0.5 to some ground-truth box, plus the
    argmax anchor of each ground-truth box.  At most ``sample_size // 2``
    positives are sampled (argmax anchors first), the rest of the sample is
    filled with negatives.  Without ``rng`` the lowest-index candidates are
    taken, which keeps the labeling reproducible in tests.
    """
    gt = as_boxes(gt_boxes)
    if gt.shape[0] == 0:
        raise RpnError("label_anchors requires at least one ground-truth box")
    boxes = anchors.boxes
    n = boxes.shape[0]
    iou = iou_matrix(boxes, gt)
    anchor_best_gt = iou.argmax(axis=1)
    anchor_best_iou = iou[np.arange(n), anchor_best_gt]
    positive = anchor_best_iou >= 0.5
    # each gt box claims its best still-unclaimed anchor, so no box is left
    # without a positive anchor even when argmax anchors collide
    claimed: set[int] = set()
    forced = np.empty(gt.shape[0], dtype=np.int64)
    for g in range(gt.shape[0]):
        for a in np.argsort(-iou[:, g], kind="stable"):
            if int(a) not in claimed:
                claimed.add(int(a))
                forced[g] = a
                break
    positive[forced] = True
    # the forced anchor regresses to the box that claimed it
    anchor_best_gt[forced] = np.arange(gt.shape[0])

    pos_all = np.nonzero(positive)[0]
    neg_all = np.nonzero(~positive)[0]
    pos_cap = max(1, sample_size // 2)
    forced_set = np.unique(forced)
    if pos_all.size > pos_cap:
        extras = np.setdiff1d(pos_all, forced_set, assume_unique=False)
        room = max(0, pos_cap - forced_set.size)
        if rng is not None and extras.size > room:
            extras = rng.choice(extras, size=room, replace=False)
        else:
            extras = extras[:room]
        pos_sampled = np.sort(np.concatenate([forced_set, extras]))[:pos_cap]
    else:
        pos_sampled = pos_all
    neg_need = max(0, sample_size - pos_sampled.size)
    if neg_all.size > neg_need:
        if rng is not None:
            neg_sampled = np.sort(rng.choice(neg_all, size=neg_need, replace=False))
        else:
            neg_sampled = neg_all[:neg_need]
    else:
        neg_sampled = neg_all

    p_star = np.full(n, -1, dtype=np.int8)
    p_star[pos_sampled] = 1
    p_star[neg_sampled] = 0
    matched = anchor_best_gt[pos_sampled]
    q_star = encode_deltas(boxes[pos_sampled], gt[matched])
    if delta_std is not None:
        q_star = q_star / np.asarray(delta_std, dtype=np.float64)
    return AnchorLabels(
        p_star=p_star,
        positive_idx=pos_sampled.astype(np.int64),
        q_star=q_star,
        matched_gt=matched.astype(np.int64),
    )


@dataclass
class RpnPrediction:
    """Per-anchor objectness (softmaxed, column 1 = object) and box deltas."""

    objectness: Tensor
    deltas: Tensor
    logits: Tensor  # pre-softmax scores, kept for the loss


class RpnHead:
    """Shared 3x3 convolution followed by 1x1 scoring and regression heads.

    Output channels are laid out ratio-major so that flattening each level
    (rows, then columns, then ratios) matches the anchor ordering of
    :func:`sebre.geometry.generate_anchors`.
    """

    def __init__(self, params: list[Parameter], rng, in_channels: int, num_ratios: int):
        self.num_ratios = num_ratios
        self.conv = Conv("rpn.conv", params, rng, in_channels, in_channels, 3, 1, 1)
        self.cls = Conv("rpn.cls", params, rng, in_channels, 2 * num_ratios, 1)
        self.reg = Conv("rpn.reg", params, rng, in_channels, 4 * num_ratios, 1)

    def __call__(self, pyramid: list[Tensor]) -> RpnPrediction:
        return rpn_forward(self, pyramid)


def _to_anchor_rows(per_level: Tensor, num_ratios: int, width: int) -> Tensor:
    # [R*width, H, W] -> [H*W*R, width] in row-major, ratio-minor order
    _, h, w = per_level.shape
    x = nn.reshape(per_level, (num_ratios, width, h, w))
    x = nn.transpose(x, (2, 3, 0, 1))
    return nn.reshape(x, (h * w * num_ratios, width))


def rpn_forward(model: RpnHead, pyramid: list[Tensor]) -> RpnPrediction:
    """Score and regress every anchor across all pyramid levels."""
    logits_rows = []
    delta_rows = []
    for level in pyramid:
        h = nn.relu(model.conv(level))
        logits_rows.append(_to_anchor_rows(model.cls(h), model.num_ratios, 2))
        delta_rows.append(_to_anchor_rows(model.reg(h), model.num_ratios, 4))
    logits = nn.concat(logits_rows, axis=0)
    deltas = nn.concat(delta_rows, axis=0)
    return RpnPrediction(
        objectness=nn.activation(logits, "softmax_rows"),
        deltas=deltas,
        logits=logits,
    )


def generate_proposals(
    pred: RpnPrediction,
    anchors: AnchorSet,
    image_h: int,
    image_w: int,
    pre_nms_top: int,
    post_nms_top: int,
    nms_threshold: float,
    delta_std=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Proposal pipeline: score-sort, refine, clip, suppress, normalize.

    Returns normalized boxes (P, 4) and their objectness scores, P <=
    ``post_nms_top``.  Runs on detached arrays; gradients do not flow
    through proposal coordinates.
    """
    if pre_nms_top < 1 or post_nms_top < 1:
        raise RpnError("proposal caps must be >= 1")
    scores = np.asarray(pred.objectness.data[:, 1], dtype=np.float64)
    deltas = np.asarray(pred.deltas.data, dtype=np.float64)
    if scores.shape[0] != len(anchors):
        raise RpnError(
            f"prediction covers {scores.shape[0]} anchors, grid has {len(anchors)}"
        )
    if delta_std is not None:
        deltas = deltas * np.asarray(delta_std, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:pre_nms_top]
    boxes = decode_deltas(anchors.boxes[order], deltas[order])
    boxes = sanitize_boxes(boxes, image_h, image_w)
    # clipping can collapse off-image boxes to zero extent; drop those
    alive = np.nonzero(
        (boxes[:, 2] - boxes[:, 0] > 1e-4) & (boxes[:, 3] - boxes[:, 1] > 1e-4)
    )[0]
    boxes, order = boxes[alive], order[alive]
    keep = nms(boxes, scores[order], nms_threshold, cap=post_nms_top)
    boxes = sanitize_boxes(boxes[keep], image_h, image_w, normalize=True)
    return boxes, scores[order][keep]


def rpn_loss(
    pred: RpnPrediction, labels: AnchorLabels, cfg: LossConfig
) -> tuple[Tensor, dict[str, float]]:
    """Two-way objectness log loss plus smooth-L1 regression on positives.

    L = (1/n_cls) sum L_cls + mu (1/n_reg) sum L_reg, with n_cls/n_reg from
    the config's normalization modes.
    """
    sampled = labels.p_star >= 0
    n_sampled = int(sampled.sum())
    n_positive = int(labels.positive_idx.size)
    if n_sampled == 0:
        raise RpnError("no sampled anchors; label_anchors must run first")
    n_cls = n_sampled if cfg.n_cls == "sampled" else max(n_positive, 1)
    n_reg = max(n_positive, 1) if cfg.n_reg == "positive" else n_sampled

    targets = np.where(labels.p_star == 1, 1, 0).astype(np.int64)
    cls_loss = nn.scale(
        nn.softmax_cross_entropy(
            pred.logits, targets, reduction="sum", weight=sampled.astype(np.float64)
        ),
        1.0 / n_cls,
    )
    q_full = np.zeros(pred.deltas.shape, dtype=np.float64)
    w_full = np.zeros(pred.deltas.shape, dtype=np.float64)
    if n_positive:
        q_full[labels.positive_idx] = labels.q_star
        w_full[labels.positive_idx] = 1.0
    reg_loss = nn.scale(
        nn.smooth_l1(pred.deltas, q_full, reduction="sum", weight=w_full),
        cfg.mu / n_reg,
    )
    loss = nn.add(cls_loss, reg_loss)
    return loss, {"rpn_cls": cls_loss.item(), "rpn_reg": reg_loss.item()}
