"""The assembled detector: backbone + RPN + heads with training and
inference entry points.

Inference applies the mask head only to the boxes that survive detection
selection (at most ``max_detections``), pooling mask features at the
refined boxes.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .backbone import build_backbone
from .config import RunConfig
from .geometry import AnchorSet, generate_anchors, sanitize_boxes
from .heads import (
    Detection,
    HeadModel,
    HeadPredictions,
    build_roi_targets,
    multitask_loss,
    paste_mask,
    roi_align,
    select_detections,
)
from .nn import Parameter, Tensor
from .rpn import RpnHead, generate_proposals, label_anchors, rpn_forward, rpn_loss


class SectionSegmenter:
    """Detector over section images; built deterministically from a RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.backbone = build_backbone(cfg.backbone, seed=cfg.init_seed)
        if len(cfg.model.anchor_scales) != cfg.backbone.num_levels:
            raise ValueError(
                f"{len(cfg.model.anchor_scales)} anchor scales for "
                f"{cfg.backbone.num_levels} pyramid levels"
            )
        rpn_params: list[Parameter] = []
        self.rpn = RpnHead(
            rpn_params,
            np.random.default_rng((cfg.init_seed, 2)),
            in_channels=cfg.backbone.fpn_channels,
            num_ratios=len(cfg.model.anchor_ratios),
        )
        head_params: list[Parameter] = []
        self.heads = HeadModel(
            head_params,
            np.random.default_rng((cfg.init_seed, 3)),
            cfg.model,
            in_channels=cfg.backbone.fpn_channels,
        )
        self._params = self.backbone.parameters() + rpn_params + head_params
        self._anchor_cache: dict[tuple[int, int], AnchorSet] = {}

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def trainable_parameters(self, scope: str = "all") -> list[Parameter]:
        """'heads' freezes the residual trunk (names under ``backbone.``)."""
        chosen = [p for p in self._params if p.trainable]
        if scope == "heads":
            chosen = [p for p in chosen if not p.name.startswith("backbone.")]
        elif scope != "all":
            raise ValueError(f"unknown scope {scope!r}")
        return chosen

    def zero_grad(self) -> None:
        for p in self._params:
            p.value.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = {p.name: p for p in self._params}
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for name, arr in state.items():
            p = mine[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.data.shape}"
                )
            p.value.data = arr.astype(np.float32).copy()
            p.momentum[:] = 0.0

    # -- shared plumbing ----------------------------------------------------

    def preprocess(self, image: np.ndarray) -> Tensor:
        """[3,H,W] uint8-or-float image to a centered float32 tensor."""
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"expected a [3,H,W] image, got {img.shape}")
        return Tensor(img / 127.5 - 1.0)

    def anchors_for(self, image_h: int, image_w: int) -> AnchorSet:
        key = (image_h, image_w)
        if key not in self._anchor_cache:
            strides = self.cfg.backbone.strides
            shapes = [(image_h // s, image_w // s) for s in strides]
            self._anchor_cache[key] = generate_anchors(
                shapes, strides, self.cfg.model.anchor_scales, self.cfg.model.anchor_ratios
            )
        return self._anchor_cache[key]

    def _delta_std(self):
        return self.cfg.loss.delta_std if self.cfg.loss.standardize_deltas else None

    # -- training -----------------------------------------------------------

    def training_loss(self, record, rng=None, scope: str = "all"):
        """Composite RPN + head loss for one section record."""
        mc = self.cfg.model
        image = record.image
        h, w = image.shape[1], image.shape[2]
        pyramid = self.backbone.extract_pyramid(
            self.preprocess(image), detach_trunk=(scope == "heads")
        )
        anchors = self.anchors_for(h, w)
        pred = rpn_forward(self.rpn, pyramid)
        labels = label_anchors(
            anchors, record.boxes, mc.rpn_sample_size, rng=rng, delta_std=self._delta_std()
        )
        loss, parts = rpn_loss(pred, labels, self.cfg.loss)
        proposals, _ = generate_proposals(
            pred,
            anchors,
            h,
            w,
            mc.pre_nms_train,
            mc.post_nms_train,
            mc.rpn_nms_threshold,
            delta_std=self._delta_std(),
        )
        gt_norm = sanitize_boxes(record.boxes, h, w, normalize=True)
        targets = build_roi_targets(
            proposals,
            gt_norm,
            record.class_ids,
            record.instance_masks,
            h,
            w,
            mc,
            self.cfg.loss,
            rng=rng,
        )
        pooled = roi_align(pyramid, targets.boxes, h, w, mc.pool_size)
        class_logits, delta_pred = self.heads.classify(pooled)
        p = targets.num_positive
        mask_logits = None
        if p:
            pooled_mask = roi_align(pyramid, targets.boxes[:p], h, w, mc.mask_pool_size)
            mask_logits = self.heads.mask(pooled_mask)
        head_loss, head_parts = multitask_loss(
            HeadPredictions(class_logits, delta_pred, mask_logits), targets, self.cfg.loss
        )
        parts.update(head_parts)
        return nn.add(loss, head_loss), parts

    # -- inference ----------------------------------------------------------

    def detect(self, image: np.ndarray) -> list[Detection]:
        """Segment one [3,H,W] image into at most ``max_detections`` regions."""
        mc = self.cfg.model
        h, w = image.shape[1], image.shape[2]
        with nn.no_grad():
            pyramid = self.backbone.extract_pyramid(self.preprocess(image))
            anchors = self.anchors_for(h, w)
            pred = rpn_forward(self.rpn, pyramid)
            proposals, _ = generate_proposals(
                pred,
                anchors,
                h,
                w,
                mc.pre_nms_infer,
                mc.post_nms_infer,
                mc.rpn_nms_threshold,
                delta_std=self._delta_std(),
            )
            if proposals.shape[0] == 0:
                return []
            pooled = roi_align(pyramid, proposals, h, w, mc.pool_size)
            class_logits, delta_pred = self.heads.classify(pooled)
            probs = nn.activation(class_logits, "softmax_rows")
            idx, class_ids, scores, boxes = select_detections(
                probs, delta_pred, proposals, h, w, mc, delta_std=self._delta_std()
            )
            if idx.size == 0:
                return []
            # mask branch only on the surviving boxes, pooled at the refined box
            pooled_mask = roi_align(pyramid, boxes, h, w, mc.mask_pool_size)
            mask_probs = nn.activation(self.heads.mask(pooled_mask), "sigmoid").data
        detections = []
        for row, (cid, score, box) in enumerate(zip(class_ids, scores, boxes)):
            mask = paste_mask(mask_probs[row, cid - 1], box, h, w, mc.mask_threshold)
            if not mask.any():
                continue
            detections.append(Detection(int(cid), float(score), box.copy(), mask))
        return detections


def build_model(cfg: RunConfig) -> SectionSegmenter:
    return SectionSegmenter(cfg)
