"""Single-class SSD-style detector: anchors, matching, loss, training, inference.

Two configurations are provided. "Small" pairs a 16-channel stem with six
t=4 inverted residuals and detection heads at strides 8 and 16; "Large" uses
a 32-channel stem, twelve t=6 blocks and heads at strides 4, 8 and 16. Both
consume 256x256 single-channel frames scaled to [0,1] by the 16-bit maximum.
"""

import json
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from .boxes import BoundingBox, Detection, clip_box, iou, iou_matrix
from .data import load_manifest, manifest_tracking_mode
from .errors import ConfigError, DataError, ShapeError
from .imgio import load_image, resize_bilinear
from .nn import Adam, ChannelAffine, Conv2D, DepthwiseConv2D, InvertedResidual, ReLU6, \
    Sequential, load_tensors, save_tensors
from .scene import TrackingMode, derive_seed

INPUT_SCALE = 65535.0  # 16-bit full scale -> [0, 1]
_INIT_TAG = 0xD37EC7


class SizeClass(Enum):
    SMALL = "small"
    LARGE = "large"


class Precision(Enum):
    FLOAT = "float"
    QUANTIZED = "quantized"


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid: one entry of anchor_scales_px per feature-map stride.

    Anchors are enumerated row-major over cells, then scales, then aspect
    ratios, maps concatenated in stride order.
    """

    feature_map_strides: tuple
    anchor_scales_px: tuple  # tuple of scale tuples, one per stride
    aspect_ratios: tuple = (1.0, 3.0, 1.0 / 3.0)

    def __post_init__(self):
        if len(self.feature_map_strides) != len(self.anchor_scales_px):
            raise ConfigError(
                f"{len(self.feature_map_strides)} strides but "
                f"{len(self.anchor_scales_px)} scale groups"
            )
        if not self.feature_map_strides:
            raise ConfigError("anchor config needs at least one feature map")
        for s in self.feature_map_strides:
            if s < 1:
                raise ConfigError(f"stride must be >= 1, got {s}")
        for group in self.anchor_scales_px:
            for s in group:
                if s <= 0:
                    raise ConfigError(f"anchor scale must be > 0, got {s}")
        for r in self.aspect_ratios:
            if r <= 0:
                raise ConfigError(f"aspect ratio must be > 0, got {r}")

    @property
    def anchors_per_cell(self):
        return {len(g) * len(self.aspect_ratios) for g in self.anchor_scales_px}

    def to_dict(self):
        return {
            "feature_map_strides": list(self.feature_map_strides),
            "anchor_scales_px": [list(g) for g in self.anchor_scales_px],
            "aspect_ratios": list(self.aspect_ratios),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature_map_strides=tuple(d["feature_map_strides"]),
            anchor_scales_px=tuple(tuple(g) for g in d["anchor_scales_px"]),
            aspect_ratios=tuple(d["aspect_ratios"]),
        )


def build_anchors(config: AnchorConfig, input_size) -> np.ndarray:
    """All anchors as an (A, 4) array of (cx, cy, w, h), fixed order.

    Cells are visited row-major; within a cell, scales vary before aspect
    ratios. An aspect ratio r produces a (scale*sqrt(r)) x (scale/sqrt(r))
    anchor; any anchor larger than the input is rejected.
    """
    in_h, in_w = int(input_size[0]), int(input_size[1])
    out = []
    for stride, scales in zip(config.feature_map_strides, config.anchor_scales_px):
        fh = -(-in_h // stride)
        fw = -(-in_w // stride)
        sizes = []
        for s in scales:
            for r in config.aspect_ratios:
                w = s * math.sqrt(r)
                h = s / math.sqrt(r)
                if w > in_w or h > in_h:
                    raise ConfigError(
                        f"anchor {w:.1f}x{h:.1f} (scale {s}, ratio {r}) exceeds "
                        f"input {in_w}x{in_h}"
                    )
                sizes.append((w, h))
        sizes = np.asarray(sizes)
        cy, cx = np.mgrid[0:fh, 0:fw].astype(np.float64)
        cx = (cx + 0.5) * stride
        cy = (cy + 0.5) * stride
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # row-major cells
        n_cells, n_sizes = len(centers), len(sizes)
        block = np.empty((n_cells, n_sizes, 4))
        block[:, :, 0] = centers[:, None, 0]
        block[:, :, 1] = centers[:, None, 1]
        block[:, :, 2] = sizes[None, :, 0]
        block[:, :, 3] = sizes[None, :, 1]
        out.append(block.reshape(-1, 4))
    return np.concatenate(out, axis=0)


def anchors_as_corners(anchors: np.ndarray) -> np.ndarray:
    """(cx, cy, w, h) anchors -> (x_min, y_min, x_max, y_max)."""
    half = anchors[:, 2:] / 2.0
    return np.concatenate([anchors[:, :2] - half, anchors[:, :2] + half], axis=1)


# ---------------------------------------------------------------------------
# box parameterization

def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Standard SSD targets: center offsets over anchor size, log size ratios.

    gt is (N, 4) corner boxes, anchors (N, 4) center form; both must pair up
    row-wise. Inverse of decode_boxes to floating-point exactness.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if gt.shape != anchors.shape:
        raise ShapeError(f"gt {gt.shape} and anchors {anchors.shape} must pair up")
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0) or np.any(anchors[:, 2:] <= 0):
        raise ConfigError("boxes and anchors must have positive dimensions")
    gcx = (gt[:, 0] + gt[:, 2]) / 2.0
    gcy = (gt[:, 1] + gt[:, 3]) / 2.0
    t = np.empty_like(gt)
    t[:, 0] = (gcx - anchors[:, 0]) / anchors[:, 2]
    t[:, 1] = (gcy - anchors[:, 1]) / anchors[:, 3]
    t[:, 2] = np.log(gw / anchors[:, 2])
    t[:, 3] = np.log(gh / anchors[:, 3])
    return t


_LOG_SIZE_CLAMP = 10.0  # exp(10) ~ 2.2e4: wild regressions stay finite


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Invert encode_boxes; returns (N, 4) corner boxes."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if offsets.shape != anchors.shape:
        raise ShapeError(f"offsets {offsets.shape} and anchors {anchors.shape} must pair up")
    cx = offsets[:, 0] * anchors[:, 2] + anchors[:, 0]
    cy = offsets[:, 1] * anchors[:, 3] + anchors[:, 1]
    w = anchors[:, 2] * np.exp(np.clip(offsets[:, 2], -_LOG_SIZE_CLAMP, _LOG_SIZE_CLAMP))
    h = anchors[:, 3] * np.exp(np.clip(offsets[:, 3], -_LOG_SIZE_CLAMP, _LOG_SIZE_CLAMP))
    out = np.empty_like(offsets)
    out[:, 0] = cx - w / 2.0
    out[:, 1] = cy - h / 2.0
    out[:, 2] = cx + w / 2.0
    out[:, 3] = cy + h / 2.0
    return out


def encode_box(gt: BoundingBox, anchor) -> np.ndarray:
    """Single-box convenience wrapper around encode_boxes."""
    return encode_boxes(np.array([gt.as_tuple()]), np.asarray(anchor).reshape(1, 4))[0]


def decode_box(offsets, anchor) -> BoundingBox:
    x0, y0, x1, y1 = decode_boxes(np.asarray(offsets).reshape(1, 4),
                                  np.asarray(anchor).reshape(1, 4))[0]
    return BoundingBox(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# matching and loss

LABEL_NEGATIVE = -1
LABEL_IGNORE = -2


def match_anchors(gt_boxes, anchors, iou_pos=0.5, iou_neg=0.4) -> np.ndarray:
    """Per-anchor labels: gt index if positive, -1 negative, -2 ignored.

    An anchor is positive when its best IoU reaches iou_pos (assigned to the
    argmax ground truth, ties to the lowest index), negative when below
    iou_neg, ignored in between. Each ground truth additionally forces its
    single best anchor positive so no target goes unrepresented.
    """
    if iou_neg > iou_pos:
        raise ConfigError(f"iou_neg ({iou_neg}) must be <= iou_pos ({iou_pos})")
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(anchors), LABEL_NEGATIVE, dtype=np.int64)
    if len(gt) == 0:
        return labels
    mat = iou_matrix(anchors_as_corners(anchors), gt)  # (A, G)
    best = mat.max(axis=1)
    best_gt = mat.argmax(axis=1)
    labels[(best >= iou_neg) & (best < iou_pos)] = LABEL_IGNORE
    labels[best >= iou_pos] = best_gt[best >= iou_pos]
    for g in range(len(gt)):
        labels[int(mat[:, g].argmax())] = g
    return labels


def ssd_loss(logits, offsets, labels, targets, neg_pos_ratio=3):
    """Detection loss and its gradients with respect to the raw predictions.

    Objectness uses binary cross-entropy with per-image hard-negative mining
    (the neg_pos_ratio highest-loss negatives per positive, at least one
    positive's worth); localization uses smooth L1 on positive anchors only.
    Both terms are normalized by the batch positive count, or 1 if none.
    Returns (loss, dlogits, doffsets).
    """
    logits = np.asarray(logits, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if logits.shape != labels.shape or offsets.shape != logits.shape + (4,):
        raise ShapeError(f"prediction shapes {logits.shape}/{offsets.shape} do not "
                         f"match labels {labels.shape}")
    pos = labels >= 0
    neg = labels == LABEL_NEGATIVE
    y = pos.astype(np.float64)
    bce = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))

    selected = pos.copy()
    for i in range(logits.shape[0]):
        k = int(neg_pos_ratio * max(1, int(pos[i].sum())))
        cand = np.flatnonzero(neg[i])
        if cand.size:
            order = np.argsort(-bce[i, cand], kind="stable")[:k]
            selected[i, cand[order]] = True

    norm = max(1.0, float(pos.sum()))
    cls_loss = float(bce[selected].sum()) / norm

    diff = offsets - targets
    adiff = np.abs(diff)
    huber = np.where(adiff < 1.0, 0.5 * diff * diff, adiff - 0.5)
    loc_loss = float(huber[pos].sum()) / norm

    dlogits = np.zeros_like(logits)
    dlogits[selected] = (expit(logits[selected]) - y[selected]) / norm
    doffsets = np.zeros_like(offsets)
    dhuber = np.where(adiff < 1.0, diff, np.sign(diff))
    doffsets[pos] = dhuber[pos] / norm
    return cls_loss + loc_loss, dlogits, doffsets


# ---------------------------------------------------------------------------
# model

_OBJECTNESS_BIAS = -4.595  # sigmoid ~ 0.01: start with everything "background"

_ARCHITECTURES = {
    SizeClass.SMALL: {
        "stem": 16,
        "expansion": 4,
        # (in, out, stride); taps feed the detection heads
        "blocks": [(16, 24, 2), (24, 24, 1), (24, 32, 2),
                   (32, 32, 1), (32, 64, 2), (64, 64, 1)],
        "taps": (3, 5),
        "strides": (8, 16),
        "scales": ((8.0, 14.0), (24.0, 40.0)),
    },
    SizeClass.LARGE: {
        "stem": 32,
        "expansion": 6,
        "blocks": [(32, 48, 2), (48, 48, 1), (48, 48, 1),
                   (48, 64, 2), (64, 64, 1), (64, 64, 1), (64, 64, 1),
                   (64, 96, 2), (96, 96, 1), (96, 96, 1), (96, 128, 1), (128, 128, 1)],
        "taps": (2, 6, 11),
        "strides": (4, 8, 16),
        "scales": ((4.0, 7.0), (8.0, 14.0), (24.0, 40.0)),
    },
}


class DetectorModel:
    """SSD-style detector: stem + inverted residual stack + per-map 3x3 heads.

    Each head emits 5 channels per anchor (4 box offsets then the objectness
    logit), reshaped so predictions line up with build_anchors order.
    """

    def __init__(self, size_class=SizeClass.SMALL, input_size=(256, 256), seed=0,
                 tracking_mode=None):
        if isinstance(size_class, str):
            size_class = SizeClass(size_class)
        spec = _ARCHITECTURES[size_class]
        self.size_class = size_class
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.tracking_mode = tracking_mode
        self.precision = Precision.FLOAT
        self.init_seed = int(seed)
        self.anchor_config = AnchorConfig(
            feature_map_strides=spec["strides"],
            anchor_scales_px=spec["scales"],
        )
        self.anchors = build_anchors(self.anchor_config, self.input_size)
        per_cell = self.anchor_config.anchors_per_cell
        if len(per_cell) != 1:
            raise ConfigError("heads require a uniform anchors-per-cell count")
        self.anchors_per_cell = per_cell.pop()

        rng = np.random.default_rng(derive_seed(seed, _INIT_TAG))
        stem_ch = spec["stem"]
        self.stem = Sequential([
            Conv2D(1, stem_ch, 3, stride=2, padding="same", bias=False, rng=rng,
                   name="stem.conv"),
            ChannelAffine(stem_ch, name="stem.affine"),
            ReLU6(name="stem.relu"),
        ], name="stem")
        self.blocks = [
            InvertedResidual(cin, cout, spec["expansion"], stride, rng=rng,
                             name=f"block{i}")
            for i, (cin, cout, stride) in enumerate(spec["blocks"])
        ]
        self.tap_indices = tuple(spec["taps"])
        head_out = self.anchors_per_cell * 5
        self.heads = []
        for i, tap in enumerate(self.tap_indices):
            head = Conv2D(spec["blocks"][tap][1], head_out, 3, stride=1,
                          padding="same", bias=True, rng=rng, name=f"head{i}")
            head.bias.value[4::5] = _OBJECTNESS_BIAS
            self.heads.append(head)

    def params(self):
        out = self.stem.params()
        for b in self.blocks:
            out.extend(b.params())
        for h in self.heads:
            out.extend(h.params())
        return out

    def _head_to_anchor_order(self, raw):
        """(N, A*5, fh, fw) -> (N, cells*A, 5) in build_anchors order."""
        n, _, fh, fw = raw.shape
        a = self.anchors_per_cell
        return raw.reshape(n, a, 5, fh, fw).transpose(0, 3, 4, 1, 2).reshape(n, fh * fw * a, 5)

    def _anchor_to_head_order(self, grad, fh, fw):
        n = grad.shape[0]
        a = self.anchors_per_cell
        return np.ascontiguousarray(
            grad.reshape(n, fh, fw, a, 5).transpose(0, 3, 4, 1, 2)
        ).reshape(n, a * 5, fh, fw)

    def forward(self, x, train=False):
        """Batch (N, 1, H, W) in [0,1] -> (offsets (N, A, 4), logits (N, A))."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != self.input_size:
            raise ShapeError(f"expected (N, 1, {self.input_size[0]}, "
                             f"{self.input_size[1]}) input, got {x.shape}")
        h = self.stem.forward(x, train=train)
        taps = []
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h, train=train)
            if i in self.tap_indices:
                taps.append(h)
        self._tap_shapes = [t.shape for t in taps]
        parts = [self._head_to_anchor_order(head.forward(t, train=train))
                 for head, t in zip(self.heads, taps)]
        raw = np.concatenate(parts, axis=1)
        return raw[:, :, :4], raw[:, :, 4]

    def backward(self, doffsets, dlogits):
        """Propagate prediction gradients back through heads, blocks and stem."""
        n = dlogits.shape[0]
        draw = np.concatenate([doffsets, dlogits[:, :, None]], axis=2)
        pos = 0
        head_grads = []
        for head, shape in zip(self.heads, self._tap_shapes):
            fh, fw = shape[2], shape[3]
            count = fh * fw * self.anchors_per_cell
            chunk = self._anchor_to_head_order(draw[:, pos : pos + count], fh, fw)
            head_grads.append(head.backward(chunk))
            pos += count
        grad = None
        tap_pos = len(self.tap_indices) - 1
        for i in reversed(range(len(self.blocks))):
            if i in self.tap_indices:
                g = head_grads[tap_pos]
                tap_pos -= 1
                grad = g if grad is None else grad + g
            grad = self.blocks[i].backward(grad)
        return self.stem.backward(grad)

    def state_tensors(self):
        """Ordered name -> array view of every parameter."""
        return {p.name: p.value for p in self.params()}

    def load_state_tensors(self, tensors):
        own = {p.name: p for p in self.params()}
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                            f"unexpected {sorted(extra)[:3]}")
        for name, p in own.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise DataError(f"{name}: checkpoint shape {arr.shape} != model "
                                f"shape {p.value.shape}")
            p.value[...] = arr


def build_detector(size_class=SizeClass.SMALL, input_size=(256, 256), seed=0,
                   tracking_mode=None) -> DetectorModel:
    return DetectorModel(size_class=size_class, input_size=input_size, seed=seed,
                         tracking_mode=tracking_mode)


# ---------------------------------------------------------------------------
# inference

def preprocess(pixels, input_size) -> np.ndarray:
    """Raw 16-bit frame -> (1, 1, H, W) float batch in [0,1] (bilinear resize)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DataError(f"expected a 2-D frame, got shape {pixels.shape}")
    x = resize_bilinear(pixels.astype(np.float64) / INPUT_SCALE, input_size)
    return x[None, None]


def nms(detections, iou_threshold=0.45):
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-confidence detection (ties to the lower
    index) and drops remaining boxes overlapping it with IoU >= threshold.
    Output is sorted by descending confidence.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept = []
    for i in order:
        if all(iou(detections[i].box, detections[j].box) < iou_threshold for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]


def detect(model: DetectorModel, pixels, confidence_threshold=0.25, nms_iou=0.45):
    """Run the float model on one raw frame; detections in original pixel coords.

    The frame is bilinearly resized to the model input and scaled to [0,1] by
    the 16-bit maximum; predictions above the confidence threshold are decoded
    against the anchors, mapped back to the source resolution, clipped to the
    frame and filtered by NMS, most confident first.
    """
    if model.precision is not Precision.FLOAT:
        raise ConfigError("model is quantized; use detect_quantized")
    x = preprocess(pixels, model.input_size)
    offsets, logits = model.forward(x, train=False)
    return _decode_detections(model, pixels.shape, offsets[0], logits[0],
                              confidence_threshold, nms_iou)


def _decode_detections(model, frame_shape, offsets, logits, confidence_threshold,
                       nms_iou):
    conf = expit(logits)
    keep = np.flatnonzero(conf >= confidence_threshold)
    if keep.size == 0:
        return []
    boxes = decode_boxes(offsets[keep], model.anchors[keep])
    src_h, src_w = frame_shape
    sx = src_w / model.input_size[1]
    sy = src_h / model.input_size[0]
    boxes *= np.array([sx, sy, sx, sy])
    dets = []
    for (x0, y0, x1, y1), c in zip(boxes, conf[keep]):
        clipped = clip_box(x0, y0, x1, y1, src_w, src_h)
        if clipped is not None:
            dets.append(Detection(BoundingBox(*clipped), float(c)))
    return nms(dets, nms_iou)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    neg_pos_ratio: int = 3
    iou_pos_threshold: float = 0.5
    iou_neg_threshold: float = 0.4
    early_stop_f1: float = None  # stop once validation F1 reaches this

    def __post_init__(self):
        if self.iou_neg_threshold > self.iou_pos_threshold:
            raise ConfigError(
                f"iou_neg_threshold ({self.iou_neg_threshold}) must not exceed "
                f"iou_pos_threshold ({self.iou_pos_threshold})"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.neg_pos_ratio < 0:
            raise ConfigError(f"neg_pos_ratio must be >= 0, got {self.neg_pos_ratio}")


def _load_examples(manifest_path):
    manifest = load_manifest(manifest_path)
    if not manifest.records:
        raise DataError(f"{manifest_path}: dataset is empty")
    mode = manifest_tracking_mode(manifest)
    base = Path(manifest_path).parent
    examples = []
    for rec in manifest.records:
        pixels = load_image(base / rec.image_path)
        boxes = np.array([b.as_tuple() for b in rec.boxes], dtype=np.float64).reshape(-1, 4)
        examples.append((pixels, boxes))
    return examples, mode


def _prepare_batch_arrays(examples, model, train_config):
    """Resize frames and precompute anchor labels/targets in input coords."""
    in_h, in_w = model.input_size
    xs, labels, targets = [], [], []
    for pixels, boxes in examples:
        xs.append(preprocess(pixels, model.input_size)[0])
        sy = in_h / pixels.shape[0]
        sx = in_w / pixels.shape[1]
        scaled = boxes * np.array([sx, sy, sx, sy])
        lab = match_anchors(scaled, model.anchors,
                            iou_pos=train_config.iou_pos_threshold,
                            iou_neg=train_config.iou_neg_threshold)
        tgt = np.zeros((len(model.anchors), 4))
        pos = lab >= 0
        if pos.any():
            tgt[pos] = encode_boxes(scaled[lab[pos]], model.anchors[pos])
        labels.append(lab)
        targets.append(tgt)
    return np.stack(xs), np.stack(labels), np.stack(targets)


def _evaluate_on_prepared(model, xs, gt_boxes_list, confidence_threshold=0.25,
                          nms_iou=0.45, match_iou=0.3, batch_size=8):
    """Validation P/R/F1 on pre-resized inputs (boxes in input coordinates)."""
    tp = fp = fn = 0
    in_shape = model.input_size
    for start in range(0, len(xs), batch_size):
        chunk = xs[start : start + batch_size]
        offsets, logits = model.forward(chunk, train=False)
        for i in range(len(chunk)):
            dets = _decode_detections(model, in_shape, offsets[i], logits[i],
                                      confidence_threshold, nms_iou)
            gts = gt_boxes_list[start + i]
            matched = np.zeros(len(gts), dtype=bool)
            for d in dets:  # already sorted by confidence
                if len(gts) == 0:
                    fp += 1
                    continue
                ious = iou_matrix(np.array([d.box.as_tuple()]), gts)[0]
                ious[matched] = -1.0
                j = int(ious.argmax())
                if ious[j] >= match_iou:
                    matched[j] = True
                    tp += 1
                else:
                    fp += 1
            fn += int((~matched).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def train(train_manifest_path, val_manifest_path, size_class=SizeClass.SMALL,
          train_config=None, input_size=(256, 256), log_fn=None):
    """Train a detector; returns (model with best-validation-F1 weights, log).

    Both manifests must carry a single, common tracking mode. The run is
    deterministic for a fixed TrainConfig.seed: batch order, initialization
    and therefore the per-epoch loss sequence repeat exactly. The log holds
    one dict per epoch: train_loss, val precision/recall/f1.
    """
    train_config = train_config or TrainConfig()
    train_examples, train_mode = _load_examples(train_manifest_path)
    val_examples, val_mode = _load_examples(val_manifest_path)
    if train_mode != val_mode:
        raise DataError(f"tracking mode mismatch: train={train_mode.value}, "
                        f"val={val_mode.value}")

    model = build_detector(size_class=size_class, input_size=input_size,
                           seed=train_config.seed, tracking_mode=train_mode)
    xs, labels, targets = _prepare_batch_arrays(train_examples, model, train_config)

    in_h, in_w = model.input_size
    val_xs = np.stack([preprocess(p, model.input_size)[0] for p, _ in val_examples])
    val_gts = [b * np.array([in_w / p.shape[1], in_h / p.shape[0],
                             in_w / p.shape[1], in_h / p.shape[0]])
               for p, b in val_examples]

    optimizer = Adam(model.params(), lr=train_config.learning_rate)
    shuffle_rng = np.random.default_rng(derive_seed(train_config.seed, 0x5AFFE))
    log = []
    best_f1 = -1.0
    best_state = None
    n = len(xs)
    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            offsets, logits = model.forward(xs[idx], train=True)
            loss, dlogits, doffsets = ssd_loss(
                logits, offsets, labels[idx], targets[idx],
                neg_pos_ratio=train_config.neg_pos_ratio)
            optimizer.zero_grad()
            model.backward(doffsets, dlogits)
            optimizer.step()
            epoch_loss += loss
            n_batches += 1
        precision, recall, f1 = _evaluate_on_prepared(model, val_xs, val_gts)
        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss / n_batches,
            "val_precision": precision,
            "val_recall": recall,
            "val_f1": f1,
        }
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if f1 > best_f1:
            best_f1 = f1
            best_state = {name: arr.copy() for name, arr in model.state_tensors().items()}
        if (train_config.early_stop_f1 is not None
                and f1 >= train_config.early_stop_f1):
            break
    if best_state is not None:
        model.load_state_tensors(best_state)
    return model, log


# ---------------------------------------------------------------------------
# checkpoints

_CHECKPOINT_FORMAT = "satdet-detector"
_CHECKPOINT_VERSION = 1


def sidecar_path(checkpoint_path):
    return Path(checkpoint_path).with_suffix(".json")


def save_checkpoint(model: DetectorModel, path) -> None:
    """Write weights (float32 payloads) plus a JSON sidecar describing the model."""
    tensors = {name: arr.astype(np.float32) for name, arr in model.state_tensors().items()}
    save_tensors(path, tensors)
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "precision": model.precision.value,
        "size_class": model.size_class.value,
        "input_size": list(model.input_size),
        "tracking_mode": model.tracking_mode.value if model.tracking_mode else None,
        "init_seed": model.init_seed,
        "anchor_config": model.anchor_config.to_dict(),
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    if not os.path.exists(side):
        raise DataError(f"checkpoint sidecar not found: {side}")
    with open(side) as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{side}: not valid JSON ({e})") from None
    if meta.get("format") != _CHECKPOINT_FORMAT:
        raise DataError(f"{side}: not a detector checkpoint (format "
                        f"{meta.get('format')!r})")
    return meta


def load_checkpoint(path) -> DetectorModel:
    """Rebuild a float DetectorModel from a checkpoint written by save_checkpoint."""
    meta = read_sidecar(path)
    if meta.get("precision") != Precision.FLOAT.value:
        raise DataError(f"{path}: precision is {meta.get('precision')!r}; "
                        "load it with the quantized loader")
    mode = meta.get("tracking_mode")
    model = build_detector(
        size_class=SizeClass(meta["size_class"]),
        input_size=tuple(meta["input_size"]),
        seed=int(meta.get("init_seed", 0)),
        tracking_mode=TrackingMode(mode) if mode else None,
    )
    expected = AnchorConfig.from_dict(meta["anchor_config"])
    if expected != model.anchor_config:
        raise DataError(f"{path}: anchor config does not match the "
                        f"{model.size_class.value} architecture")
    model.load_state_tensors(load_tensors(path))
    return model
