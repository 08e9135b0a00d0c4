"""Detection metrics, latency benchmarking, a classical baseline, annotation.

The metric conventions: greedy confidence-ordered matching at a fixed IoU
threshold (default 0.3, chosen because point-source boxes span only a few
pixels), precision/recall/F1 with the 0/0 -> 0 convention.
"""

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .boxes import BoundingBox, Detection, clip_box, iou, iou_matrix
from .errors import ConfigError, DataError
from .scene import TrackingMode


@dataclass
class MatchResult:
    """Counts from matching one frame's detections against ground truth."""

    tp: int
    fp: int
    fn: int
    matched_pairs: list = field(default_factory=list)  # (det_idx, gt_idx, iou)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    confidence_threshold: float = None
    iou_match_threshold: float = None
    n_frames: int = 0
    n_targets: int = 0
    per_frame: list = field(default_factory=list)

    def to_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confidence_threshold": self.confidence_threshold,
            "iou_match_threshold": self.iou_match_threshold,
            "n_frames": self.n_frames,
            "n_targets": self.n_targets,
            "per_frame": self.per_frame,
        }


@dataclass
class LatencyReport:
    n_images: int
    mean_s: float
    std_s: float
    p50_s: float
    p95_s: float

    def to_dict(self):
        return {"n_images": self.n_images, "mean_s": self.mean_s, "std_s": self.std_s,
                "p50_s": self.p50_s, "p95_s": self.p95_s}


class SourceShape(Enum):
    POINT = "point"
    STREAK = "streak"


def expected_shape_for_mode(mode: TrackingMode) -> SourceShape:
    """The RSO signature under each tracking mode: rate-track images points."""
    return SourceShape.POINT if mode is TrackingMode.RATE_TRACK else SourceShape.STREAK


# ---------------------------------------------------------------------------
# matching and scalar metrics

def match_detections(detections, gt_boxes, iou_thr=0.3, conf_thr=0.25) -> MatchResult:
    """Greedy matching: each detection, in descending confidence (ties by
    lower index), claims the highest-IoU unmatched ground truth with IoU at
    least iou_thr. Detections below conf_thr are discarded first.
    """
    order = sorted(
        (i for i, d in enumerate(detections) if d.confidence >= conf_thr),
        key=lambda i: (-detections[i].confidence, i),
    )
    gts = np.asarray([b.as_tuple() if isinstance(b, BoundingBox) else tuple(b)
                      for b in gt_boxes], dtype=np.float64).reshape(-1, 4)
    matched = np.zeros(len(gts), dtype=bool)
    pairs = []
    fp = 0
    for i in order:
        if len(gts) == 0:
            fp += 1
            continue
        ious = iou_matrix(np.array([detections[i].box.as_tuple()]), gts)[0]
        ious[matched] = -1.0
        j = int(ious.argmax())
        if ious[j] >= iou_thr:
            matched[j] = True
            pairs.append((i, j, float(ious[j])))
        else:
            fp += 1
    return MatchResult(tp=len(pairs), fp=fp, fn=int((~matched).sum()),
                       matched_pairs=pairs)


def f1_score(precision, recall) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(m: MatchResult, confidence_threshold=None,
                        iou_match_threshold=None) -> EvalReport:
    """P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R); all 0/0 cases give 0."""
    p = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    r = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    f1 = f1_score(p, r)
    return EvalReport(precision=p, recall=r, f1=f1,
                      confidence_threshold=confidence_threshold,
                      iou_match_threshold=iou_match_threshold,
                      n_targets=m.tp + m.fn)


def evaluate_detector(detect_fn, frames, confidence_threshold=0.25,
                      match_iou=0.3) -> EvalReport:
    """Aggregate P/R/F1 of a detector callable over labeled frames.

    detect_fn maps a raw 2-D pixel array to a list of Detection; frames is a
    sequence of LabeledFrame (or any object with .pixels and .boxes). The
    confidence threshold is applied here during matching, so detect_fn should
    not filter more aggressively than this threshold itself.
    """
    tp = fp = fn = 0
    per_frame = []
    n_targets = 0
    for idx, frame in enumerate(frames):
        dets = detect_fn(frame.pixels)
        m = match_detections(dets, frame.boxes, iou_thr=match_iou,
                             conf_thr=confidence_threshold)
        tp += m.tp
        fp += m.fp
        fn += m.fn
        n_targets += len(frame.boxes)
        per_frame.append({"frame": idx, "tp": m.tp, "fp": m.fp, "fn": m.fn})
    report = precision_recall_f1(MatchResult(tp, fp, fn),
                                 confidence_threshold=confidence_threshold,
                                 iou_match_threshold=match_iou)
    report.n_frames = len(per_frame)
    report.n_targets = n_targets
    report.per_frame = per_frame
    return report


# ---------------------------------------------------------------------------
# latency

def benchmark_latency(detect_fn, frames, warmup=5) -> LatencyReport:
    """Wall-clock per-frame latency of detect_fn over the frames, in order.

    The first `warmup` calls run on the leading frames and are excluded from
    the statistics; every frame is then timed individually.
    """
    frames = list(frames)
    if not frames:
        raise DataError("benchmark needs at least one frame")
    for f in frames[: max(0, warmup)]:
        detect_fn(f)
    times = np.empty(len(frames))
    for i, f in enumerate(frames):
        t0 = time.perf_counter()
        detect_fn(f)
        times[i] = time.perf_counter() - t0
    return LatencyReport(
        n_images=len(frames),
        mean_s=float(times.mean()),
        std_s=float(times.std()),
        p50_s=float(np.percentile(times, 50)),
        p95_s=float(np.percentile(times, 95)),
    )


# ---------------------------------------------------------------------------
# classical baseline detector

def baseline_detect(pixels, expected_shape, threshold_sigma=5.0, min_pixels=3,
                    elongation_split=2.0):
    """Classical matched detector: robust threshold, blobs, moment shape test.

    Background and noise come from the frame median and MAD (sigma =
    1.4826 * MAD); pixels above median + threshold_sigma * sigma are labeled
    into 8-connected components. Components smaller than min_pixels are
    dropped (isolated noise excursions). Each component's intensity-weighted
    second moments give an elongation sqrt(lambda_max/lambda_min): below
    elongation_split it reads as a point source, otherwise as a streak, and
    only components matching expected_shape are returned. Boxes cover the
    union of the thresholded extent and the 3-sigma moment ellipse;
    confidence is min(1, peak_snr / 20).
    """
    if isinstance(expected_shape, str):
        expected_shape = SourceShape(expected_shape)
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a 2-D frame, got shape {img.shape}")
    h, w = img.shape
    med = float(np.median(img))
    sigma = 1.4826 * float(np.median(np.abs(img - med)))
    mask = img > med + threshold_sigma * sigma
    labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    detections = []
    for ys, xs in _component_indices(labels, n_comp):
        if len(xs) < min_pixels:
            continue
        weights = img[ys, xs] - med
        total = weights.sum()
        cx = float((weights * (xs + 0.5)).sum() / total)
        cy = float((weights * (ys + 0.5)).sum() / total)
        dx = xs + 0.5 - cx
        dy = ys + 0.5 - cy
        vxx = float((weights * dx * dx).sum() / total)
        vyy = float((weights * dy * dy).sum() / total)
        vxy = float((weights * dx * dy).sum() / total)
        tr = vxx + vyy
        det = vxx * vyy - vxy * vxy
        disc = max(tr * tr / 4.0 - det, 0.0)
        lam_hi = tr / 2.0 + math.sqrt(disc)
        lam_lo = max(tr / 2.0 - math.sqrt(disc), 1e-6)
        elongation = math.sqrt(lam_hi / lam_lo)
        shape = SourceShape.POINT if elongation < elongation_split else SourceShape.STREAK
        if shape is not expected_shape:
            continue
        x0 = min(float(xs.min()), cx - 3.0 * math.sqrt(vxx))
        x1 = max(float(xs.max() + 1), cx + 3.0 * math.sqrt(vxx))
        y0 = min(float(ys.min()), cy - 3.0 * math.sqrt(vyy))
        y1 = max(float(ys.max() + 1), cy + 3.0 * math.sqrt(vyy))
        clipped = clip_box(x0, y0, x1, y1, w, h)
        if clipped is None:
            continue
        peak_snr = (float(img[ys, xs].max()) - med) / sigma if sigma > 0 else float("inf")
        detections.append(Detection(BoundingBox(*clipped),
                                    min(1.0, peak_snr / 20.0)))
    detections.sort(key=lambda d: -d.confidence)
    return detections


def _component_indices(labels, n_comp):
    slices = ndimage.find_objects(labels)
    for comp, sl in zip(range(1, n_comp + 1), slices):
        ys, xs = np.nonzero(labels[sl] == comp)
        yield ys + sl[0].start, xs + sl[1].start


# ---------------------------------------------------------------------------
# annotation and tables

_DET_COLOR = (80, 255, 120)
_GT_COLOR = (90, 160, 255)


def render_annotated(pixels, detections, gt_boxes=()) -> np.ndarray:
    """Tone-mapped RGB copy of a 16-bit frame with boxes drawn on it.

    Ground-truth boxes appear in blue, detections in green with their
    confidence printed above the box. Output is (H, W, 3) uint8 with the
    input's spatial dimensions.
    """
    img = np.asarray(pixels, dtype=np.float64)
    lo, hi = np.percentile(img, [1.0, 99.7])
    hi = max(hi, lo + 1.0)
    gray = np.clip((img - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    canvas = Image.fromarray(np.stack([gray] * 3, axis=-1))
    draw = ImageDraw.Draw(canvas)
    for b in gt_boxes:
        draw.rectangle([b.x_min, b.y_min, b.x_max, b.y_max], outline=_GT_COLOR, width=1)
    for d in detections:
        b = d.box
        draw.rectangle([b.x_min, b.y_min, b.x_max, b.y_max], outline=_DET_COLOR, width=1)
        draw.text((b.x_min + 1, max(0.0, b.y_min - 11)), f"{d.confidence:.2f}",
                  fill=_DET_COLOR)
    return np.asarray(canvas)


def format_eval_table(rows) -> str:
    """Aligned text table; rows are (name, EvalReport) pairs."""
    lines = [f"{'Model':<24}{'Precision':>10}{'Recall':>10}{'F1':>10}"
             f"{'Thresh':>8}{'Frames':>8}{'Targets':>9}"]
    for name, r in rows:
        thr = "-" if r.confidence_threshold is None else f"{r.confidence_threshold:g}"
        lines.append(f"{name:<24}{r.precision:>10.4f}{r.recall:>10.4f}{r.f1:>10.4f}"
                     f"{thr:>8}{r.n_frames:>8}{r.n_targets:>9}")
    return "\n".join(lines)


def format_latency_table(rows) -> str:
    """Aligned text table; rows are (name, LatencyReport) pairs."""
    lines = [f"{'Model':<24}{'N':>6}{'Mean (s)':>11}{'Std (s)':>11}"
             f"{'P50 (s)':>11}{'P95 (s)':>11}"]
    for name, r in rows:
        lines.append(f"{name:<24}{r.n_images:>6}{r.mean_s:>11.4f}{r.std_s:>11.4f}"
                     f"{r.p50_s:>11.4f}{r.p95_s:>11.4f}")
    return "\n".join(lines)
