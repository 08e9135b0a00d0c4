"""Annotation manifests, dihedral (x8) augmentation, and dataset splitting."""

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .boxes import BoundingBox
from .errors import ConfigError, DataError
from .imgio import load_image, save_image
from .scene import LabeledFrame, TrackingMode

MANIFEST_NAME = "manifest.json"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    ALL = "all"  # not yet partitioned


@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str  # relative to the manifest location
    width: int
    height: int
    boxes: tuple  # of BoundingBox
    tracking_mode: TrackingMode

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"{self.image_path}: non-positive dimensions")


@dataclass
class DatasetManifest:
    records: list
    split: Split = Split.ALL
    augmentation_applied: bool = False

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.image_path in seen:
                raise DataError(f"duplicate image_path in manifest: {r.image_path}")
            seen.add(r.image_path)

    def __len__(self):
        return len(self.records)

    @property
    def total_boxes(self):
        return sum(len(r.boxes) for r in self.records)


# ---------------------------------------------------------------------------
# dihedral group of the pixel grid

class D4Element(NamedTuple):
    """rot quarter-turns counterclockwise, then optional horizontal flip."""

    rot: int
    flip: bool


D4_ELEMENTS = tuple(D4Element(k, f) for f in (False, True) for k in range(4))
D4_IDENTITY = D4Element(0, False)

_D4_NAMES = {
    (0, False): "r0", (1, False): "r90", (2, False): "r180", (3, False): "r270",
    (0, True): "r0f", (1, True): "r90f", (2, True): "r180f", (3, True): "r270f",
}


def d4_name(element) -> str:
    return _D4_NAMES[(element[0] % 4, bool(element[1]))]


def d4_compose(a, b) -> D4Element:
    """Element equal to applying a first, then b."""
    ka, fa = a[0] % 4, bool(a[1])
    kb, fb = b[0] % 4, bool(b[1])
    if fa:
        return D4Element((ka - kb) % 4, not fb)
    return D4Element((ka + kb) % 4, fb)


def d4_apply_image(pixels: np.ndarray, element) -> np.ndarray:
    k, f = element[0] % 4, bool(element[1])
    out = np.rot90(pixels, k)
    if f:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def d4_apply_point(x, y, element, width, height):
    """Map a continuous point through the element; returns (x', y', w', h')."""
    k, f = element[0] % 4, bool(element[1])
    w, h = float(width), float(height)
    for _ in range(k):  # one CCW quarter turn: (x, y) -> (y, w - x), dims swap
        x, y = y, w - x
        w, h = h, w
    if f:
        x = w - x
    return x, y, w, h


def d4_apply_box(box: BoundingBox, element, width, height) -> BoundingBox:
    xs, ys = [], []
    for cx, cy in ((box.x_min, box.y_min), (box.x_min, box.y_max),
                   (box.x_max, box.y_min), (box.x_max, box.y_max)):
        x, y, _, _ = d4_apply_point(cx, cy, element, width, height)
        xs.append(x)
        ys.append(y)
    return BoundingBox(min(xs), min(ys), max(xs), max(ys))


def transform_d4(frame: LabeledFrame, element) -> LabeledFrame:
    """Apply one dihedral element to a labeled frame (pixels and boxes)."""
    w, h = frame.width, frame.height
    return LabeledFrame(
        pixels=d4_apply_image(frame.pixels, element),
        boxes=[d4_apply_box(b, element, w, h) for b in frame.boxes],
        tracking_mode=frame.tracking_mode,
        provenance=frame.provenance,
    )


# ---------------------------------------------------------------------------
# augmentation and splitting

def augment_x8(manifest: DatasetManifest, manifest_dir, out_dir) -> DatasetManifest:
    """Expand a manifest by all 8 dihedral transforms of every frame.

    Reads images relative to manifest_dir, writes transformed images under
    out_dir, and returns the augmented manifest (8x the records). Refuses
    already-augmented manifests so the factor stays exactly 8.
    """
    if manifest.augmentation_applied:
        raise DataError("manifest is already augmented; refusing to augment again")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    new_records = []
    for i, rec in enumerate(manifest.records):
        pixels = load_image(Path(manifest_dir) / rec.image_path)
        if pixels.shape != (rec.height, rec.width):
            raise DataError(
                f"record {i}: image {rec.image_path} is {pixels.shape[1]}x{pixels.shape[0]}, "
                f"manifest says {rec.width}x{rec.height}"
            )
        stem = Path(rec.image_path).stem
        ext = Path(rec.image_path).suffix or ".png"
        for element in D4_ELEMENTS:
            out_px = d4_apply_image(pixels, element)
            boxes = tuple(d4_apply_box(b, element, rec.width, rec.height) for b in rec.boxes)
            rel = f"images/{i:04d}_{stem}_{d4_name(element)}{ext}"
            save_image(out_dir / rel, out_px)
            new_records.append(AnnotationRecord(
                image_path=rel,
                width=out_px.shape[1],
                height=out_px.shape[0],
                boxes=boxes,
                tracking_mode=rec.tracking_mode,
            ))
    out = DatasetManifest(records=new_records, split=manifest.split, augmentation_applied=True)
    save_manifest(out, out_dir / MANIFEST_NAME)
    return out


def split_dataset(records, train_fraction, seed) -> tuple:
    """Deterministic shuffled partition into (train, val) manifests.

    len(train) = round(train_fraction * N); every record lands in exactly one split.
    """
    records = list(records)
    if len(records) < 2:
        raise DataError(f"need at least 2 records to split, got {len(records)}")
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(train_fraction * len(records)))
    train = [records[i] for i in perm[:n_train]]
    val = [records[i] for i in perm[n_train:]]
    return (DatasetManifest(train, split=Split.TRAIN),
            DatasetManifest(val, split=Split.VAL))


# ---------------------------------------------------------------------------
# persistence

def _record_to_dict(rec: AnnotationRecord):
    return {
        "image": rec.image_path,
        "width": rec.width,
        "height": rec.height,
        "boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in rec.boxes],
        "mode": rec.tracking_mode.value,
    }


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "split": manifest.split.value,
        "augmentation_applied": manifest.augmentation_applied,
        "records": [_record_to_dict(r) for r in manifest.records],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _parse_record(i, d):
    for key in ("image", "width", "height", "boxes", "mode"):
        if key not in d:
            raise DataError(f"record {i}: missing field '{key}'")
    boxes = []
    for j, row in enumerate(d["boxes"]):
        if len(row) != 4:
            raise DataError(f"record {i}: box {j}: expected 4 coordinates, got {len(row)}")
        x0, y0, x1, y1 = (float(v) for v in row)
        if x0 >= x1:
            raise DataError(f"record {i}: box {j}: x_min ({x0}) >= x_max ({x1})")
        if y0 >= y1:
            raise DataError(f"record {i}: box {j}: y_min ({y0}) >= y_max ({y1})")
        w, h = float(d["width"]), float(d["height"])
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise DataError(f"record {i}: box {j}: outside image bounds {w:g}x{h:g}")
        boxes.append(BoundingBox(x0, y0, x1, y1))
    try:
        mode = TrackingMode(d["mode"])
    except ValueError:
        raise DataError(f"record {i}: unknown tracking mode '{d['mode']}'") from None
    try:
        return AnnotationRecord(
            image_path=str(d["image"]),
            width=int(d["width"]),
            height=int(d["height"]),
            boxes=tuple(boxes),
            tracking_mode=mode,
        )
    except (TypeError, ValueError) as e:
        raise DataError(f"record {i}: {e}") from None


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest JSON file; errors name the offending record and field."""
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not valid JSON ({e})") from None
    try:
        split = Split(doc.get("split", "all"))
    except ValueError:
        raise DataError(f"{path}: unknown split '{doc.get('split')}'") from None
    records = [_parse_record(i, d) for i, d in enumerate(doc.get("records", []))]
    return DatasetManifest(
        records=records,
        split=split,
        augmentation_applied=bool(doc.get("augmentation_applied", False)),
    )


def write_frames(frames, out_dir, image_format="png", split=Split.ALL,
                 name_fn=None) -> DatasetManifest:
    """Write LabeledFrames as images plus a manifest under out_dir."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    if name_fn is None:
        name_fn = lambda i: f"frame_{i:04d}"
    records = []
    for i, fr in enumerate(frames):
        rel = f"frames/{name_fn(i)}.{image_format}"
        save_image(out_dir / rel, fr.pixels)
        records.append(AnnotationRecord(
            image_path=rel,
            width=fr.width,
            height=fr.height,
            boxes=tuple(fr.boxes),
            tracking_mode=fr.tracking_mode,
        ))
    manifest = DatasetManifest(records=records, split=split)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def manifest_tracking_mode(manifest: DatasetManifest) -> TrackingMode:
    """The single tracking mode of a manifest; mixed modes are rejected."""
    modes = {r.tracking_mode for r in manifest.records}
    if len(modes) != 1:
        raise DataError(f"manifest mixes tracking modes: {sorted(m.value for m in modes)}")
    return modes.pop()
