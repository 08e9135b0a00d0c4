"""Dihedral x8 augmentation with exact box transforms, then a seeded split.

Every frame has 8 lossless symmetries (4 rotations x optional flip); the
boxes transform with the pixels, so augmented labels stay exact. The split
is a seeded shuffle: the same seed always lands the same frames in train.

Run:  python3 demos/02_augment_and_split.py
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np

from satdet import (
    D4_ELEMENTS,
    SceneConfig,
    d4_name,
    generate_observation_set,
    load_manifest,
    save_manifest,
    split_dataset,
    transform_d4,
    write_frames,
)
from satdet.data import MANIFEST_NAME, augment_x8
from satdet.imgio import load_image

config = SceneConfig(width_px=128, height_px=128, star_count=6, rso_count=1,
                     rso_mag_range=(6.5, 8.0), psf_sigma_px=2.0,
                     background_level=120.0, read_noise_sigma=3.0)
frames = generate_observation_set(config, n_obs=6, frames_per_obs=1, master_seed=3)
print(f"source: {len(frames)} frames, {sum(len(f.boxes) for f in frames)} boxes")

frame = frames[0]
print(f"\nall 8 dihedral transforms of frame 0 (box of RSO 0):")
for element in D4_ELEMENTS:
    t = transform_d4(frame, element)
    b = t.boxes[0]
    print(f"  {d4_name(element):5s} -> ({b.x_min:6.1f}, {b.y_min:6.1f}) .. "
          f"({b.x_max:6.1f}, {b.y_max:6.1f})")

work = Path(tempfile.mkdtemp(prefix="satdet_demo_"))
try:
    manifest = write_frames(frames, work / "raw")
    train_m, val_m = split_dataset(manifest.records, train_fraction=4 / 6, seed=0)
    print(f"\nsplit {len(manifest)} -> {len(train_m)} train / {len(val_m)} val")

    for name, part in (("train", train_m), ("val", val_m)):
        d = work / name
        (d / "frames").mkdir(parents=True)
        for rec in part.records:
            shutil.copyfile(work / "raw" / rec.image_path, d / rec.image_path)
        save_manifest(part, d / MANIFEST_NAME)

    augmented = augment_x8(load_manifest(work / "train" / MANIFEST_NAME),
                           work / "train", work / "train_x8")
    print(f"augment x8: {len(train_m)} -> {len(augmented)} frames "
          f"({augmented.total_boxes} boxes)")

    # pixel statistics are invariant under the dihedral group
    totals = [float(load_image(work / "train_x8" / rec.image_path).sum())
              for rec in augmented.records[:8]]
    print(f"flux of the 8 views of frame 0 all equal: "
          f"{np.ptp(totals) == 0.0} (sum {totals[0]:.0f})")
finally:
    shutil.rmtree(work)
