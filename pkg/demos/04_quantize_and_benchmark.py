"""Quantize the demo checkpoint to int8 and compare accuracy and latency.

Post-training quantization here is the full story: calibrate activation
ranges on training frames, fold weights to int8 and biases to int32, then
run the integer inference path. The quantized model should match the float
model's F1 almost exactly while running faster and storing in about a
quarter of the bytes.

Run demos/03_train_small_detector.py first (it writes the checkpoint), or
let this script train a fresh one if none is found.

Run:  python3 demos/04_quantize_and_benchmark.py
"""

import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from satdet import (
    LabeledFrame,
    SceneConfig,
    TrackingMode,
    benchmark_latency,
    calibrate,
    convert_model,
    detect,
    detect_quantized,
    evaluate_detector,
    format_eval_table,
    format_latency_table,
    generate_observation_set,
    load_checkpoint,
    save_quantized_checkpoint,
)

out = Path(__file__).parent / "output"
ckpt = out / "demo_small.sdtn"
if not ckpt.exists():
    print("no demo checkpoint yet; running demo 03 to train one...")
    subprocess.run([sys.executable,
                    str(Path(__file__).parent / "03_train_small_detector.py")],
                   check=True)
model = load_checkpoint(ckpt)
print(f"loaded {ckpt} ({model.size_class.value}, "
      f"input {model.input_size[0]}x{model.input_size[1]})")

base = SceneConfig(
    width_px=192, height_px=192,
    tracking_mode=TrackingMode.RATE_TRACK,
    star_count=8, star_mag_range=(8.0, 11.0),
    rso_count=2, rso_mag_range=(6.0, 7.5),
    streak_length_px=35.0, psf_sigma_px=2.5,
    background_level=120.0, read_noise_sigma=3.0,
)

calib_frames = [f.pixels for f in
                generate_observation_set(base, n_obs=16, frames_per_obs=1,
                                         master_seed=500)]
qmodel = convert_model(model, calibrate(model, calib_frames))
save_quantized_checkpoint(qmodel, out / "demo_small_quant.sdtn")
float_bytes = os.path.getsize(ckpt)
quant_bytes = os.path.getsize(out / "demo_small_quant.sdtn")
print(f"checkpoint bytes: float {float_bytes}, int8 {quant_bytes} "
      f"({float_bytes / quant_bytes:.2f}x smaller)")

eval_frames = generate_observation_set(base, n_obs=20, frames_per_obs=1,
                                       master_seed=600)
frep = evaluate_detector(lambda p: detect(model, p, confidence_threshold=0.25),
                         eval_frames, confidence_threshold=0.25, match_iou=0.3)
qrep = evaluate_detector(
    lambda p: detect_quantized(qmodel, p, confidence_threshold=0.25),
    eval_frames, confidence_threshold=0.25, match_iou=0.3)
print()
print(format_eval_table([("small (float)", frep), ("small (int8)", qrep)]))
print(f"\nF1 difference float vs int8: {abs(frep.f1 - qrep.f1):.4f}")

bench = [f.pixels for f in eval_frames]
lat_f = benchmark_latency(lambda p: detect(model, p), bench, warmup=3)
lat_q = benchmark_latency(lambda p: detect_quantized(qmodel, p), bench, warmup=3)
print()
print(format_latency_table([("small (float)", lat_f), ("small (int8)", lat_q)]))
print(f"\nspeedup: {lat_f.mean_s / lat_q.mean_s:.2f}x")
