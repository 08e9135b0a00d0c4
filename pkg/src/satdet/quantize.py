"""Post-training 8-bit affine quantization and an integer inference path.

Weights are quantized symmetrically per tensor (int8, zero point 0);
activations asymmetrically from calibrated min/max ranges. Convolution biases
become int32 at scale input_scale * weight_scale, with the input zero point
folded in so the integer kernels convolve raw quantized values. Convolutions
accumulate in exact integer arithmetic (float32 BLAS when the per-channel
magnitude bound stays under 2^24, float64 otherwise); elementwise ops
(channel affine, ReLU6, skip add) dequantize, apply the float op with the
dequantized int8 parameters, and requantize, keeping the op graph
structurally identical to the float model.
"""

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .nn import (
    ChannelAffine,
    Conv2D,
    DepthwiseConv2D,
    ReLU6,
    _im2col,
    conv_output_geometry,
    load_tensors,
    save_tensors,
)
from .scene import TrackingMode
from .ssd import (
    AnchorConfig,
    DetectorModel,
    Precision,
    SizeClass,
    _decode_detections,
    build_detector,
    preprocess,
    read_sidecar,
    sidecar_path,
)

QMIN, QMAX = -128, 127
_DEGENERATE_SCALE = 1e-8
_F32_EXACT_BOUND = float(2 ** 24)  # integers below this are exact in float32


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization: q = round(v / scale) + zero_point."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0):
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if not (QMIN <= self.zero_point <= QMAX):
            raise ConfigError(f"zero_point {self.zero_point} outside "
                              f"[{QMIN}, {QMAX}]")

    def to_dict(self):
        return {"scale": self.scale, "zero_point": self.zero_point}

    @classmethod
    def from_dict(cls, d):
        return cls(scale=float(d["scale"]), zero_point=int(d["zero_point"]))


def quantization_params_from_range(lo, hi) -> QuantParams:
    """Asymmetric params covering [lo, hi], forced to include zero.

    A degenerate range (min = max = 0) falls back to scale 1e-8.
    """
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    if hi == lo:
        return QuantParams(scale=_DEGENERATE_SCALE, zero_point=0)
    scale = (hi - lo) / (QMAX - QMIN)
    zero_point = int(np.clip(round(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale=scale, zero_point=zero_point)


def symmetric_weight_params(values) -> QuantParams:
    """Symmetric per-tensor params: zero_point 0, scale max|v| / 127."""
    peak = float(np.abs(values).max()) if np.asarray(values).size else 0.0
    if peak == 0.0:
        return QuantParams(scale=_DEGENERATE_SCALE, zero_point=0)
    return QuantParams(scale=peak / QMAX, zero_point=0)


def quantize_tensor(values, params: QuantParams) -> np.ndarray:
    """Saturating affine quantization to int8."""
    q = np.rint(np.asarray(values, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_tensor(payload, params: QuantParams) -> np.ndarray:
    return (np.asarray(payload, dtype=np.float64) - params.zero_point) * params.scale


# ---------------------------------------------------------------------------
# the op trace shared by calibration, conversion and integer inference

@dataclass
class _Op:
    kind: str  # conv | dwconv | affine | relu6 | add
    name: str
    layer: object  # the float layer, None for add
    in_names: tuple
    out_name: str


def _kind_of(layer):
    if isinstance(layer, Conv2D):
        return "conv"
    if isinstance(layer, DepthwiseConv2D):
        return "dwconv"
    if isinstance(layer, ChannelAffine):
        return "affine"
    if isinstance(layer, ReLU6):
        return "relu6"
    raise ShapeError(f"unsupported layer type for quantization: {type(layer).__name__}")


def _model_ops(model: DetectorModel):
    """Flatten the detector into a linear op list with activation names."""
    ops = []
    prev = "input"
    for layer in model.stem.layers:
        ops.append(_Op(_kind_of(layer), layer.name, layer, (prev,), layer.name))
        prev = layer.name
    block_outputs = []
    for blk in model.blocks:
        block_in = prev
        for layer in blk.body.layers:
            ops.append(_Op(_kind_of(layer), layer.name, layer, (prev,), layer.name))
            prev = layer.name
        if blk.use_skip:
            out = f"{blk.name}.add"
            ops.append(_Op("add", out, None, (prev, block_in), out))
            prev = out
        block_outputs.append(prev)
    for head, tap in zip(model.heads, model.tap_indices):
        ops.append(_Op("conv", head.name, head, (block_outputs[tap],), head.name))
    return ops


def _run_float_op(op: _Op, acts):
    if op.kind == "add":
        return acts[op.in_names[0]] + acts[op.in_names[1]]
    return op.layer.forward(acts[op.in_names[0]], train=False)


def calibrate(model: DetectorModel, frames) -> dict:
    """Per-activation (min, max) ranges over representative frames.

    Runs the float model on each raw frame and records the running min/max of
    every activation tensor, keyed by activation name ("input" plus one entry
    per op output). Sixteen or more frames from the training distribution are
    recommended; fewer than one is an error.
    """
    if model.precision is not Precision.FLOAT:
        raise ConfigError("calibration requires a float model")
    frames = list(frames)
    if not frames:
        raise DataError("calibration needs at least 1 frame (16+ recommended)")
    ops = _model_ops(model)
    ranges = {}

    def record(name, arr):
        lo, hi = float(arr.min()), float(arr.max())
        if name in ranges:
            lo = min(lo, ranges[name][0])
            hi = max(hi, ranges[name][1])
        ranges[name] = (lo, hi)

    for pixels in frames:
        acts = {"input": preprocess(pixels, model.input_size)}
        record("input", acts["input"])
        for op in ops:
            acts[op.out_name] = _run_float_op(op, acts)
            record(op.out_name, acts[op.out_name])
    return ranges


# ---------------------------------------------------------------------------
# conversion

@dataclass
class _QOp:
    kind: str
    name: str
    in_names: tuple
    out_name: str
    # conv / dwconv
    weight: np.ndarray = None  # int8
    weight_params: QuantParams = None
    bias_fold: np.ndarray = None  # int32, input zero point folded in
    multiplier: float = None  # in_scale * w_scale / out_scale
    stride: tuple = None
    padding: str = None
    kernel: tuple = None
    use_f32: bool = True
    # affine
    scale_q: np.ndarray = None  # int8
    scale_params: QuantParams = None
    shift_q: np.ndarray = None  # int8
    shift_params: QuantParams = None


def _require_params(act_params, name):
    if name not in act_params:
        raise DataError(f"missing calibration for activation '{name}'")
    return act_params[name]


def _fold_conv(layer, in_qp, out_qp):
    """Quantize one conv/depthwise layer and fold the input zero point."""
    w = layer.weight.value
    w_qp = symmetric_weight_params(w)
    q_w = quantize_tensor(w, w_qp)
    bias_scale = in_qp.scale * w_qp.scale
    bias = layer.bias.value if getattr(layer, "bias", None) is not None else 0.0
    int32_max = float(2 ** 31 - 1)
    q_bias = np.clip(np.rint(np.asarray(bias, dtype=np.float64) / bias_scale),
                     -int32_max, int32_max)
    sum_axes = tuple(range(1, q_w.ndim))
    w_sums = q_w.astype(np.int64).sum(axis=sum_axes)
    bias_fold = np.clip(q_bias - in_qp.zero_point * w_sums,
                        -int32_max, int32_max).astype(np.int64)
    bound = (128.0 * np.abs(q_w.astype(np.int64)).sum(axis=sum_axes)
             + np.abs(bias_fold)).max(initial=0)
    return (q_w, w_qp, bias_fold.astype(np.int32),
            in_qp.scale * w_qp.scale / out_qp.scale, bound < _F32_EXACT_BOUND)


def _tensor_snr_db(values, dequantized):
    signal = float(np.square(values).sum())
    noise = float(np.square(values - dequantized).sum())
    if noise == 0.0:
        return None  # exact representation
    if signal == 0.0:
        return 0.0
    return 10.0 * math.log10(signal / noise)


def convert_model(model: DetectorModel, calibration) -> "QuantizedModel":
    """Quantize a trained float detector using calibrated activation ranges.

    Every weight tensor goes to int8 and every conv bias to int32; each op's
    input/output activation gets affine QuantParams derived from the
    calibrated ranges. The returned model carries a conversion_report mapping
    tensor names to quantization SNR in dB (None when the tensor is
    represented exactly).
    """
    if model.precision is not Precision.FLOAT:
        raise ConfigError("convert_model expects a float model")
    act_params = {name: quantization_params_from_range(lo, hi)
                  for name, (lo, hi) in calibration.items()}
    qops = []
    report = {}
    for op in _model_ops(model):
        in_qp = _require_params(act_params, op.in_names[0])
        out_qp = _require_params(act_params, op.out_name)
        if op.kind in ("conv", "dwconv"):
            for extra in op.in_names[1:]:
                _require_params(act_params, extra)
            q_w, w_qp, bias_fold, mult, use_f32 = _fold_conv(op.layer, in_qp, out_qp)
            qops.append(_QOp(op.kind, op.name, op.in_names, op.out_name,
                             weight=q_w, weight_params=w_qp, bias_fold=bias_fold,
                             multiplier=mult, stride=op.layer.stride,
                             padding=op.layer.padding, kernel=op.layer.kernel,
                             use_f32=use_f32))
            report[f"{op.name}.weight"] = {
                "scale": w_qp.scale,
                "snr_db": _tensor_snr_db(op.layer.weight.value,
                                         dequantize_tensor(q_w, w_qp)),
            }
        elif op.kind == "affine":
            sc, sh = op.layer.scale.value, op.layer.shift.value
            sc_qp = symmetric_weight_params(sc)
            sh_qp = symmetric_weight_params(sh)
            q_sc = quantize_tensor(sc, sc_qp)
            q_sh = quantize_tensor(sh, sh_qp)
            qops.append(_QOp("affine", op.name, op.in_names, op.out_name,
                             scale_q=q_sc, scale_params=sc_qp,
                             shift_q=q_sh, shift_params=sh_qp))
            report[f"{op.name}.scale"] = {
                "scale": sc_qp.scale,
                "snr_db": _tensor_snr_db(sc, dequantize_tensor(q_sc, sc_qp)),
            }
            report[f"{op.name}.shift"] = {
                "scale": sh_qp.scale,
                "snr_db": _tensor_snr_db(sh, dequantize_tensor(q_sh, sh_qp)),
            }
        else:
            for extra in op.in_names[1:]:
                _require_params(act_params, extra)
            qops.append(_QOp(op.kind, op.name, op.in_names, op.out_name))
    return QuantizedModel(model, qops, act_params, report)


# ---------------------------------------------------------------------------
# integer inference

class QuantizedModel:
    """Integer mirror of a DetectorModel; activations live as quantized int8
    values carried in float arrays for BLAS-friendly exact arithmetic.

    Elementwise ops are folded into single fused linear maps on the quantized
    values at construction: for an op with input scale s_x / zero point z_x
    and output s_y / z_y, requantization rint(v / s_y) + z_y is algebraically
    rewritten as rint(q_x * a + b) with precomputed a, b (z_y is an integer,
    so it commutes with rint), and the ReLU6 clamp becomes clip bounds in the
    quantized domain.
    """

    def __init__(self, source: DetectorModel, qops, act_params, report=None):
        self.size_class = source.size_class
        self.input_size = source.input_size
        self.tracking_mode = source.tracking_mode
        self.init_seed = source.init_seed
        self.anchor_config = source.anchor_config
        self.anchors = source.anchors
        self.anchors_per_cell = source.anchors_per_cell
        self.tap_indices = source.tap_indices
        self.head_names = [h.name for h in source.heads]
        self.precision = Precision.QUANTIZED
        self.ops = qops
        self.activation_params = act_params
        self.conversion_report = report or {}
        self._fused = {op.name: self._fuse(op) for op in qops}

    def _fuse(self, op):
        """Precompute the fused requantization constants for one op."""
        out_qp = self.activation_params[op.out_name]
        z_y = out_qp.zero_point
        if op.kind in ("conv", "dwconv"):
            dtype = np.float32 if op.use_f32 else np.float64
            # acc -> rint(acc * M + C_c), C_c = bias_fold_c * M + z_y
            c_vec = (op.bias_fold.astype(np.float64) * op.multiplier + z_y)
            w = op.weight.astype(dtype)
            if op.kind == "conv":
                w = np.ascontiguousarray(w.reshape(w.shape[0], -1))
            return {"dtype": dtype, "mult": dtype(op.multiplier),
                    "c": c_vec.astype(dtype), "w": w,
                    "z_in": self.activation_params[op.in_names[0]].zero_point}
        in_qp = self.activation_params[op.in_names[0]]
        if op.kind == "affine":
            sc = dequantize_tensor(op.scale_q, op.scale_params)
            sh = dequantize_tensor(op.shift_q, op.shift_params)
            a = sc * (in_qp.scale / out_qp.scale)
            b = (sh - sc * in_qp.scale * in_qp.zero_point) / out_qp.scale + z_y
            return {"a": a.astype(np.float32)[:, None, None],
                    "b": b.astype(np.float32)[:, None, None],
                    "lo": float(QMIN), "hi": float(QMAX)}
        if op.kind == "relu6":
            a = in_qp.scale / out_qp.scale
            b = z_y - in_qp.zero_point * a
            return {"a": np.float32(a), "b": np.float32(b),
                    "lo": float(max(QMIN, z_y)),
                    "hi": float(min(QMAX, round(6.0 / out_qp.scale) + z_y))}
        if op.kind == "add":
            qp1 = self.activation_params[op.in_names[1]]
            a1 = in_qp.scale / out_qp.scale
            a2 = qp1.scale / out_qp.scale
            b = z_y - in_qp.zero_point * a1 - qp1.zero_point * a2
            return {"a1": np.float32(a1), "a2": np.float32(a2),
                    "b": np.float32(b), "lo": float(QMIN), "hi": float(QMAX)}
        raise ShapeError(f"unknown op kind {op.kind!r}")

    def op_structure(self):
        """(kind, name, weight shape) per op, for isomorphism checks."""
        return [(op.kind, op.name,
                 None if op.weight is None else op.weight.shape)
                for op in self.ops]

    def _run_conv(self, op, q_x, fused):
        dtype = fused["dtype"]
        x = q_x.astype(dtype, copy=False)
        w = fused["w"]
        n, c, h, wid = x.shape
        kh, kw = op.kernel
        sh, sw = op.stride
        out_h, out_w, pads = conv_output_geometry(h, wid, kh, kw, sh, sw, op.padding)
        if op.kind == "conv":
            co = w.shape[0]
            if (kh, kw) == (1, 1) and (sh, sw) == (1, 1):
                acc = np.matmul(w, x.reshape(n, c, h * wid))
            else:
                xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]),
                                (pads[2], pads[3])), constant_values=fused["z_in"])
                cols = _im2col(xp, kh, kw, sh, sw, out_h, out_w)
                acc = np.matmul(w, cols)
            acc *= fused["mult"]
            acc += fused["c"][:, None]
            np.rint(acc, out=acc)
            np.clip(acc, QMIN, QMAX, out=acc)
            return acc.reshape(n, co, out_h, out_w)
        xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])),
                    constant_values=fused["z_in"])
        acc = np.zeros((n, c, out_h, out_w), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                acc += (w[:, i, j][:, None, None]
                        * xp[:, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw])
        acc *= fused["mult"]
        acc += fused["c"][:, None, None]
        np.rint(acc, out=acc)
        np.clip(acc, QMIN, QMAX, out=acc)
        return acc

    def _run_op(self, op, acts):
        fused = self._fused[op.name]
        if op.kind in ("conv", "dwconv"):
            return self._run_conv(op, acts[op.in_names[0]], fused)
        if op.kind == "add":
            out = acts[op.in_names[0]] * fused["a1"]
            out += acts[op.in_names[1]] * fused["a2"]
            out += fused["b"]
        else:  # affine, relu6: one fused multiply-add
            out = acts[op.in_names[0]] * fused["a"]
            out += fused["b"]
        np.rint(out, out=out)
        np.clip(out, fused["lo"], fused["hi"], out=out)
        return out

    def _dequant_f64(self, name, q):
        qp = self.activation_params[name]
        return (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale

    def forward(self, x):
        """Float batch (N, 1, H, W) in [0,1] -> (offsets (N, A, 4), logits (N, A))."""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != self.input_size:
            raise ShapeError(f"expected (N, 1, {self.input_size[0]}, "
                             f"{self.input_size[1]}) input, got {x.shape}")
        in_qp = self.activation_params["input"]
        q = np.asarray(x / in_qp.scale, dtype=np.float32)
        q += np.float32(in_qp.zero_point)
        np.rint(q, out=q)
        np.clip(q, QMIN, QMAX, out=q)
        acts = {"input": q}
        for op in self.ops:
            acts[op.out_name] = self._run_op(op, acts)
        parts = []
        a = self.anchors_per_cell
        for name in self.head_names:
            raw = self._dequant_f64(name, acts[name])
            n, _, fh, fw = raw.shape
            parts.append(raw.reshape(n, a, 5, fh, fw).transpose(0, 3, 4, 1, 2)
                         .reshape(n, fh * fw * a, 5))
        raw = np.concatenate(parts, axis=1)
        return raw[:, :, :4], raw[:, :, 4]


def detect_quantized(qmodel: QuantizedModel, pixels, confidence_threshold=0.25,
                     nms_iou=0.45):
    """Integer-path counterpart of detect(); same decoding and NMS."""
    if qmodel.precision is not Precision.QUANTIZED:
        raise ConfigError("model is not quantized; use detect")
    x = preprocess(pixels, qmodel.input_size)
    offsets, logits = qmodel.forward(x)
    return _decode_detections(qmodel, pixels.shape, offsets[0], logits[0],
                              confidence_threshold, nms_iou)


def float_op_structure(model: DetectorModel):
    """(kind, name, weight shape) per op of a float model, for comparisons."""
    out = []
    for op in _model_ops(model):
        shape = None
        if op.kind in ("conv", "dwconv"):
            shape = op.layer.weight.value.shape
        out.append((op.kind, op.name, shape))
    return out


# ---------------------------------------------------------------------------
# quantized checkpoints

_CHECKPOINT_FORMAT = "satdet-detector"


def save_quantized_checkpoint(qmodel: QuantizedModel, path) -> None:
    """Write int8/int32 payloads plus a sidecar with every QuantParams."""
    tensors = {}
    weight_params = {}
    for op in qmodel.ops:
        if op.kind in ("conv", "dwconv"):
            tensors[f"{op.name}.weight"] = op.weight
            tensors[f"{op.name}.bias_fold"] = op.bias_fold
            weight_params[f"{op.name}.weight"] = op.weight_params.to_dict()
        elif op.kind == "affine":
            tensors[f"{op.name}.scale"] = op.scale_q
            tensors[f"{op.name}.shift"] = op.shift_q
            weight_params[f"{op.name}.scale"] = op.scale_params.to_dict()
            weight_params[f"{op.name}.shift"] = op.shift_params.to_dict()
    save_tensors(path, tensors)
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "version": 1,
        "precision": Precision.QUANTIZED.value,
        "size_class": qmodel.size_class.value,
        "input_size": list(qmodel.input_size),
        "tracking_mode": (qmodel.tracking_mode.value
                          if qmodel.tracking_mode else None),
        "init_seed": qmodel.init_seed,
        "anchor_config": qmodel.anchor_config.to_dict(),
        "activation_params": {name: qp.to_dict()
                              for name, qp in qmodel.activation_params.items()},
        "weight_params": weight_params,
        "conversion_report": qmodel.conversion_report,
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_quantized_checkpoint(path) -> QuantizedModel:
    """Rebuild a QuantizedModel from save_quantized_checkpoint output."""
    meta = read_sidecar(path)
    if meta.get("precision") != Precision.QUANTIZED.value:
        raise DataError(f"{path}: precision is {meta.get('precision')!r}; "
                        "load it with load_checkpoint")
    mode = meta.get("tracking_mode")
    skeleton = build_detector(
        size_class=SizeClass(meta["size_class"]),
        input_size=tuple(meta["input_size"]),
        seed=int(meta.get("init_seed", 0)),
        tracking_mode=TrackingMode(mode) if mode else None,
    )
    expected = AnchorConfig.from_dict(meta["anchor_config"])
    if expected != skeleton.anchor_config:
        raise DataError(f"{path}: anchor config does not match the "
                        f"{skeleton.size_class.value} architecture")
    act_params = {name: QuantParams.from_dict(d)
                  for name, d in meta["activation_params"].items()}
    weight_params = meta["weight_params"]
    tensors = load_tensors(path)

    def take(name, dtype):
        if name not in tensors:
            raise DataError(f"{path}: missing tensor '{name}'")
        return np.asarray(tensors[name], dtype=dtype)

    qops = []
    for op in _model_ops(skeleton):
        if op.kind in ("conv", "dwconv"):
            in_qp = act_params[op.in_names[0]]
            out_qp = act_params[op.out_name]
            w_qp = QuantParams.from_dict(weight_params[f"{op.name}.weight"])
            q_w = take(f"{op.name}.weight", np.int8)
            bias_fold = take(f"{op.name}.bias_fold", np.int32)
            sum_axes = tuple(range(1, q_w.ndim))
            bound = (128.0 * np.abs(q_w.astype(np.int64)).sum(axis=sum_axes)
                     + np.abs(bias_fold.astype(np.int64))).max(initial=0)
            qops.append(_QOp(op.kind, op.name, op.in_names, op.out_name,
                             weight=q_w, weight_params=w_qp, bias_fold=bias_fold,
                             multiplier=in_qp.scale * w_qp.scale / out_qp.scale,
                             stride=op.layer.stride, padding=op.layer.padding,
                             kernel=op.layer.kernel,
                             use_f32=bool(bound < _F32_EXACT_BOUND)))
        elif op.kind == "affine":
            qops.append(_QOp("affine", op.name, op.in_names, op.out_name,
                             scale_q=take(f"{op.name}.scale", np.int8),
                             scale_params=QuantParams.from_dict(
                                 weight_params[f"{op.name}.scale"]),
                             shift_q=take(f"{op.name}.shift", np.int8),
                             shift_params=QuantParams.from_dict(
                                 weight_params[f"{op.name}.shift"])))
        else:
            qops.append(_QOp(op.kind, op.name, op.in_names, op.out_name))
    return QuantizedModel(skeleton, qops, act_params,
                          meta.get("conversion_report", {}))
