"""satdet: synthetic unresolved space imagery and a tiny from-scratch detector.

The package covers the full loop: scene synthesis with exact box labels,
dihedral augmentation and dataset management, a numpy neural network core,
a single-class SSD-style detector, post-training int8 quantization, and
evaluation utilities including a classical matched baseline.
"""

from .boxes import BoundingBox, Detection, iou, iou_matrix
from .data import (
    D4_ELEMENTS,
    D4_IDENTITY,
    D4Element,
    AnnotationRecord,
    DatasetManifest,
    Split,
    augment_x8,
    d4_apply_box,
    d4_apply_image,
    d4_apply_point,
    d4_compose,
    d4_name,
    load_manifest,
    save_manifest,
    split_dataset,
    transform_d4,
    write_frames,
)
from .errors import ConfigError, DataError, SatdetError, ShapeError
from .evaluate import (
    EvalReport,
    LatencyReport,
    MatchResult,
    SourceShape,
    baseline_detect,
    benchmark_latency,
    evaluate_detector,
    f1_score,
    format_eval_table,
    format_latency_table,
    match_detections,
    precision_recall_f1,
    render_annotated,
)
from .nn import (
    Adam,
    ChannelAffine,
    Conv2D,
    DepthwiseConv2D,
    InvertedResidual,
    Param,
    ReLU6,
    Sequential,
    conv_output_geometry,
    load_tensors,
    save_tensors,
)
from .quantize import (
    QuantizedModel,
    QuantParams,
    calibrate,
    convert_model,
    dequantize_tensor,
    detect_quantized,
    load_quantized_checkpoint,
    quantization_params_from_range,
    quantize_tensor,
    save_quantized_checkpoint,
    symmetric_weight_params,
)
from .scene import (
    LabeledFrame,
    SceneConfig,
    TrackingMode,
    add_noise,
    derive_seed,
    generate_observation_set,
    generate_scene,
    load_scene_config,
    mag_to_flux,
    render_point_source,
    render_streak,
    save_scene_config,
)
from .ssd import (
    AnchorConfig,
    DetectorModel,
    Precision,
    SizeClass,
    TrainConfig,
    build_anchors,
    build_detector,
    decode_box,
    decode_boxes,
    detect,
    encode_box,
    encode_boxes,
    load_checkpoint,
    match_anchors,
    nms,
    preprocess,
    save_checkpoint,
    ssd_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AnchorConfig",
    "AnnotationRecord",
    "BoundingBox",
    "ChannelAffine",
    "ConfigError",
    "Conv2D",
    "D4Element",
    "D4_ELEMENTS",
    "D4_IDENTITY",
    "DataError",
    "DatasetManifest",
    "DepthwiseConv2D",
    "Detection",
    "DetectorModel",
    "EvalReport",
    "InvertedResidual",
    "LabeledFrame",
    "LatencyReport",
    "MatchResult",
    "Param",
    "Precision",
    "QuantParams",
    "QuantizedModel",
    "ReLU6",
    "SatdetError",
    "SceneConfig",
    "Sequential",
    "ShapeError",
    "SizeClass",
    "SourceShape",
    "Split",
    "TrackingMode",
    "TrainConfig",
    "add_noise",
    "augment_x8",
    "baseline_detect",
    "benchmark_latency",
    "build_anchors",
    "build_detector",
    "calibrate",
    "conv_output_geometry",
    "convert_model",
    "d4_apply_box",
    "d4_apply_image",
    "d4_apply_point",
    "d4_compose",
    "d4_name",
    "decode_box",
    "decode_boxes",
    "dequantize_tensor",
    "derive_seed",
    "detect",
    "detect_quantized",
    "encode_box",
    "encode_boxes",
    "evaluate_detector",
    "f1_score",
    "format_eval_table",
    "format_latency_table",
    "generate_observation_set",
    "generate_scene",
    "iou",
    "iou_matrix",
    "load_checkpoint",
    "load_manifest",
    "load_quantized_checkpoint",
    "load_scene_config",
    "load_tensors",
    "mag_to_flux",
    "match_anchors",
    "match_detections",
    "nms",
    "precision_recall_f1",
    "preprocess",
    "quantization_params_from_range",
    "quantize_tensor",
    "render_annotated",
    "render_point_source",
    "render_streak",
    "save_checkpoint",
    "save_manifest",
    "save_quantized_checkpoint",
    "save_scene_config",
    "save_tensors",
    "split_dataset",
    "ssd_loss",
    "symmetric_weight_params",
    "train",
    "transform_d4",
    "write_frames",
]
