"""Box-free pedestrian-style detection via center and scale prediction, in numpy."""

from .codec import CodecConfig, TargetEncoder, decode_detections, encode_targets
from .data import AugmentParams, DatasetRecord, SceneSpec, generate_dataset
from .estimator import CSPDetector
from .evaluation import average_precision, evaluate, log_average_miss_rate, match_detections
from .geometry import AspectPolicy, BoundBox, Detection, ObjectAnnotation, iou, nms
from .loss import LossConfig
from .network import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "AspectPolicy", "AugmentParams", "BoundBox", "CSPDetector", "CodecConfig", "DatasetRecord",
    "Detection", "LossConfig", "ModelConfig", "ObjectAnnotation", "SceneSpec", "TargetEncoder",
    "average_precision", "decode_detections", "encode_targets", "evaluate", "generate_dataset",
    "iou", "log_average_miss_rate", "match_detections", "nms",
]
