"""Object detection on compressed video by propagating key-frame features.

Key frames run a large backbone and are fused with the previous key frame
through attention-weighted warping; the frames in between reuse the key
feature, warped by the codec's accumulated motion vectors, plus a residual
projection and a small backbone.
"""
from .compressed_stream import (CodecParams, Frame, GopSegment, decode_frame, encode_stream,
                                read_container, write_container)
from .detection import DetectionBox, EvalReport, GroundTruthBox, detect, evaluate_map, nms
from .networks import ModelWeights, NetworkSpec, init_weights, load_weights, save_weights
from .pipeline.config import PipelineConfig
from .pipeline.inference import run_inference

__all__ = [
    "CodecParams", "Frame", "GopSegment", "decode_frame", "encode_stream", "read_container", "write_container",
    "DetectionBox", "EvalReport", "GroundTruthBox", "detect", "evaluate_map", "nms",
    "ModelWeights", "NetworkSpec", "init_weights", "load_weights", "save_weights",
    "PipelineConfig", "run_inference",
]
__version__ = "0.1.0"
