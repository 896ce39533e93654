"""Online key/non-key scheduling with per-component wall-clock timing."""
from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..aggregation import flow_to_feature_scale, long_term_aggregate, short_term_aggregate
from ..compressed_stream import Frame, ResidualMap, compose, decode_step, motion_cues_at_feature_scale
from ..detection import detect
from ..networks import ModelWeights, estimate_flow, extract_large, extract_tiny, residual_project
from .config import PipelineConfig

KEY_COMPONENTS = ("large", "flow", "lfa", "head")
NONKEY_COMPONENTS = ("decode", "motion", "tiny", "sfa", "head")


@dataclass
class FrameTiming:
    index: int
    kind: str  # "key" | "nonkey"
    components: dict = field(default_factory=dict)
    total: float = 0.0  # seconds, wall clock for the whole frame


class _Clock:
    def __init__(self):
        self.parts = defaultdict(float)

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.parts[name] += time.perf_counter() - t0


@dataclass
class InferenceResult:
    detections: list  # per frame: list of DetectionBox
    frame_timings: list
    wall_time: float  # seconds for the whole stream
    gop_length: int
    gop_wall: list = field(default_factory=list)  # seconds per GOP
    features: list | None = None


def run_inference(stream, w: ModelWeights, cfg: PipelineConfig, keep_features: bool = False) -> InferenceResult:
    """Process a list of GopSegments strictly in display order.

    Frame i with i % L == 0 takes the key branch, the rest the non-key
    branch; nothing from frames after i is touched while producing frame i.
    """
    stream = list(stream)
    if not stream:
        raise ValueError("empty stream")
    L = stream[0].gop_length
    if L != cfg.gop_length:
        raise ValueError(f"stream GOP length {L} differs from configured gop_length {cfg.gop_length}")
    shape = stream[0].shape
    dets, timings, feats, gop_wall = [], [], [], []
    prev_key: Frame | None = None
    F_key = None
    t_start = time.perf_counter()
    for g_idx, gop in enumerate(stream):
        if gop.shape != shape or gop.gop_length != L:
            raise ValueError(f"GOP {g_idx} changes frame shape or length mid-stream")
        if gop.num_frames != L and g_idx != len(stream) - 1:
            raise ValueError(f"GOP {g_idx} is short but not the last one")
        base = g_idx * L
        t_gop = time.perf_counter()
        # key branch
        clock = _Clock()
        t0 = time.perf_counter()
        key = gop.key_frame
        with clock("large"):
            F_t = extract_large(key, w)
        if cfg.use_lfa and not cfg.frame_baseline and prev_key is not None:
            with clock("flow"):
                flow = flow_to_feature_scale(estimate_flow(prev_key, key), *F_t.shape[-2:])
            with clock("lfa"):
                F_key, _, _ = long_term_aggregate(F_t, F_key, flow, w)
        else:
            F_key = F_t
        with clock("head"):
            boxes = detect(F_key, w, cfg.score_thresh, cfg.nms_iou, frame_size=shape)
        dets.append(boxes)
        timings.append(FrameTiming(base, "key", dict(clock.parts), time.perf_counter() - t0))
        if keep_features:
            feats.append(F_key)
        prev_key = key

        # non-key branch: accumulate motion incrementally from the key frame
        recon = key.pixels.astype(np.int16)
        motion = np.zeros((2,) + shape)
        residual = ResidualMap(np.zeros((3,) + shape))
        for x, rec in enumerate(gop.p_records, start=1):
            clock = _Clock()
            t0 = time.perf_counter()
            with clock("decode"):
                recon = decode_step(recon, rec)
                frame = Frame(recon.astype(np.uint8))
            if cfg.frame_baseline:
                with clock("large"):
                    F = extract_large(frame, w)
            else:
                with clock("motion"):
                    motion, residual = compose(motion, residual, rec)
                    flow_f, res_f = motion_cues_at_feature_scale(motion, residual)
                tiny = None
                if cfg.use_tiny_term:
                    with clock("tiny"):
                        tiny = extract_tiny(frame, w)
                with clock("sfa"):
                    res_feat = residual_project(res_f, w) if cfg.use_residual_term else None
                    if cfg.use_motion_vectors:
                        F = short_term_aggregate(F_key, flow_f, res_feat, tiny)
                    else:
                        F = sum(t for t in (res_feat, tiny) if t is not None)
                        if not isinstance(F, np.ndarray):
                            F = np.zeros_like(F_key)
            with clock("head"):
                boxes = detect(F, w, cfg.score_thresh, cfg.nms_iou, frame_size=shape)
            dets.append(boxes)
            timings.append(FrameTiming(base + x, "nonkey", dict(clock.parts), time.perf_counter() - t0))
            if keep_features:
                feats.append(F)
        gop_wall.append(time.perf_counter() - t_gop)
    wall = time.perf_counter() - t_start
    return InferenceResult(dets, timings, wall, L, gop_wall, feats if keep_features else None)


def detections_by_frame(result: InferenceResult, clip_id: str) -> dict:
    return {f"{clip_id}:{i}": boxes for i, boxes in enumerate(result.detections)}
