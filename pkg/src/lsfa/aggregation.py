"""Long-term (key-frame) and short-term (non-key-frame) feature aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import STRIDE, ModelWeights, attention_scores, estimate_flow, extract_large
from .tensor_ops import ShapeError, bilinear_resize, bilinear_warp, softmax_pair


def flow_to_feature_scale(flow: np.ndarray, h: int, w: int, stride: int = STRIDE) -> np.ndarray:
    """Resize a pixel flow to the feature grid and express it in feature cells."""
    return bilinear_resize(flow, h, w) / stride


def long_term_aggregate(F_t: np.ndarray, F_prev: np.ndarray, flow: np.ndarray, w: ModelWeights):
    """Attention-weighted fusion of the current key feature with the warped
    previous aggregate.  ``flow`` is at feature resolution, in cells.

    Returns (F'_t, A_t, A_prev); the weight maps are (1, h, w).
    """
    F_t = np.asarray(F_t, dtype=np.float64)
    if np.shape(F_prev) != F_t.shape:
        raise ShapeError(f"feature shapes differ: {F_t.shape} vs {np.shape(F_prev)}")
    warped = bilinear_warp(F_prev, flow)
    A_t, A_prev = softmax_pair(attention_scores(F_t, w), attention_scores(warped, w))
    return F_t * A_t + warped * A_prev, A_t, A_prev


def short_term_aggregate(F_key: np.ndarray, motion: np.ndarray, residual_feat, tiny_feat) -> np.ndarray:
    """warp(F_key, motion) + residual_feat + tiny_feat; ``None`` terms count as zero."""
    F_key = np.asarray(F_key, dtype=np.float64)
    out = bilinear_warp(F_key, motion)
    for term in (residual_feat, tiny_feat):
        if term is None:
            continue
        if np.shape(term) != F_key.shape:
            raise ShapeError(f"term shape {np.shape(term)} does not match {F_key.shape}")
        out = out + term
    return out


@dataclass(frozen=True)
class AggregationState:
    t: int
    F_prime_key: np.ndarray
    gop_length: int

    def __post_init__(self):
        f = np.array(self.F_prime_key, dtype=np.float64)
        f.flags.writeable = False
        object.__setattr__(self, "F_prime_key", f)

    def __eq__(self, other):
        return (isinstance(other, AggregationState) and self.t == other.t
                and self.gop_length == other.gop_length
                and np.array_equal(self.F_prime_key, other.F_prime_key))

    __hash__ = None


def initial_state(first_key_frame, w: ModelWeights, gop_length: int) -> AggregationState:
    """F'_0 is the plain large-network feature of the first key frame."""
    return AggregationState(0, extract_large(first_key_frame, w), gop_length)


def advance_key(state: AggregationState, new_key_frame, prev_key_frame, w: ModelWeights,
                new_index: int | None = None) -> AggregationState:
    if new_index is None:
        new_index = state.t + state.gop_length
    if new_index != state.t + state.gop_length:
        raise ValueError(f"key index {new_index} does not follow {state.t} at L={state.gop_length}")
    F_t = extract_large(new_key_frame, w)
    h, wd = F_t.shape[-2:]
    flow = flow_to_feature_scale(estimate_flow(prev_key_frame, new_key_frame), h, wd)
    F_new, _, _ = long_term_aggregate(F_t, state.F_prime_key, flow, w)
    return AggregationState(new_index, F_new, state.gop_length)
