"""Triplet training: previous key, current key, one non-key frame.

The long-term step fuses the two key-frame features, the short-term step
propagates the result to the non-key frame, and the detection head is
supervised on both the aggregated key feature and the non-key feature.
Motion vectors, residuals and key-frame flow are inputs, never trained.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..aggregation import flow_to_feature_scale
from ..compressed_stream import CodecParams, encode_stream, iter_accumulated, motion_cues_at_feature_scale
from ..detection import cell_centers, head_forward, sigmoid
from ..networks import (
    STRIDE,
    ModelWeights,
    NetworkSpec,
    backprop_stack,
    downsample_for_tiny,
    estimate_flow,
    init_weights,
    run_stack,
)
from ..tensor_ops import bilinear_warp, softmax_pair, softmax_pair_grad, warp_grad_features
from .config import PipelineConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def build_targets(boxes, h: int, w: int, num_classes: int, stride: int = STRIDE):
    """Dense targets for one frame.

    A cell is positive when its centre lies inside a box (nearest box centre
    wins on overlap); a box covering no centre claims the cell under its own
    centre.  Regression targets are (l, t, r, b) distances in stride units.
    """
    cls = np.zeros((num_classes, h, w))
    reg = np.zeros((4, h, w))
    pos = np.zeros((h, w), dtype=bool)
    best = np.full((h, w), np.inf)
    cy, cx = cell_centers(h, w, stride)
    CY, CX = np.meshgrid(cy, cx, indexing="ij")
    for b in boxes:
        inside = (CX >= b.x1) & (CX < b.x2) & (CY >= b.y1) & (CY < b.y2)
        bx, by = (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0
        if not inside.any():
            r = min(max(int(by // stride), 0), h - 1)
            c = min(max(int(bx // stride), 0), w - 1)
            inside[r, c] = True
        d = np.hypot(CX - bx, CY - by)
        take = inside & (d < best)
        best[take] = d[take]
        pos |= take
        cls[:, take] = 0.0
        cls[b.class_id, take] = 1.0
        reg[0, take] = (CX[take] - b.x1) / stride
        reg[1, take] = (CY[take] - b.y1) / stride
        reg[2, take] = (b.x2 - CX[take]) / stride
        reg[3, take] = (b.y2 - CY[take]) / stride
    return cls, reg, pos


def head_loss(logits, reg, cls_t, reg_t, pos, beta: float = 0.1, reg_weight: float = 2.0):
    """BCE over all cells/classes + ``reg_weight`` * smooth-L1 on positive-cell
    box distances, both normalised by the positive count.
    Returns (loss, dlogits, dreg)."""
    n = max(1.0, float(pos.sum()))
    bce = np.maximum(logits, 0.0) - logits * cls_t + np.log1p(np.exp(-np.abs(logits)))
    d = reg - reg_t
    ad = np.abs(d)
    sl1 = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    m = pos[:, None].astype(np.float64)
    loss = (bce.sum() + reg_weight * (sl1 * m).sum()) / n
    dlogits = (sigmoid(logits) - cls_t) / n
    dreg = reg_weight * np.where(ad < beta, d / beta, np.sign(d)) * m / n
    return float(loss), dlogits, dreg


# ---------------------------------------------------------------------------
# prepared clips
# ---------------------------------------------------------------------------

@dataclass
class TrainClip:
    frames: np.ndarray  # (N, 3, H, W) uint8
    motion: np.ndarray  # (N, 2, h, w) accumulated motion to the GOP key, feature cells
    residual: np.ndarray  # (N, 3, h, w) accumulated residual, feature resolution
    key_flow: np.ndarray  # (N, 2, h, w) flow from key t-L to key t (zero elsewhere)
    cls: np.ndarray  # (N, K, h, w)
    reg: np.ndarray  # (N, 4, h, w)
    pos: np.ndarray  # (N, h, w)
    gop_length: int


def prepare_clip(frames: np.ndarray, gts, gop_length: int, num_classes: int) -> TrainClip:
    N, _, H, W = frames.shape
    h, w = H // STRIDE, W // STRIDE
    gops = encode_stream(list(frames), CodecParams(gop_length=gop_length))
    motion = np.zeros((N, 2, h, w))
    residual = np.zeros((N, 3, h, w))
    key_flow = np.zeros((N, 2, h, w))
    for g_idx, gop in enumerate(gops):
        base = g_idx * gop_length
        for x, M, R in iter_accumulated(gop):
            motion[base + x], residual[base + x] = motion_cues_at_feature_scale(M, R)
        if g_idx > 0:
            key_flow[base] = flow_to_feature_scale(
                estimate_flow(gops[g_idx - 1].key_frame, gop.key_frame), h, w)
    by_frame = {}
    for g in gts:
        by_frame.setdefault(int(g.frame.rsplit(":", 1)[1]), []).append(g)
    cls = np.zeros((N, num_classes, h, w))
    reg = np.zeros((N, 4, h, w))
    pos = np.zeros((N, h, w), dtype=bool)
    for t in range(N):
        cls[t], reg[t], pos[t] = build_targets(by_frame.get(t, []), h, w, num_classes)
    return TrainClip(frames, motion, residual, key_flow, cls, reg, pos, gop_length)


def prepare_dataset(dataset, gop_length: int, num_classes: int = 3) -> list[TrainClip]:
    return [prepare_clip(f, g, gop_length, num_classes) for f, g in zip(dataset.clips, dataset.gts)]


@dataclass
class Sample:
    clip: int
    key: int  # key frame index t
    prev: int | None  # t - L when long-term aggregation applies
    nonkey: int | None  # t + x


def sample_batch(rng: np.random.Generator, clips, cfg: PipelineConfig) -> list[Sample]:
    out = []
    L = cfg.gop_length
    for _ in range(cfg.batch_size):
        c = int(rng.integers(len(clips)))
        N = clips[c].frames.shape[0]
        if cfg.frame_baseline:
            out.append(Sample(c, int(rng.integers(N)), None, None))
            continue
        t = L * int(rng.integers(N // L))
        x = int(rng.integers(1, L))
        prev = t - L if (cfg.use_lfa and t >= L) else None
        out.append(Sample(c, t, prev, t + x))
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _rgb(clip: TrainClip, i: int) -> np.ndarray:
    return clip.frames[i].astype(np.float64) / 255.0


def forward_backward(w: ModelWeights, clips, batch, cfg: PipelineConfig, need_grad: bool = True):
    spec = w.spec
    B = len(batch)
    prev_ids = [i for i, s in enumerate(batch) if s.prev is not None]
    P = len(prev_ids)

    large_in = np.stack([_rgb(clips[s.clip], s.key) for s in batch]
                        + [_rgb(clips[batch[i].clip], batch[i].prev) for i in prev_ids])
    F_all, c_large = run_stack(large_in, spec.large(), w, keep_cache=True)
    F_t, F_p = F_all[:B], F_all[B:]
    F_key = F_t.copy()

    if P:
        flows = np.stack([clips[batch[i].clip].key_flow[batch[i].key] for i in prev_ids])
        warped = bilinear_warp(F_p, flows)
        s_all, c_att = run_stack(np.concatenate([F_t[prev_ids], warped]), spec.attention(), w, keep_cache=True)
        s_t, s_w = s_all[:P], s_all[P:]
        A_t, A_w = softmax_pair(s_t, s_w)
        F_key[prev_ids] = F_t[prev_ids] * A_t + warped * A_w

    targets = [(clips[s.clip], s.key) for s in batch]
    head_in = [F_key]
    if not cfg.frame_baseline:
        nk = np.zeros_like(F_key)
        if cfg.use_motion_vectors:
            nk_motion = np.stack([clips[s.clip].motion[s.nonkey] for s in batch])
            nk = nk + bilinear_warp(F_key, nk_motion)
        if cfg.use_residual_term:
            r_in = np.stack([clips[s.clip].residual[s.nonkey] for s in batch])
            R, c_res = run_stack(r_in, spec.residual_proj(), w, keep_cache=True)
            nk = nk + R
        if cfg.use_tiny_term:
            t_in = downsample_for_tiny(np.stack([_rgb(clips[s.clip], s.nonkey) for s in batch]), spec)
            T, c_tiny = run_stack(t_in, spec.tiny(), w, keep_cache=True)
            nk = nk + T
        head_in.append(nk)
        targets += [(clips[s.clip], s.nonkey) for s in batch]

    logits, reg, (c_trunk, c_cls, c_reg) = head_forward(np.concatenate(head_in), w, keep_cache=True)
    cls_t = np.stack([c.cls[i] for c, i in targets])
    reg_t = np.stack([c.reg[i] for c, i in targets])
    pos = np.stack([c.pos[i] for c, i in targets])
    loss, dlogits, dreg = head_loss(logits, reg, cls_t, reg_t, pos, cfg.smooth_l1_beta, cfg.reg_weight)
    if not need_grad:
        return loss, None

    grads: dict = {}
    g_trunk = backprop_stack(dlogits, c_cls, w, grads) + backprop_stack(dreg, c_reg, w, grads)
    g_head = backprop_stack(g_trunk, c_trunk, w, grads)
    g_key = g_head[:B].copy()
    if not cfg.frame_baseline:
        g_nk = g_head[B:]
        if cfg.use_tiny_term:
            backprop_stack(g_nk, c_tiny, w, grads, need_input_grad=False)
        if cfg.use_residual_term:
            backprop_stack(g_nk, c_res, w, grads, need_input_grad=False)
        if cfg.use_motion_vectors:
            g_key += warp_grad_features(F_key, nk_motion, g_nk)

    g_Ft = g_key.copy()
    g_Fp = np.zeros_like(F_p)
    if P:
        gk = g_key[prev_ids]
        dA_t = (gk * F_t[prev_ids]).sum(axis=1, keepdims=True)
        dA_w = (gk * warped).sum(axis=1, keepdims=True)
        g_Ft[prev_ids] = gk * A_t
        g_warped = gk * A_w
        ds_t, ds_w = softmax_pair_grad(s_t, s_w, dA_t, dA_w)
        g_att = backprop_stack(np.concatenate([ds_t, ds_w]), c_att, w, grads)
        g_Ft[prev_ids] += g_att[:P]
        g_warped = g_warped + g_att[P:]
        g_Fp = warp_grad_features(F_p, flows, g_warped)
    backprop_stack(np.concatenate([g_Ft, g_Fp]), c_large, w, grads, need_input_grad=False)
    for name, p in w.params.items():
        grads.setdefault(name, np.zeros_like(p))
    return loss, grads


# ---------------------------------------------------------------------------
# optimiser loop
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, w: ModelWeights, cfg: PipelineConfig):
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(v) for k, v in w.params.items()}

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        return cfg.lr * (cfg.lr_decay if step >= cfg.lr_decay_step else 1.0)

    def step(self, w: ModelWeights, grads: dict, step: int) -> None:
        cfg = self.cfg
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = cfg.grad_clip / norm if cfg.grad_clip > 0 and norm > cfg.grad_clip else 1.0
        lr = self.lr_at(step)
        for name in sorted(w.params):
            g = grads[name] * scale
            if name.endswith(".weight"):
                g = g + cfg.weight_decay * w.params[name]
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            w.params[name] -= lr * v


def train(dataset, cfg: PipelineConfig, spec: NetworkSpec = NetworkSpec(), clips=None,
          history: list | None = None, log_every: int = 100) -> ModelWeights:
    """SGD with momentum over sampled triplets; deterministic given ``cfg.seed``.

    ``clips`` may pass pre-computed :class:`TrainClip` objects to skip
    encoding; ``history`` receives the per-step loss.
    """
    if clips is None:
        clips = prepare_dataset(dataset, cfg.gop_length, spec.num_classes)
    w = init_weights(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = SGD(w, cfg)
    for step in range(cfg.steps):
        batch = sample_batch(rng, clips, cfg)
        loss, grads = forward_backward(w, clips, batch, cfg)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss or gradient at step {step}")
        opt.step(w, grads, step)
        if history is not None:
            history.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.4g", step, loss, opt.lr_at(step))
    return w
