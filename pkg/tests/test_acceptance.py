"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The learning, timing and ablation checks train the full default schedule and
take several minutes; run them alone with ``pytest tests/test_acceptance.py -s``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from lsfa import _kernels, cli
from lsfa.aggregation import long_term_aggregate
from lsfa.compressed_stream import (
    CodecParams,
    accumulate_to_key,
    decode_frame,
    encode_gop,
    encode_stream,
    reconstruct_from_key,
    stream_frames,
)
from lsfa.networks import ModelWeights, attention_scores, init_weights, save_weights
from lsfa.pipeline.config import ABLATION_COLUMNS, PipelineConfig
from lsfa.pipeline.dataset import SyntheticDatasetSpec, generate_synthetic_dataset, save_dataset
from lsfa.pipeline.harness import encode_clips, evaluate, format_ablation, run_ablation, speed_vs_gop_length, timed_profile
from lsfa.pipeline.training import Sample, forward_backward, head_loss, prepare_dataset, train
from lsfa.tensor_ops import (
    ConvKernel,
    bilinear_resize,
    bilinear_warp,
    conv2d,
    conv2d_grad,
    resize_grad,
    softmax_pair,
    softmax_pair_grad,
    warp_grad_features,
)

from conftest import directional_fd, rel_err

L = 12
FULL = PipelineConfig(gop_length=L, seed=0, **ABLATION_COLUMNS["g"])


@pytest.fixture(scope="module")
def desk():
    """Seeded easy set (200 train / 40 val clips) plus full-model weights after the default schedule."""
    t0 = time.perf_counter()
    train_set = generate_synthetic_dataset(SyntheticDatasetSpec(n_clips=200, seed=1))
    val_set = generate_synthetic_dataset(SyntheticDatasetSpec(n_clips=40, seed=2), clip_offset=1000)
    clips = prepare_dataset(train_set, L)
    w = train(train_set, FULL, clips=clips, log_every=0)
    report, _ = evaluate(encode_clips(val_set, L), val_set.all_gts(), w, FULL)
    return dict(train=train_set, val=val_set, clips=clips, weights=w, report=report,
                seconds=time.perf_counter() - t0)


# ----------------------------------------------------------------- 1. codec

def test_codec_round_trip(verdict):
    clips = generate_synthetic_dataset(SyntheticDatasetSpec(n_clips=20, seed=11)).clips
    t0 = time.perf_counter()
    exact = 0
    for frames in clips:
        decoded = stream_frames(encode_stream(list(frames), CodecParams(gop_length=L)))
        exact += len(decoded) == len(frames) and all(np.array_equal(d.pixels, f) for d, f in zip(decoded, frames))
    dt = time.perf_counter() - t0
    ok = exact == 20 and dt < 10
    assert verdict("codec round trip", ok, dt, f"{exact}/20 clips exact")


# ------------------------------------------------------------------ 2. warp

def shifted_reference(f, dx, dy):
    C, H, W = f.shape
    ys = np.clip(np.arange(H) + dy, 0, H - 1)
    xs = np.clip(np.arange(W) + dx, 0, W - 1)
    return f[:, ys][:, :, xs]


def test_warp_oracles(verdict):
    rng = np.random.default_rng(21)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        C, H, W = rng.integers(1, 6), rng.integers(2, 12), rng.integers(2, 12)
        f, g = rng.normal(size=(2, C, H, W))
        flow = rng.normal(0, 3, size=(2, H, W))
        worst = max(worst, np.abs(bilinear_warp(f, np.zeros((2, H, W))) - f).max())
        dx, dy = rng.integers(-4, 5, 2)
        shift = np.stack([np.full((H, W), dx), np.full((H, W), dy)]).astype(float)
        worst = max(worst, np.abs(bilinear_warp(f, shift) - shifted_reference(f, dx, dy)).max())
        a, b = rng.normal(size=2)
        lin = bilinear_warp(a * f + b * g, flow) - a * bilinear_warp(f, flow) - b * bilinear_warp(g, flow)
        worst = max(worst, np.abs(lin).max())
    dt = time.perf_counter() - t0
    assert verdict("warp oracles", worst <= 1e-9 and dt < 5, dt, f"max deviation {worst:.2e}")


# ---------------------------------------------------------- 3. accumulation

def test_accumulation(verdict):
    rng = np.random.default_rng(31)
    t0 = time.perf_counter()
    first_ok = trans_ok = True
    for frames in generate_synthetic_dataset(SyntheticDatasetSpec(n_clips=3, frames_per_clip=L, seed=12)).clips:
        gop = encode_gop(list(frames), CodecParams(gop_length=L))
        M, R = accumulate_to_key(gop, 1)
        first_ok &= np.array_equal(M, gop.p_records[0].motion_field()) and np.array_equal(R.levels, gop.p_records[0].residual)
    for v in [(1, 0), (0, -2), (2, 1), (-3, 2)]:
        canvas = rng.integers(0, 256, (3, 128 + 80, 128 + 80)).astype(np.uint8)
        frames = [canvas[:, 40 + v[1] * t:168 + v[1] * t, 40 + v[0] * t:168 + v[0] * t] for t in range(L)]
        gop = encode_gop(frames, CodecParams(gop_length=L))
        for x in range(1, L):
            M, R = accumulate_to_key(gop, x)
            trans_ok &= np.array_equal(reconstruct_from_key(gop, M, R), decode_frame(gop, x).pixels)
    dt = time.perf_counter() - t0
    ok = first_ok and trans_ok and dt < 10
    assert verdict("accumulation", ok, dt, f"first step exact={first_ok} translation exact={trans_ok}")


# --------------------------------------------------- 4. long-term aggregation

def scalar_fusion(F_t, warped, s_t, s_p):
    C, h, w = F_t.shape
    out = np.zeros_like(F_t)
    for i in range(h):
        for j in range(w):
            a, b = float(s_t[0, i, j]), float(s_p[0, i, j])
            m = max(a, b)
            ea, eb = np.exp(a - m), np.exp(b - m)
            for c in range(C):
                out[c, i, j] = (ea * F_t[c, i, j] + eb * warped[c, i, j]) / (ea + eb)
    return out


def test_long_term_aggregation(verdict):
    rng = np.random.default_rng(41)
    base = init_weights(seed=0)
    t0 = time.perf_counter()
    unity = bound = oracle = 0.0
    for _ in range(50):
        w = base.copy()
        w.params["att.2.weight"] = rng.normal(0, 0.5, size=w.params["att.2.weight"].shape)
        w.params["att.2.bias"] = rng.normal(size=1)
        h, wd = rng.integers(1, 5, 2)
        F_t, F_p = rng.normal(size=(2, 32, h, wd))
        flow = rng.normal(0, 1.5, size=(2, h, wd))
        out, A_t, A_p = long_term_aggregate(F_t, F_p, flow, w)
        warped = bilinear_warp(F_p, flow)
        unity = max(unity, np.abs(A_t + A_p - 1).max())
        lo, hi = np.minimum(F_t, warped), np.maximum(F_t, warped)
        bound = max(bound, (lo - out).max(), (out - hi).max(), 0.0)
        ref = scalar_fusion(F_t, warped, attention_scores(F_t, w), attention_scores(warped, w))
        oracle = max(oracle, np.abs(out - ref).max())
    dt = time.perf_counter() - t0
    ok = unity <= 1e-9 and bound <= 1e-12 and oracle <= 1e-9 and dt < 5
    assert verdict("long-term aggregation properties", ok, dt,
                   f"|A_t+A_p-1| {unity:.1e}, bound excess {bound:.1e}, oracle {oracle:.1e}")


# ------------------------------------------------------------- 5. gradients

def kernel_gradient_errors(rng):
    errs = {}
    x = rng.normal(size=(2, 3, 7, 6))
    k = ConvKernel(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 2, 1, 1)
    up = rng.normal(size=conv2d(x, k).shape)
    gx, gw, gb = conv2d_grad(x, k, up)
    d = rng.normal(size=x.shape)
    errs["conv input"] = rel_err(directional_fd(lambda v: (conv2d(v, k) * up).sum(), x, d), (gx * d).sum())
    d = rng.normal(size=k.weight.shape)
    errs["conv weight"] = rel_err(directional_fd(lambda v: (conv2d(x, ConvKernel(v, k.bias, 2, 1)) * up).sum(),
                                                 k.weight, d), (gw * d).sum())
    d = rng.normal(size=4)
    errs["conv bias"] = rel_err(directional_fd(lambda v: (conv2d(x, ConvKernel(k.weight, v, 2, 1)) * up).sum(),
                                               k.bias, d), (gb * d).sum())

    f = rng.normal(size=(3, 6, 5))
    flow = rng.normal(0, 2, size=(2, 6, 5))
    up = rng.normal(size=f.shape)
    d = rng.normal(size=f.shape)
    errs["warp"] = rel_err(directional_fd(lambda v: (bilinear_warp(v, flow) * up).sum(), f, d),
                           (warp_grad_features(f, flow, up) * d).sum())

    up = rng.normal(size=(3, 9, 4))
    errs["resize"] = rel_err(directional_fd(lambda v: (bilinear_resize(v, 9, 4) * up).sum(), f, d),
                             (resize_grad(up, 6, 5) * d).sum())

    a, b, ua, ub = rng.normal(size=(4, 1, 3, 4))
    ga, gb = softmax_pair_grad(a, b, ua, ub)

    def pair(a_, b_):
        wa, wb = softmax_pair(a_, b_)
        return (wa * ua + wb * ub).sum()

    d = rng.normal(size=a.shape)
    errs["softmax pair"] = max(rel_err(directional_fd(lambda v: pair(v, b), a, d), (ga * d).sum()),
                               rel_err(directional_fd(lambda v: pair(a, v), b, d), (gb * d).sum()))

    logits = rng.normal(size=(2, 3, 4, 4))
    reg = rng.uniform(0, 2, size=(2, 4, 4, 4))
    cls_t = (rng.uniform(size=logits.shape) < 0.2).astype(float)
    reg_t = rng.uniform(0, 2, size=reg.shape)
    pos = rng.uniform(size=(2, 4, 4)) < 0.4
    _, dl, dr = head_loss(logits, reg, cls_t, reg_t, pos)
    d = rng.normal(size=logits.shape)
    errs["loss logits"] = rel_err(directional_fd(lambda v: head_loss(v, reg, cls_t, reg_t, pos)[0], logits, d),
                                  (dl * d).sum())
    d = rng.normal(size=reg.shape)
    errs["loss boxes"] = rel_err(directional_fd(lambda v: head_loss(logits, v, cls_t, reg_t, pos)[0], reg, d),
                                 (dr * d).sum())
    return errs


def test_gradient_checks(verdict):
    rng = np.random.default_rng(51)
    t0 = time.perf_counter()
    errs = kernel_gradient_errors(rng)
    # whole training loss on a tiny instance: both key frames, LFA, all short-term terms
    ds = generate_synthetic_dataset(SyntheticDatasetSpec(n_clips=2, frames_per_clip=8, height=32, width=32,
                                                         min_size=10, max_size=20, seed=13))
    cfg = PipelineConfig(gop_length=4, **ABLATION_COLUMNS["g"])
    clips = prepare_dataset(ds, 4)
    batch = [Sample(0, 4, 0, 6), Sample(1, 0, None, 3), Sample(1, 4, 0, 5)]
    w = init_weights(seed=1)
    for k in w.params:
        if k.endswith(".bias"):
            w.params[k] = rng.normal(0, 0.1, size=w.params[k].shape)
    w.params["att.2.weight"] = rng.normal(0, 0.1, size=w.params["att.2.weight"].shape)
    _, grads = forward_backward(w, clips, batch, cfg)
    worst_e2e = 0.0
    for name in sorted(w.params):
        d = rng.normal(size=w.params[name].shape)

        def loss(v, name=name):
            p = dict(w.params)
            p[name] = v
            return forward_backward(ModelWeights(w.spec, p), clips, batch, cfg, need_grad=False)[0]

        e = rel_err(directional_fd(loss, w.params[name], d), (grads[name] * d).sum())
        worst_e2e = max(worst_e2e, e)
    errs["end-to-end (worst tensor)"] = worst_e2e
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert verdict("gradient checks", ok, dt, detail)


# ------------------------------------------------------ 6. desk-scale learning

def test_desk_scale_learning(verdict, desk):
    rep = desk["report"]
    slow = rep.mAP_by_speed["slow"]
    ok = rep.mAP >= 0.60 and slow is not None and slow >= 0.70 and desk["seconds"] <= 20 * 60
    print(rep.to_text())
    assert verdict("desk-scale learning", ok, desk["seconds"], f"mAP {rep.mAP:.3f}, slow {slow:.3f}")


# ------------------------------------------------------- 7. speed asymmetry

def test_speed_asymmetry(verdict, desk):
    t0 = time.perf_counter()
    frames = generate_synthetic_dataset(SyntheticDatasetSpec(n_clips=1, frames_per_clip=48, seed=14)).clips[0]
    w = desk["weights"]
    rep = timed_profile(encode_stream(list(frames), CodecParams(gop_length=L)), w, FULL, repeats=5)
    t_key, t_nk = rep.frame_ms["key"], rep.frame_ms["nonkey"]
    identity = abs(rep.weighted_avg_ms - rep.measured_avg_ms) / rep.measured_avg_ms
    sweep = speed_vs_gop_length(frames, w, FULL, (2, 4, 8, 12, 24), repeats=5)
    ms = [sweep[k] for k in sorted(sweep)]
    monotone = all(b <= a for a, b in zip(ms, ms[1:]))
    dt = time.perf_counter() - t0
    ok = t_nk < t_key and identity <= 0.10 and monotone and dt < 300
    detail = (f"T_key {t_key:.2f} ms, T_nonkey {t_nk:.2f} ms, identity gap {100 * identity:.1f}%, "
              + "ms/frame by L " + " ".join(f"{k}:{v:.2f}" for k, v in sorted(sweep.items())))
    assert verdict("speed asymmetry", ok, dt, detail)


# ------------------------------------------------------------- 8. ablation

def test_ablation_harness(verdict, desk):
    t0 = time.perf_counter()
    weights = {"g": desk["weights"]}
    for col in ("a", "c", "d", "e"):
        weights[col] = train(desk["train"], replace(FULL, **ABLATION_COLUMNS[col]), clips=desk["clips"], log_every=0)
    rows = run_ablation(None, desk["val"], FULL, weights=weights)
    table = format_ablation(rows)
    print(table)
    lines = table.splitlines()
    schema = ([r.column for r in rows] == ["a", "c", "d", "e", "g"]
              and all(r.report.mAP is not None and set(r.report.mAP_by_speed) == {"slow", "medium", "fast"}
                      and r.timing.fps > 0 for r in rows)
              and [ln.split("  ")[0] for ln in lines[-5:]]
              == ["mAP (%)", "mAP (%) (slow)", "mAP (%) (medium)", "mAP (%) (fast)", "Speed (fps)"])
    by = {r.column: r.report.mAP for r in rows}
    dt = time.perf_counter() - t0
    direction = "holds" if by["g"] >= by["c"] else "does not hold"
    assert verdict("ablation harness structure", schema, dt,
                   f"g {by['g']:.3f} vs c {by['c']:.3f}: g >= c {direction} (reported only)")


# ---------------------------------------------------------- 9. determinism

def test_determinism(verdict, desk, tmp_path):
    t0 = time.perf_counter()
    small = replace(desk["val"], clips=desk["val"].clips[:4], gts=desk["val"].gts[:4])
    save_dataset(small, tmp_path / "val", gop_length=L)
    w_path = tmp_path / "w.lsfw"
    save_weights(desk["weights"], w_path)
    outs = [tmp_path / f"dets{i}.txt" for i in range(2)]
    for out in outs:
        assert cli.main(["detect", "--stream", str(tmp_path / "val"), "--weights", str(w_path), "--out", str(out)]) == 0
    detect_same = outs[0].read_bytes() == outs[1].read_bytes()
    trained = [tmp_path / f"t{i}.lsfw" for i in range(2)]
    for out in trained:
        assert cli.main(["train", "--data", str(tmp_path / "val"), "--out", str(out), "--seed", "5",
                         "--steps", "20", "--log-every", "0"]) == 0
    train_same = trained[0].read_bytes() == trained[1].read_bytes()
    dt = time.perf_counter() - t0
    assert verdict("determinism", detect_same and train_same, dt,
                   f"detect files identical={detect_same}, weight files identical={train_same}, "
                   f"backend={_kernels.backend()}")
