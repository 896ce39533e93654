"""Dense tensor kernels with hand-written adjoints.

Feature maps are float64 arrays shaped (C, H, W); every op also accepts a
leading batch axis (N, C, H, W).  Motion fields are (2, H, W) arrays holding
(dx, dy) in the units of their own grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvKernel:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ShapeError("bias length must equal out_channels")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        eh = self.dilation * (kh - 1) + 1
        ew = self.dilation * (kw - 1) + 1
        return (h + 2 * self.padding - eh) // self.stride + 1, (w + 2 * self.padding - ew) // self.stride + 1


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _check_finite(x, what="input"):
    if not np.isfinite(x).all():
        raise ValueError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _columns(xp, kernel: ConvKernel, oh, ow):
    N, C, _, _ = xp.shape
    kh, kw = kernel.weight.shape[2:]
    s0, s1, s2, s3 = xp.strides
    s, d = kernel.stride, kernel.dilation
    view = as_strided(xp, (N, oh, ow, C, kh, kw), (s0, s2 * s, s3 * s, s1, s2 * d, s3 * d), writeable=False)
    return view.reshape(N * oh * ow, C * kh * kw)


def _prepare(x, kernel: ConvKernel):
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != kernel.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernel expects {kernel.in_channels}")
    oh, ow = kernel.output_size(*xb.shape[2:])
    if oh < 1 or ow < 1:
        raise ShapeError("input smaller than the effective kernel extent")
    p = kernel.padding
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(xb)
    return xb, xp, oh, ow, squeeze


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Zero-padded strided (dilated) cross-correlation plus bias."""
    _check_finite(x)
    xb, xp, oh, ow, squeeze = _prepare(x, kernel)
    cols = _columns(xp, kernel, oh, ow)
    out = cols @ kernel.weight.reshape(kernel.out_channels, -1).T + kernel.bias
    out = out.reshape(xb.shape[0], oh, ow, kernel.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_grad(x: np.ndarray, kernel: ConvKernel, upstream: np.ndarray, need_input: bool = True):
    """Return (grad_input, grad_weight, grad_bias) for :func:`conv2d`.

    With ``need_input=False`` the input gradient is skipped and returned as None.
    """
    xb, xp, oh, ow, squeeze = _prepare(x, kernel)
    g, _ = _as_batch(upstream)
    N = xb.shape[0]
    if g.shape != (N, kernel.out_channels, oh, ow):
        raise ShapeError(f"upstream shape {g.shape} does not match conv output {(N, kernel.out_channels, oh, ow)}")
    C = xb.shape[1]
    kh, kw = kernel.weight.shape[2:]
    gm = g.transpose(0, 2, 3, 1).reshape(N * oh * ow, kernel.out_channels)
    cols = _columns(xp, kernel, oh, ow)
    grad_w = (gm.T @ cols).reshape(kernel.weight.shape)
    grad_b = gm.sum(axis=0)
    if not need_input:
        return None, grad_w, grad_b
    gcols = (gm @ kernel.weight.reshape(kernel.out_channels, -1)).reshape(N, oh, ow, C, kh, kw)
    gxp = np.zeros_like(xp)
    s, d = kernel.stride, kernel.dilation
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * d, j * d
            gxp[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    p = kernel.padding
    gx = gxp[:, :, p:p + xb.shape[2], p:p + xb.shape[3]] if p else gxp
    gx = np.ascontiguousarray(gx)
    return (gx[0] if squeeze else gx), grad_w, grad_b


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _check_flow(feature, flow):
    fb, _ = _as_batch(feature)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape[-3] != 2 or flow.shape[-2:] != fb.shape[-2:]:
        raise ShapeError(f"flow {flow.shape} does not match feature grid {fb.shape[-2:]}")
    if flow.ndim == 4 and flow.shape[0] != fb.shape[0]:
        raise ShapeError("batched flow and feature disagree on batch size")


def bilinear_warp(feature: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """out(c, p) = bilinear sample of feature(c) at p + flow(p), border-clamped."""
    _check_flow(feature, flow)
    return _kernels.gather(feature, flow)


def warp_grad_features(feature: np.ndarray, flow: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`bilinear_warp` in its feature argument."""
    _check_flow(feature, flow)
    if np.shape(upstream) != np.shape(feature):
        raise ShapeError("upstream must match the feature shape")
    return _kernels.scatter(upstream, flow)


# ---------------------------------------------------------------------------
# resizing (align_corners=False)
# ---------------------------------------------------------------------------

def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation operator using pixel-center sampling."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize dimensions must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize the two trailing axes; works for feature maps and motion fields alike.

    Motion-field values are NOT rescaled here; unit conversion is the caller's job.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    ry = resize_matrix(x.shape[-2], target_h)
    rx = resize_matrix(x.shape[-1], target_w)
    return ry @ x @ rx.T


def resize_grad(upstream: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of :func:`bilinear_resize` back onto an (in_h, in_w) grid."""
    g = np.asarray(upstream, dtype=np.float64)
    ry = resize_matrix(in_h, g.shape[-2])
    rx = resize_matrix(in_w, g.shape[-1])
    return ry.T @ g @ rx


# ---------------------------------------------------------------------------
# position-wise two-way softmax
# ---------------------------------------------------------------------------

def softmax_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"score maps differ in shape: {a.shape} vs {b.shape}")
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    z = ea + eb
    return ea / z, eb / z


def softmax_pair_grad(a, b, upstream_a, upstream_b):
    wa, wb = softmax_pair(a, b)
    if np.shape(upstream_a) != wa.shape or np.shape(upstream_b) != wa.shape:
        raise ShapeError("upstream shapes must match the score maps")
    # both weights depend only on a - b
    ds = (np.asarray(upstream_a) - np.asarray(upstream_b)) * wa * wb
    return ds, -ds
