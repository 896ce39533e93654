"""Hot inner loops: block-matching SAD search and bilinear gather/scatter.

Every kernel has a numba implementation and a pure-numpy twin with identical
results.  The numba path is used when numba imports and ``LSFA_NO_NUMBA`` is
unset (or ``0``); set ``LSFA_NO_NUMBA=1`` to force numpy.
"""
from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("LSFA_NO_NUMBA", "0") not in ("1", "true", "yes")


def candidate_offsets(radius: int) -> np.ndarray:
    """All integer (dx, dy) in the search window, in tie-break order.

    Order is smallest |dx|+|dy|, then smallest dy, then smallest dx, so a
    strict-improvement scan picks the deterministic winner.
    """
    r = int(radius)
    offs = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    offs.sort(key=lambda o: (abs(o[0]) + abs(o[1]), o[1], o[0]))
    return np.asarray(offs, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# block matching
# ---------------------------------------------------------------------------

def _block_match_numpy(cur, ref, block, offsets, init):
    C, H, W = cur.shape
    nby, nbx = init.shape[1], init.shape[2]
    ys = np.arange(nby) * block
    xs = np.arange(nbx) * block
    hs = np.minimum(block, H - ys)
    ws = np.minimum(block, W - xs)
    # pixel -> block index maps; blocks may be partial at the far edges
    row_blk = np.minimum(np.arange(H) // block, nby - 1)
    col_blk = np.minimum(np.arange(W) // block, nbx - 1)
    blk_id = (row_blk[:, None] * nbx + col_blk[None, :]).ravel()

    best = np.full((nby, nbx), np.inf)
    out = np.zeros((2, nby, nbx), dtype=np.int64)
    yy = np.arange(H)[:, None]
    xx = np.arange(W)[None, :]
    for dx, dy in offsets:
        bdx = init[0] + dx
        bdy = init[1] + dy
        sy = ys[:, None] + bdy
        sx = xs[None, :] + bdx
        valid = (sy >= 0) & (sx >= 0) & (sy + hs[:, None] <= H) & (sx + ws[None, :] <= W)
        if not valid.any():
            continue
        py = np.clip(yy + bdy[row_blk][:, col_blk], 0, H - 1)
        px = np.clip(xx + bdx[row_blk][:, col_blk], 0, W - 1)
        diff = np.abs(cur - ref[:, py, px]).sum(axis=0)
        sad = np.bincount(blk_id, weights=diff.ravel(), minlength=nby * nbx).reshape(nby, nbx)
        better = valid & (sad < best)
        best = np.where(better, sad, best)
        out[0] = np.where(better, bdx, out[0])
        out[1] = np.where(better, bdy, out[1])
    return out


if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def _block_match_numba(cur, ref, block, offsets, init):
        C, H, W = cur.shape
        nby = init.shape[1]
        nbx = init.shape[2]
        out = np.zeros((2, nby, nbx), dtype=np.int64)
        for by in range(nby):
            y0 = by * block
            h = min(block, H - y0)
            for bx in range(nbx):
                x0 = bx * block
                w = min(block, W - x0)
                best = np.inf
                bestx = 0
                besty = 0
                for k in range(offsets.shape[0]):
                    dx = init[0, by, bx] + offsets[k, 0]
                    dy = init[1, by, bx] + offsets[k, 1]
                    sy = y0 + dy
                    sx = x0 + dx
                    if sy < 0 or sx < 0 or sy + h > H or sx + w > W:
                        continue
                    s = 0.0
                    for c in range(C):
                        for i in range(h):
                            for j in range(w):
                                s += abs(cur[c, y0 + i, x0 + j] - ref[c, sy + i, sx + j])
                        if s >= best:
                            break
                    if s < best:
                        best = s
                        bestx = dx
                        besty = dy
                out[0, by, bx] = bestx
                out[1, by, bx] = besty
        return out


def block_match(cur: np.ndarray, ref: np.ndarray, block: int, radius: int, init=None) -> np.ndarray:
    """Per-block integer displacement minimising SAD between ``cur`` and ``ref``.

    ``cur``/``ref`` are (C, H, W).  Blocks tile the frame from the top-left;
    the last row/column of blocks may be partial.  Returns an int64 array
    (2, nby, nbx) holding (dx, dy) with source = block position + (dx, dy).
    Only candidates whose whole block lies inside ``ref`` are considered;
    the zero-offset candidate (relative to ``init``) must therefore be valid.
    """
    cur = np.ascontiguousarray(cur, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if cur.ndim != 3 or cur.shape != ref.shape:
        raise ValueError(f"need two (C, H, W) arrays of equal shape, got {cur.shape} and {ref.shape}")
    H, W = cur.shape[1:]
    nby = -(-H // block)
    nbx = -(-W // block)
    if init is None:
        init = np.zeros((2, nby, nbx), dtype=np.int64)
    init = np.ascontiguousarray(init, dtype=np.int64)
    offsets = candidate_offsets(radius)
    if USE_NUMBA:
        return _block_match_numba(cur, ref, int(block), offsets, init)
    return _block_match_numpy(cur, ref, int(block), offsets, init)


# ---------------------------------------------------------------------------
# bilinear sampling with border clamping
# ---------------------------------------------------------------------------

def sample_coords(flow: np.ndarray):
    """Integer corners and fractional weights for sampling at p + flow(p).

    ``flow`` is (2, H, W) or (N, 2, H, W).  Coordinates are clamped to the
    grid before interpolation.
    """
    H, W = flow.shape[-2:]
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    x = np.clip(gx + flow[..., 0, :, :], 0.0, W - 1)
    y = np.clip(gy + flow[..., 1, :, :], 0.0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.minimum(x0, W - 1)
    y0 = np.minimum(y0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return y0, x0, y1, x1, y - y0, x - x0


def _gather_numpy(feat, y0, x0, y1, x1, wy, wx):
    # feat (N, C, H, W); index arrays (N, H, W)
    n = np.arange(feat.shape[0])[:, None, None, None]
    c = np.arange(feat.shape[1])[None, :, None, None]
    y0, x0, y1, x1 = (a[:, None] for a in (y0, x0, y1, x1))
    wy = wy[:, None]
    wx = wx[:, None]
    top = feat[n, c, y0, x0] * (1.0 - wx) + feat[n, c, y0, x1] * wx
    bot = feat[n, c, y1, x0] * (1.0 - wx) + feat[n, c, y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def _scatter_numpy(grad, y0, x0, y1, x1, wy, wx):
    N, C, H, W = grad.shape
    out = np.zeros((N, C, H * W))
    for corner_y, corner_x, w in (
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x1, (1.0 - wy) * wx),
        (y1, x0, wy * (1.0 - wx)),
        (y1, x1, wy * wx),
    ):
        flat = (corner_y * W + corner_x).reshape(N, -1)
        contrib = grad * w[:, None]
        for n in range(N):
            for c in range(C):
                out[n, c] += np.bincount(flat[n], weights=contrib[n, c].ravel(), minlength=H * W)
    return out.reshape(N, C, H, W)


if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True, inline="always")
    def _corner(v, n):
        # same clamp / floor arithmetic as sample_coords
        v = min(max(v, 0.0), n - 1.0)
        i0 = min(int(np.floor(v)), n - 1)
        return i0, min(i0 + 1, n - 1), v - i0

    @njit(cache=True, nogil=True)
    def _gather_numba(feat, flow):
        N, C, H, W = feat.shape
        out = np.empty((N, C, H, W))
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    a, a1, fy = _corner(i + flow[n, 1, i, j], H)
                    b, b1, fx = _corner(j + flow[n, 0, i, j], W)
                    for c in range(C):
                        top = feat[n, c, a, b] * (1.0 - fx) + feat[n, c, a, b1] * fx
                        bot = feat[n, c, a1, b] * (1.0 - fx) + feat[n, c, a1, b1] * fx
                        out[n, c, i, j] = top * (1.0 - fy) + bot * fy
        return out

    @njit(cache=True, nogil=True)
    def _scatter_numba(grad, flow):
        N, C, H, W = grad.shape
        out = np.zeros((N, C, H, W))
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    a, a1, fy = _corner(i + flow[n, 1, i, j], H)
                    b, b1, fx = _corner(j + flow[n, 0, i, j], W)
                    for c in range(C):
                        g = grad[n, c, i, j]
                        out[n, c, a, b] += g * (1.0 - fy) * (1.0 - fx)
                        out[n, c, a, b1] += g * (1.0 - fy) * fx
                        out[n, c, a1, b] += g * fy * (1.0 - fx)
                        out[n, c, a1, b1] += g * fy * fx
        return out


def _batched(feat, flow):
    feat = np.asarray(feat, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    squeeze = feat.ndim == 3
    if squeeze:
        feat = feat[None]
    if flow.ndim == 3:
        flow = np.broadcast_to(flow[None], (feat.shape[0],) + flow.shape)
    return np.ascontiguousarray(feat), np.ascontiguousarray(flow), squeeze


def gather(feat: np.ndarray, flow: np.ndarray) -> np.ndarray:
    feat, flow, squeeze = _batched(feat, flow)
    out = _gather_numba(feat, flow) if USE_NUMBA else _gather_numpy(feat, *sample_coords(flow))
    return out[0] if squeeze else out


def scatter(grad: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gather` with respect to the sampled map."""
    grad, flow, squeeze = _batched(grad, flow)
    out = _scatter_numba(grad, flow) if USE_NUMBA else _scatter_numpy(grad, *sample_coords(flow))
    return out[0] if squeeze else out


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


@contextmanager
def use_backend(name: str):
    """Temporarily force ``"numba"`` or ``"numpy"`` kernels."""
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not importable")
    saved = USE_NUMBA
    USE_NUMBA = name == "numba"
    try:
        yield
    finally:
        USE_NUMBA = saved
