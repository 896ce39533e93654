"""Synthetic I/P-frame codec and motion-vector/residual accumulation.

Frames are stored as 8-bit codes; a P-record carries one integer motion
vector per macroblock and an exact signed residual, so decoding is lossless.
Motion vectors point from a pixel in the current frame to its source in the
previous frame (source = p + mv), the same gather convention as
:func:`lsfa.tensor_ops.bilinear_warp`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .tensor_ops import bilinear_resize, bilinear_warp

MAGIC = b"LSFA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHHI")  # magic, version, height, width, L, macroblock, n_frames


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    """An RGB frame stored as 8-bit codes, shape (3, H, W)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise CodecError(f"frame pixels must be uint8, got {px.dtype}")
        if px.ndim != 3 or px.shape[0] != 3:
            raise CodecError(f"frame must be (3, H, W), got {px.shape}")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "Frame":
        """Quantise a float (3, H, W) image in [0, 1] to stored precision."""
        rgb = np.asarray(rgb, dtype=np.float64)
        if not np.isfinite(rgb).all():
            raise CodecError("non-finite pixel values")
        return cls(np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8))

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class ResidualMap:
    """Signed residual in units of 1/255 (``levels``), shape (3, H, W).

    Stored P-record residuals are integer-valued; accumulated ones may carry
    fractional levels after sub-pixel sampling.
    """

    levels: np.ndarray

    @property
    def rgb_delta(self) -> np.ndarray:
        return self.levels / 255.0


@dataclass(frozen=True)
class PRecord:
    mv_blocks: np.ndarray  # int16 (2, H/mb, W/mb), (dx, dy)
    residual: np.ndarray  # int16 (3, H, W), value x 255
    macroblock: int = 16

    def motion_field(self) -> np.ndarray:
        """Pixel-resolution (2, H, W) float field; constant inside each macroblock."""
        mb = self.macroblock
        return np.repeat(np.repeat(self.mv_blocks, mb, axis=1), mb, axis=2).astype(np.float64)

    def residual_map(self) -> ResidualMap:
        return ResidualMap(self.residual.astype(np.float64))


@dataclass(frozen=True)
class CodecParams:
    macroblock: int = 16
    search_radius: int = 8
    gop_length: int = 12

    def __post_init__(self):
        if self.macroblock < 1 or self.search_radius < 0 or self.gop_length < 2:
            raise ValueError("need macroblock >= 1, search_radius >= 0, gop_length >= 2")


@dataclass(frozen=True)
class GopSegment:
    key_frame: Frame
    p_records: tuple = field(default_factory=tuple)
    macroblock: int = 16
    interval: int = 0  # key-frame interval L; 0 means "as many frames as stored"

    def __post_init__(self):
        if self.interval and not 1 <= self.num_frames <= self.interval:
            raise CodecError(f"{self.num_frames} frames do not fit a GOP of length {self.interval}")

    @property
    def num_frames(self) -> int:
        return len(self.p_records) + 1

    @property
    def gop_length(self) -> int:
        """Key-frame interval L; only the final GOP of a stream may hold fewer frames."""
        return self.interval or self.num_frames

    @property
    def shape(self) -> tuple[int, int]:
        return self.key_frame.height, self.key_frame.width

    def __eq__(self, other):
        if not isinstance(other, GopSegment) or self.key_frame != other.key_frame:
            return False
        if len(self.p_records) != len(other.p_records) or self.gop_length != other.gop_length:
            return False
        return all(
            np.array_equal(a.mv_blocks, b.mv_blocks) and np.array_equal(a.residual, b.residual)
            for a, b in zip(self.p_records, other.p_records)
        )

    __hash__ = None


def _as_frame(f) -> Frame:
    if isinstance(f, Frame):
        return f
    arr = np.asarray(f)
    if arr.dtype == np.uint8:
        return Frame(arr)
    return Frame.from_rgb(arr)


def _compensate(prev: np.ndarray, mv_blocks: np.ndarray, mb: int) -> np.ndarray:
    """Block-copy prediction from ``prev`` (int array, (3, H, W))."""
    pred = np.empty_like(prev)
    nby, nbx = mv_blocks.shape[1:]
    for by in range(nby):
        for bx in range(nbx):
            dx, dy = int(mv_blocks[0, by, bx]), int(mv_blocks[1, by, bx])
            y0, x0 = by * mb, bx * mb
            pred[:, y0:y0 + mb, x0:x0 + mb] = prev[:, y0 + dy:y0 + dy + mb, x0 + dx:x0 + dx + mb]
    return pred


def encode_gop(frames: Sequence, params: CodecParams = CodecParams()) -> GopSegment:
    frames = [_as_frame(f) for f in frames]
    if not 1 <= len(frames) <= params.gop_length:
        raise CodecError(f"expected 1..{params.gop_length} frames, got {len(frames)}")
    H, W = frames[0].height, frames[0].width
    if any((f.height, f.width) != (H, W) for f in frames):
        raise CodecError("frames differ in size")
    mb = params.macroblock
    if H % mb or W % mb:
        raise CodecError(f"frame size {H}x{W} is not a multiple of the {mb}-pixel macroblock")

    records = []
    prev = frames[0].pixels.astype(np.int16)
    for f in frames[1:]:
        cur = f.pixels.astype(np.int16)
        mv = _kernels.block_match(cur, prev, mb, params.search_radius).astype(np.int16)
        residual = cur - _compensate(prev, mv, mb)
        records.append(PRecord(mv, residual, mb))
        # lossless: the reconstruction equals the input
        prev = cur
    return GopSegment(frames[0], tuple(records), mb, params.gop_length)


def encode_stream(frames: Sequence, params: CodecParams = CodecParams()) -> list[GopSegment]:
    """Split a clip into consecutive GOPs of L frames; the last one may be shorter."""
    L = params.gop_length
    if len(frames) == 0:
        raise CodecError("empty stream")
    return [encode_gop(frames[i:i + L], params) for i in range(0, len(frames), L)]


def decode_step(prev: np.ndarray, record: PRecord) -> np.ndarray:
    """Reconstruct one P-frame (int16 codes) from the previous reconstruction."""
    return np.clip(_compensate(prev, record.mv_blocks, record.macroblock) + record.residual, 0, 255)


def decode_frame(gop: GopSegment, index: int) -> Frame:
    if not 0 <= index < gop.num_frames:
        raise IndexError(f"frame index {index} outside [0, {gop.num_frames - 1}]")
    recon = gop.key_frame.pixels.astype(np.int16)
    for rec in gop.p_records[:index]:
        recon = decode_step(recon, rec)
    return Frame(recon.astype(np.uint8))


def decode_gop(gop: GopSegment) -> list[Frame]:
    out = [gop.key_frame]
    recon = gop.key_frame.pixels.astype(np.int16)
    for rec in gop.p_records:
        recon = decode_step(recon, rec)
        out.append(Frame(recon.astype(np.uint8)))
    return out


# ---------------------------------------------------------------------------
# tracing motion back to the key frame
# ---------------------------------------------------------------------------

def compose(motion: np.ndarray, residual: ResidualMap, record: PRecord):
    """Extend an accumulation to frame x-1 by one more P-record (frame x).

    A pixel p of frame x comes from p + mv(p) in frame x-1, which in turn
    comes from (p + mv(p)) + motion(p + mv(p)) in the key frame.
    """
    step = record.motion_field()
    new_motion = step + bilinear_warp(motion, step)
    new_levels = record.residual.astype(np.float64) + bilinear_warp(residual.levels, step)
    return new_motion, ResidualMap(new_levels)


def accumulate_to_key(gop: GopSegment, x: int):
    """Motion field and residual mapping frame ``x`` of the GOP onto its key frame."""
    if not 1 <= x < gop.num_frames:
        raise IndexError(f"offset {x} outside [1, {gop.num_frames - 1}]")
    H, W = gop.shape
    motion = np.zeros((2, H, W))
    residual = ResidualMap(np.zeros((3, H, W)))
    for rec in gop.p_records[:x]:
        motion, residual = compose(motion, residual, rec)
    return motion, residual


def iter_accumulated(gop: GopSegment):
    """Yield (x, motion, residual) for x = 1 .. L-1, reusing each step."""
    H, W = gop.shape
    motion = np.zeros((2, H, W))
    residual = ResidualMap(np.zeros((3, H, W)))
    for x, rec in enumerate(gop.p_records, start=1):
        motion, residual = compose(motion, residual, rec)
        yield x, motion, residual


def reconstruct_from_key(gop: GopSegment, motion: np.ndarray, residual: ResidualMap) -> np.ndarray:
    """warp(key, motion) + residual, in 8-bit code units (float)."""
    return bilinear_warp(gop.key_frame.pixels.astype(np.float64), motion) + residual.levels


def motion_cues_at_feature_scale(motion: np.ndarray, residual: ResidualMap, stride: int = 16):
    """Resize pixel-level cues to the feature grid.

    Returns (flow in feature cells, residual in [-1, 1] units), both at
    (H/stride, W/stride).
    """
    H, W = motion.shape[-2:]
    if H % stride or W % stride:
        raise ValueError(f"{H}x{W} is not divisible by stride {stride}")
    h, w = H // stride, W // stride
    flow = bilinear_resize(motion, h, w) / stride
    res = bilinear_resize(residual.rgb_delta, h, w)
    return flow, res


# ---------------------------------------------------------------------------
# container file
# ---------------------------------------------------------------------------

def write_container(path_or_file, gops: Sequence[GopSegment]) -> None:
    if not gops:
        raise CodecError("nothing to write")
    H, W = gops[0].shape
    L = gops[0].gop_length
    mb = gops[0].macroblock
    for i, g in enumerate(gops):
        if g.shape != (H, W) or g.gop_length != L or g.macroblock != mb:
            raise CodecError("all GOPs in a container must share dims, L and macroblock size")
        if g.num_frames != L and i != len(gops) - 1:
            raise CodecError("only the final GOP may be shorter than L")
    n_frames = sum(g.num_frames for g in gops)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, H, W, L, mb, n_frames)]
    for g in gops:
        chunks.append(np.ascontiguousarray(g.key_frame.pixels.transpose(1, 2, 0)).tobytes())
        for rec in g.p_records:
            chunks.append(rec.mv_blocks.transpose(1, 2, 0).astype("<i2").tobytes())
            chunks.append(rec.residual.transpose(1, 2, 0).astype("<i2").tobytes())
    data = b"".join(chunks)
    if isinstance(path_or_file, (str, Path)):
        Path(path_or_file).write_bytes(data)
    else:
        path_or_file.write(data)


def read_container(path_or_file) -> list[GopSegment]:
    if isinstance(path_or_file, (str, Path)):
        data = Path(path_or_file).read_bytes()
    else:
        data = path_or_file.read()
    if len(data) < _HEADER.size:
        raise CodecError("truncated container header")
    magic, version, H, W, L, mb, n_frames = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CodecError(f"unsupported container version {version}")
    if mb == 0 or H % mb or W % mb:
        raise CodecError("corrupt header: macroblock does not tile the frame")
    if L < 2 or n_frames < 1:
        raise CodecError("corrupt header: need L >= 2 and at least one frame")
    off = _HEADER.size
    key_bytes = H * W * 3
    mv_count = (H // mb) * (W // mb) * 2
    res_count = H * W * 3
    sizes = [min(L, n_frames - i) for i in range(0, n_frames, L)]
    need = off + len(sizes) * key_bytes + (n_frames - len(sizes)) * 2 * (mv_count + res_count)
    if len(data) != need:
        raise CodecError(f"container size {len(data)} does not match header ({need} bytes expected)")
    gops = []
    for n in sizes:
        key = np.frombuffer(data, np.uint8, key_bytes, off).reshape(H, W, 3).transpose(2, 0, 1)
        off += key_bytes
        recs = []
        for _ in range(n - 1):
            mv = np.frombuffer(data, "<i2", mv_count, off).reshape(H // mb, W // mb, 2).transpose(2, 0, 1)
            off += 2 * mv_count
            res = np.frombuffer(data, "<i2", res_count, off).reshape(H, W, 3).transpose(2, 0, 1)
            off += 2 * res_count
            recs.append(PRecord(mv.astype(np.int16), res.astype(np.int16), mb))
        gops.append(GopSegment(Frame(np.ascontiguousarray(key)), tuple(recs), mb, L))
    return gops


def stream_frames(gops: Sequence[GopSegment]) -> list[Frame]:
    frames = []
    for g in gops:
        frames.extend(decode_gop(g))
    return frames
