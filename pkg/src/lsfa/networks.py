"""Toy learned components and the frozen block-matching flow estimator.

All sub-networks are plain conv stacks described by :class:`LayerSpec`
tuples; ``run_stack``/``backprop_stack`` give the forward pass with a cache
and its exact reverse.  Parameters live in a flat ``{name: array}`` dict
inside :class:`ModelWeights` so the trainer can update them uniformly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .tensor_ops import ConvKernel, ShapeError, bilinear_resize, conv2d, conv2d_grad, relu

STRIDE = 16
WEIGHTS_MAGIC = b"LSFW"
WEIGHTS_VERSION = 1
_DTYPE_F32 = 0


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    relu: bool = True

    @property
    def padding(self) -> int:
        return self.k // 2


@dataclass(frozen=True)
class NetworkSpec:
    c_feat: int = 32
    large_channels: tuple = (16, 32, 32, 64)
    tiny_channels: tuple = (16, 16)
    tiny_downsample: int = 4
    att_hidden: tuple = (32, 16)
    head_channels: int = 32
    num_classes: int = 3

    def __post_init__(self):
        if 2 ** len(self.large_channels) != STRIDE:
            raise ValueError("large path must reach stride 16 with stride-2 layers")
        if self.tiny_downsample * 2 ** len(self.tiny_channels) != STRIDE:
            raise ValueError("tiny path: image downsample x network stride must equal 16")

    def large(self) -> list[LayerSpec]:
        layers, c = [], 3
        for i, out in enumerate(self.large_channels):
            layers.append(LayerSpec(f"large.{i}", c, out, 3, 2))
            c = out
        layers.append(LayerSpec("large.adapter", c, self.c_feat, 3, 1, relu=False))
        return layers

    def tiny(self) -> list[LayerSpec]:
        layers, c = [], 3
        for i, out in enumerate(self.tiny_channels):
            layers.append(LayerSpec(f"tiny.{i}", c, out, 3, 2))
            c = out
        layers.append(LayerSpec("tiny.adapter", c, self.c_feat, 3, 1, relu=False))
        return layers

    def attention(self) -> list[LayerSpec]:
        h1, h2 = self.att_hidden
        return [
            LayerSpec("att.0", self.c_feat, h1, 3),
            LayerSpec("att.1", h1, h2, 1),
            LayerSpec("att.2", h2, 1, 1, relu=False),
        ]

    def residual_proj(self) -> list[LayerSpec]:
        return [LayerSpec("resproj", 3, self.c_feat, 1, relu=False)]

    def head_trunk(self) -> list[LayerSpec]:
        return [LayerSpec("head.trunk", self.c_feat, self.head_channels, 3)]

    def head_cls(self) -> list[LayerSpec]:
        return [LayerSpec("head.cls", self.head_channels, self.num_classes, 1, relu=False)]

    def head_reg(self) -> list[LayerSpec]:
        return [LayerSpec("head.reg", self.head_channels, 4, 1, relu=False)]

    def all_layers(self) -> list[LayerSpec]:
        return (self.large() + self.tiny() + self.attention() + self.residual_proj()
                + self.head_trunk() + self.head_cls() + self.head_reg())

    def manifest(self) -> str:
        lines = [f"format_version = {WEIGHTS_VERSION}", f"stride = {STRIDE}"]
        for key in ("c_feat", "large_channels", "tiny_channels", "tiny_downsample",
                    "att_hidden", "head_channels", "num_classes"):
            val = getattr(self, key)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "NetworkSpec":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        if int(kv.get("stride", STRIDE)) != STRIDE:
            raise ValueError("only stride-16 networks are supported")
        args = {}
        for key in ("large_channels", "tiny_channels", "att_hidden"):
            if key in kv:
                args[key] = tuple(int(v) for v in kv[key].split(","))
        for key in ("c_feat", "tiny_downsample", "head_channels", "num_classes"):
            if key in kv:
                args[key] = int(kv[key])
        return cls(**args)


@dataclass
class ModelWeights:
    spec: NetworkSpec
    params: dict = field(default_factory=dict)
    version: int = WEIGHTS_VERSION

    def kernel(self, layer: LayerSpec) -> ConvKernel:
        return ConvKernel(self.params[layer.name + ".weight"], self.params[layer.name + ".bias"],
                          stride=layer.stride, padding=layer.padding)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec, {k: v.copy() for k, v in self.params.items()}, self.version)

    def check(self) -> None:
        for layer in self.spec.all_layers():
            w = self.params.get(layer.name + ".weight")
            b = self.params.get(layer.name + ".bias")
            if w is None or b is None:
                raise ShapeError(f"missing parameters for layer {layer.name}")
            if w.shape != (layer.out_ch, layer.in_ch, layer.k, layer.k) or b.shape != (layer.out_ch,):
                raise ShapeError(f"layer {layer.name}: got {w.shape}/{b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {layer.name} has non-finite parameters")


def init_weights(spec: NetworkSpec = NetworkSpec(), seed: int = 0) -> ModelWeights:
    """He-normal fan-in init, zero biases; last attention layer starts at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in spec.all_layers():
        fan_in = layer.in_ch * layer.k * layer.k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.out_ch, layer.in_ch, layer.k, layer.k))
        if layer.name == "att.2":
            w[:] = 0.0
        params[layer.name + ".weight"] = w
        params[layer.name + ".bias"] = np.zeros(layer.out_ch)
    # start the detector quiet: objectness prior of about 1%
    params["head.cls.bias"][:] = -np.log(99.0)
    return ModelWeights(spec, params)


# ---------------------------------------------------------------------------
# stacks
# ---------------------------------------------------------------------------

def run_stack(x: np.ndarray, layers, w: ModelWeights, keep_cache: bool = False):
    cache = []
    for layer in layers:
        k = w.kernel(layer)
        y = conv2d(x, k)
        if layer.relu:
            y = relu(y)
        if keep_cache:
            cache.append((layer, x, y))
        x = y
    return (x, cache) if keep_cache else x


def backprop_stack(grad: np.ndarray, cache, w: ModelWeights, grads: dict, need_input_grad: bool = True):
    """Accumulate parameter gradients into ``grads``; return d(loss)/d(input)."""
    for i, (layer, x, y) in enumerate(reversed(cache)):
        if layer.relu:
            grad = grad * (y > 0)
        last = i == len(cache) - 1
        gx, gw, gb = conv2d_grad(x, w.kernel(layer), grad, need_input=need_input_grad or not last)
        for name, g in ((layer.name + ".weight", gw), (layer.name + ".bias", gb)):
            grads[name] = grads[name] + g if name in grads else g
        grad = gx
    return grad


def count_macs(layers, h: int, w: int) -> int:
    total = 0
    for layer in layers:
        h = (h + 2 * layer.padding - layer.k) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.k) // layer.stride + 1
        total += h * w * layer.out_ch * layer.in_ch * layer.k * layer.k
    return total


def large_macs(spec: NetworkSpec, H: int, W: int) -> int:
    return count_macs(spec.large(), H, W)


def tiny_macs(spec: NetworkSpec, H: int, W: int) -> int:
    d = spec.tiny_downsample
    return count_macs(spec.tiny(), H // d, W // d)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _frame_array(frame) -> np.ndarray:
    if hasattr(frame, "rgb"):
        rgb = frame.rgb
    else:
        arr = np.asarray(frame)
        # stored pixels are 8-bit; float input is already RGB in [0, 1]
        rgb = arr / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
    H, W = rgb.shape[-2:]
    if H % STRIDE or W % STRIDE:
        raise ShapeError(f"frame size {H}x{W} is not a multiple of {STRIDE}")
    return rgb


def extract_large(frame, w: ModelWeights, keep_cache: bool = False):
    return run_stack(_frame_array(frame), w.spec.large(), w, keep_cache)


def downsample_for_tiny(frame, spec: NetworkSpec) -> np.ndarray:
    rgb = _frame_array(frame)
    d = spec.tiny_downsample
    return bilinear_resize(rgb, rgb.shape[-2] // d, rgb.shape[-1] // d)


def extract_tiny(frame, w: ModelWeights, keep_cache: bool = False):
    return run_stack(downsample_for_tiny(frame, w.spec), w.spec.tiny(), w, keep_cache)


def attention_scores(feature: np.ndarray, w: ModelWeights, keep_cache: bool = False):
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-3] != w.spec.c_feat:
        raise ShapeError(f"attention expects {w.spec.c_feat} channels, got {feature.shape[-3]}")
    return run_stack(feature, w.spec.attention(), w, keep_cache)


def residual_project(residual: np.ndarray, w: ModelWeights, keep_cache: bool = False):
    """1x1 projection of a feature-resolution residual (3 channels) to C_feat."""
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape[-3] != 3:
        raise ShapeError(f"residual must have 3 channels, got {residual.shape[-3]}")
    return run_stack(residual, w.spec.residual_proj(), w, keep_cache)


# ---------------------------------------------------------------------------
# flow between key frames (frozen, not trained)
# ---------------------------------------------------------------------------

def _gray(frame) -> np.ndarray:
    return _frame_array(frame).mean(axis=0, keepdims=True) * 255.0


def _pool2(img: np.ndarray) -> np.ndarray:
    C, H, W = img.shape
    img = img[:, :H - H % 2, :W - W % 2]
    return img.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def estimate_flow(frame_a, frame_b, levels: int = 3, block: int = 16, radius: int = 8) -> np.ndarray:
    """Pixel flow mapping each pixel of ``frame_b`` to its source in ``frame_a``.

    Coarse-to-fine block matching on a 2x average-pooled luminance pyramid;
    each level refines the doubled coarser estimate within ``radius``.
    """
    a, b = _gray(frame_a), _gray(frame_b)
    if a.shape != b.shape:
        raise ShapeError(f"frame sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
    pyr = [(a, b)]
    for _ in range(levels - 1):
        pyr.append((_pool2(pyr[-1][0]), _pool2(pyr[-1][1])))
    mv = None
    for lvl in range(levels - 1, -1, -1):
        ra, rb = pyr[lvl]
        H, W = ra.shape[1:]
        nby, nbx = -(-H // block), -(-W // block)
        if mv is None:
            init = np.zeros((2, nby, nbx), dtype=np.int64)
        else:
            # each coarse block covers a 2x2 group of finer blocks
            init = np.zeros((2, nby, nbx), dtype=np.int64)
            iy = np.minimum(np.arange(nby) // 2, mv.shape[1] - 1)
            ix = np.minimum(np.arange(nbx) // 2, mv.shape[2] - 1)
            init[:] = 2 * mv[:, iy][:, :, ix]
            init = _clamp_init(init, H, W, block)
        mv = _kernels.block_match(rb, ra, block, radius, init)
    H, W = a.shape[1:]
    field = np.repeat(np.repeat(mv, block, axis=1), block, axis=2)[:, :H, :W]
    return field.astype(np.float64)


def _clamp_init(init, H, W, block):
    """Pull predicted offsets back so the zero candidate stays in bounds."""
    nby, nbx = init.shape[1:]
    ys = np.arange(nby) * block
    xs = np.arange(nbx) * block
    hs = np.minimum(block, H - ys)
    ws = np.minimum(block, W - xs)
    init[0] = np.clip(init[0], -xs[None, :], (W - xs - ws)[None, :])
    init[1] = np.clip(init[1], -ys[:, None], (H - ys - hs)[:, None])
    return init


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_weights(w: ModelWeights, path) -> None:
    """Named-tensor binary (float32, little-endian) plus a ``.manifest`` text file."""
    w.check()
    path = Path(path)
    chunks = [WEIGHTS_MAGIC, struct.pack("<HI", w.version, len(w.params))]
    for name in sorted(w.params):
        arr = np.ascontiguousarray(w.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    manifest_path(path).write_text(w.spec.manifest())


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def load_weights(path, spec: NetworkSpec | None = None) -> ModelWeights:
    path = Path(path)
    if spec is None:
        spec = NetworkSpec.from_manifest(manifest_path(path).read_text())
    data = path.read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not an LSFA weight file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    off = 10
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        dtype, rank = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype != _DTYPE_F32:
            raise ValueError(f"tensor {name}: unknown dtype tag {dtype}")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(data, "<f4", size, off).reshape(dims).astype(np.float64)
        off += 4 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    w = ModelWeights(spec, params, version)
    w.check()
    extra = set(params) - {f"{l.name}.{p}" for l in spec.all_layers() for p in ("weight", "bias")}
    if extra:
        raise ShapeError(f"unexpected tensors in weight file: {sorted(extra)}")
    return w
