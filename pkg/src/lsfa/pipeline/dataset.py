"""Seeded synthetic video: textured circles, squares and triangles moving
linearly (with jitter) over a noisy background."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..compressed_stream import CodecParams, encode_stream, read_container, stream_frames, write_container
from ..detection import GroundTruthBox, label_motion_speed, read_ground_truth, write_ground_truth

CLASS_NAMES = ("circle", "square", "triangle")
# mean object colours per class; blended with a random colour by ``class_color_bias``
_CLASS_COLORS = np.array([[0.85, 0.30, 0.25], [0.30, 0.80, 0.35], [0.30, 0.40, 0.90]])


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_clips: int = 200
    frames_per_clip: int = 24
    height: int = 128
    width: int = 128
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 24
    max_size: int = 44
    max_speed: float = 2.0  # px/frame
    speed_exponent: float = 2.0  # speed = max_speed * u**speed_exponent, u ~ U[0, 1)
    jitter: float = 0.15  # per-frame position noise, as a fraction of the speed
    background_noise: float = 0.04
    texture_noise: float = 0.06
    temporal_noise: float = 0.01
    class_color_bias: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError("frame dims must be multiples of 16")
        if self.max_size >= min(self.height, self.width) or self.min_size < 4 or self.min_size > self.max_size:
            raise ValueError("object sizes must satisfy 4 <= min_size <= max_size < frame size")
        if self.max_speed < 0 or self.jitter < 0 or self.speed_exponent <= 0:
            raise ValueError("speeds must be >= 0")
        if self.n_clips < 1 or self.frames_per_clip < 1 or not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need at least one clip, frame and object")


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    clips: list  # uint8 arrays (N, 3, H, W)
    gts: list  # per clip: list of GroundTruthBox with frame ids "clip:t"
    true_speed: dict = field(default_factory=dict)  # (clip, track) -> px/frame

    def all_gts(self) -> list[GroundTruthBox]:
        return [g for clip in self.gts for g in clip]


def shape_mask(cls: int, cx: float, cy: float, size: float, H: int, W: int) -> np.ndarray:
    """Boolean raster of one shape, sampled at pixel centres."""
    ys, xs = np.mgrid[0:H, 0:W]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    r = size / 2.0
    if cls == 0:
        return dx * dx + dy * dy <= r * r
    if cls == 1:
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # apex-up isosceles triangle inscribed in the size x size square
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)


def mask_box(mask: np.ndarray):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return None
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _background(rng, spec):
    H, W = spec.height, spec.width
    c0, c1 = rng.uniform(0.25, 0.65, 3), rng.uniform(0.25, 0.65, 3)
    t = np.linspace(0.0, 1.0, W)[None, None, :] if rng.random() < 0.5 else np.linspace(0.0, 1.0, H)[None, :, None]
    bg = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    bg = bg + rng.normal(0.0, spec.background_noise, (3, H, W))
    return np.broadcast_to(bg, (3, H, W)).copy()


def _render_clip(rng, spec, clip_idx):
    H, W, N = spec.height, spec.width, spec.frames_per_clip
    bg = _background(rng, spec)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for track in range(n_obj):
        cls = int(rng.integers(0, 3))
        size = float(rng.uniform(spec.min_size, spec.max_size))
        color = spec.class_color_bias * _CLASS_COLORS[cls] + (1 - spec.class_color_bias) * rng.uniform(0.1, 0.9, 3)
        tex = rng.normal(0.0, spec.texture_noise, (3, H, W))
        speed = float(spec.max_speed * rng.uniform() ** spec.speed_exponent)
        theta = rng.uniform(0.0, 2 * np.pi)
        half = size / 2.0 + 1.0
        pos = np.array([rng.uniform(half, W - half), rng.uniform(half, H - half)])
        vel = speed * np.array([np.cos(theta), np.sin(theta)])
        objects.append(dict(cls=cls, size=size, color=color, tex=tex, speed=speed, pos=pos, vel=vel, half=half))

    frames = np.empty((N, 3, H, W), dtype=np.uint8)
    gts = []
    for t in range(N):
        img = bg.copy()
        for track, o in enumerate(objects):
            if t > 0:
                step = o["vel"] + rng.normal(0.0, spec.jitter * o["speed"], 2) if o["speed"] > 0 else 0.0
                o["pos"] = o["pos"] + step
                for ax, lim in ((0, W), (1, H)):
                    if o["pos"][ax] < o["half"]:
                        o["pos"][ax] = 2 * o["half"] - o["pos"][ax]
                        o["vel"][ax] = abs(o["vel"][ax])
                    elif o["pos"][ax] > lim - o["half"]:
                        o["pos"][ax] = 2 * (lim - o["half"]) - o["pos"][ax]
                        o["vel"][ax] = -abs(o["vel"][ax])
            m = shape_mask(o["cls"], o["pos"][0], o["pos"][1], o["size"], H, W)
            # texture is attached to the object: shift it with the integer position
            sx, sy = int(round(o["pos"][0])), int(round(o["pos"][1]))
            tex = np.roll(o["tex"], (sy, sx), axis=(1, 2))
            img = np.where(m[None], o["color"][:, None, None] + tex, img)
            box = mask_box(m)
            if box is not None:
                gts.append(GroundTruthBox(f"{clip_idx}:{t}", o["cls"], *box, track_id=track))
        img = img + rng.normal(0.0, spec.temporal_noise, img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    speeds = {(clip_idx, tr): o["speed"] for tr, o in enumerate(objects)}
    return frames, gts, speeds


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, clip_offset: int = 0) -> SyntheticDataset:
    """Render ``spec.n_clips`` clips; clip ids start at ``clip_offset``."""
    clips, gts, speeds = [], [], {}
    for i in range(spec.n_clips):
        # one independent stream per clip keeps clips stable under n_clips changes
        rng = np.random.default_rng([spec.seed, i])
        frames, g, s = _render_clip(rng, spec, clip_offset + i)
        clips.append(frames)
        gts.append(label_motion_speed(g))
        speeds.update(s)
    return SyntheticDataset(spec, clips, gts, speeds)


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/clip_0000.lsfa ... + gt.txt
# ---------------------------------------------------------------------------

def save_dataset(ds: SyntheticDataset, directory, gop_length: int = 12) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = CodecParams(gop_length=gop_length)
    paths = []
    for frames, g in zip(ds.clips, ds.gts):
        clip_id = g[0].frame.split(":")[0] if g else str(len(paths))
        p = directory / f"clip_{int(clip_id):04d}.lsfa"
        write_container(p, encode_stream(list(frames), params))
        paths.append(p)
    write_ground_truth(directory / "gt.txt", ds.all_gts())
    return paths


def load_clips(directory) -> list[tuple[str, list]]:
    """Return [(clip_id, gops)] for every container in ``directory``."""
    out = []
    for p in sorted(Path(directory).glob("clip_*.lsfa")):
        out.append((str(int(p.stem.split("_")[1])), read_container(p)))
    return out


def load_dataset(directory, spec: SyntheticDatasetSpec | None = None) -> SyntheticDataset:
    directory = Path(directory)
    gt_all = read_ground_truth(directory / "gt.txt")
    by_clip = {}
    for g in gt_all:
        by_clip.setdefault(g.frame.split(":")[0], []).append(g)
    clips, gts = [], []
    for clip_id, gops in load_clips(directory):
        clips.append(np.stack([f.pixels for f in stream_frames(gops)]))
        gts.append(by_clip.get(clip_id, []))
    return SyntheticDataset(spec or SyntheticDatasetSpec(n_clips=max(1, len(clips))), clips, gts)
