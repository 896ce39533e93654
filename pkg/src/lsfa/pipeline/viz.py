"""Per-channel grayscale dumps of feature maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def normalize_channel(channel: np.ndarray) -> np.ndarray:
    """Min-max map a 2-d array onto uint8; a constant channel becomes mid-gray."""
    c = np.asarray(channel, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"expected a 2-d channel, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("channel contains non-finite values")
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.full(c.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (c - lo) / (hi - lo)).astype(np.uint8)


def export_feature_viz(feature: np.ndarray, channels, path, scale: int = 1, prefix: str = "channel") -> list[Path]:
    """Write one PNG per requested channel of a (C, h, w) map into directory ``path``.

    ``scale`` enlarges each cell to a scale x scale block (nearest neighbour).
    Returns the written file paths in the order of ``channels``.
    """
    feature = np.asarray(feature)
    if feature.ndim != 3:
        raise ValueError(f"expected a (C, h, w) feature map, got shape {feature.shape}")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    channels = [int(c) for c in channels]
    bad = [c for c in channels if not 0 <= c < feature.shape[0]]
    if bad:
        raise IndexError(f"channel indices {bad} outside [0, {feature.shape[0] - 1}]")
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for c in channels:
        img = normalize_channel(feature[c])
        if scale > 1:
            img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
        p = out_dir / f"{prefix}_{c:03d}.png"
        Image.fromarray(img).save(p)
        written.append(p)
    return written
