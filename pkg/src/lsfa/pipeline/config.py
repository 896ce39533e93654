"""Pipeline configuration and its key-value file format."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

SECTION = "lsfa"


@dataclass(frozen=True)
class PipelineConfig:
    gop_length: int = 12
    # short-term terms and long-term aggregation switches
    use_motion_vectors: bool = True
    use_residual_term: bool = True
    use_tiny_term: bool = True
    use_lfa: bool = True
    # every frame through the large network, no propagation
    frame_baseline: bool = False
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    seed: int = 0
    # training
    steps: int = 2000
    lr: float = 1e-2
    lr_decay_step: int = 1400
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    grad_clip: float = 10.0
    smooth_l1_beta: float = 0.1
    reg_weight: float = 2.0

    def __post_init__(self):
        if self.gop_length < 2:
            raise ValueError("gop_length must be >= 2")
        if not 0.0 <= self.score_thresh < 1.0:
            raise ValueError("score_thresh must lie in [0, 1)")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr >= 0 required")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def with_flags(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp[SECTION] = {k: str(v) for k, v in asdict(self).items()}
        lines = [f"[{SECTION}]"] + [f"{k} = {v}" for k, v in cp[SECTION].items()]
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, typ):
    if typ in (bool, "bool"):
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def config_from_mapping(values: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    known = {f.name: f.type for f in fields(PipelineConfig)}
    kw = {}
    for k, v in values.items():
        if v is None:
            continue
        if k not in known:
            raise KeyError(f"unknown config key {k!r}")
        kw[k] = _coerce(k, v, known[k]) if isinstance(v, str) else v
    return replace(base, **kw)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    cp = configparser.ConfigParser()
    with open(Path(path)) as fh:
        cp.read_file(fh)
    if SECTION not in cp:
        raise KeyError(f"{path}: missing [{SECTION}] section")
    return config_from_mapping(dict(cp[SECTION]), base)


# Flag sets mirroring the ablation columns: (a) frame baseline, (c) motion-vector
# propagation only, (d) + residual term, (e) + tiny network, (g) + long-term aggregation.
ABLATION_COLUMNS = {
    "a": dict(frame_baseline=True, use_motion_vectors=False, use_residual_term=False,
              use_tiny_term=False, use_lfa=False),
    "c": dict(use_motion_vectors=True, use_residual_term=False, use_tiny_term=False, use_lfa=False),
    "d": dict(use_motion_vectors=True, use_residual_term=True, use_tiny_term=False, use_lfa=False),
    "e": dict(use_motion_vectors=True, use_residual_term=True, use_tiny_term=True, use_lfa=False),
    "g": dict(use_motion_vectors=True, use_residual_term=True, use_tiny_term=True, use_lfa=True),
}
