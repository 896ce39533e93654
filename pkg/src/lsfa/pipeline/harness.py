"""Validation, ablation table and runtime profiling."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from ..compressed_stream import CodecParams, encode_stream
from ..detection import EvalReport, evaluate_map
from ..networks import ModelWeights, NetworkSpec
from .config import ABLATION_COLUMNS, PipelineConfig
from .inference import InferenceResult, detections_by_frame, run_inference
from .training import prepare_dataset, train


def encode_clips(dataset, gop_length: int) -> list[tuple[str, list]]:
    params = CodecParams(gop_length=gop_length)
    out = []
    for i, (frames, gts) in enumerate(zip(dataset.clips, dataset.gts)):
        clip_id = gts[0].frame.split(":")[0] if gts else str(i)
        out.append((clip_id, encode_stream(list(frames), params)))
    return out


def evaluate(streams, gts, w: ModelWeights, cfg: PipelineConfig):
    """Run every (clip_id, gops) stream and score it; returns (EvalReport, results)."""
    dets, results = {}, []
    for clip_id, gops in streams:
        res = run_inference(gops, w, cfg)
        dets.update(detections_by_frame(res, clip_id))
        results.append(res)
    return evaluate_map(dets, gts), results


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

@dataclass
class TimingReport:
    component_ms: dict = field(default_factory=dict)  # kind -> {component: mean ms}
    frame_ms: dict = field(default_factory=dict)  # kind -> mean ms per frame
    frames: dict = field(default_factory=dict)  # kind -> count
    gop_length: int = 0
    measured_avg_ms: float = 0.0  # total stream wall clock / frames
    speed_vs_L: dict = field(default_factory=dict)  # L -> measured avg ms/frame

    @property
    def weighted_avg_ms(self) -> float:
        L = self.gop_length
        return (self.frame_ms.get("key", 0.0) + (L - 1) * self.frame_ms.get("nonkey", 0.0)) / L

    @property
    def fps(self) -> float:
        return 1000.0 / self.measured_avg_ms if self.measured_avg_ms > 0 else float("inf")

    def to_text(self) -> str:
        lines = [f"gop_length = {self.gop_length}"]
        for kind in ("key", "nonkey"):
            for comp, ms in self.component_ms.get(kind, {}).items():
                lines.append(f"{kind}.{comp}_ms = {ms:.3f}")
            lines.append(f"{kind}.frame_ms = {self.frame_ms.get(kind, 0.0):.3f}")
            lines.append(f"{kind}.frames = {self.frames.get(kind, 0)}")
        lines.append(f"weighted_avg_ms = {self.weighted_avg_ms:.3f}")
        lines.append(f"measured_avg_ms = {self.measured_avg_ms:.3f}")
        for L, ms in sorted(self.speed_vs_L.items()):
            lines.append(f"avg_ms_at_L{L} = {ms:.3f}")
        return "\n".join(lines) + "\n"


def profile(results, warmup_gops: int = 1) -> TimingReport:
    """Aggregate per-frame timings of one or more inference runs.

    The first ``warmup_gops`` GOPs of each run are excluded when the run has
    more GOPs than that.
    """
    if isinstance(results, InferenceResult):
        results = [results]
    results = list(results)
    if not results:
        raise ValueError("nothing to profile")
    L = results[0].gop_length
    comp = {"key": {}, "nonkey": {}}
    totals = {"key": [], "nonkey": []}
    wall, n_frames = 0.0, 0
    for res in results:
        skip = warmup_gops if len(res.gop_wall) > warmup_gops else 0
        timings = res.frame_timings[skip * L:]
        wall += sum(res.gop_wall[skip:])
        n_frames += len(timings)
        for t in timings:
            totals[t.kind].append(t.total)
            for name, sec in t.components.items():
                comp[t.kind].setdefault(name, []).append(sec)
    report = TimingReport(gop_length=L)
    for kind in ("key", "nonkey"):
        n = len(totals[kind])
        report.frames[kind] = n
        report.frame_ms[kind] = 1000.0 * float(np.mean(totals[kind])) if n else 0.0
        report.component_ms[kind] = {k: 1000.0 * float(np.sum(v)) / n for k, v in comp[kind].items()} if n else {}
    report.measured_avg_ms = 1000.0 * wall / max(1, n_frames)
    return report


def timed_profile(gops, w: ModelWeights, cfg: PipelineConfig, repeats: int = 3) -> TimingReport:
    """Warm up on the first GOP, then keep the fastest of ``repeats`` full runs."""
    run_inference(gops[:1], w, cfg)
    best = min((run_inference(gops, w, cfg) for _ in range(repeats)), key=lambda r: r.wall_time)
    return profile(best, warmup_gops=0)


def speed_vs_gop_length(frames, w: ModelWeights, cfg: PipelineConfig, lengths=(2, 4, 8, 12, 24),
                        repeats: int = 5) -> dict:
    """Measured average ms/frame for each key-frame interval on fixed content.

    Uses the median over ``repeats`` whole-stream runs (after warm-up).
    """
    out = {}
    for L in lengths:
        gops = encode_stream(list(frames), CodecParams(gop_length=L))
        c = replace(cfg, gop_length=L)
        run_inference(gops[:1], w, c)
        runs = [run_inference(gops, w, c).wall_time for _ in range(repeats)]
        out[L] = 1000.0 * statistics.median(runs) / len(frames)
    return out


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    column: str
    flags: dict
    report: EvalReport
    timing: TimingReport


def run_ablation(train_set, val_set, base_cfg: PipelineConfig, columns=("a", "c", "d", "e", "g"),
                 weights: dict | None = None, spec: NetworkSpec = NetworkSpec(), train_clips=None) -> list[AblationRow]:
    """Train (unless ``weights`` supplies them) and evaluate each column config."""
    grid = {}
    for col in columns:
        if col in grid:
            raise ValueError(f"duplicate column {col!r}")
        if col not in ABLATION_COLUMNS:
            raise KeyError(f"unknown ablation column {col!r}")
        grid[col] = replace(base_cfg, **ABLATION_COLUMNS[col])
    if weights is None:
        if train_set is None and train_clips is None:
            raise ValueError("missing weights and no training data")
        if train_clips is None:
            train_clips = prepare_dataset(train_set, base_cfg.gop_length, spec.num_classes)
        weights = {col: train(train_set, cfg, spec, clips=train_clips, log_every=0) for col, cfg in grid.items()}
    missing = [c for c in grid if c not in weights]
    if missing:
        raise KeyError(f"missing weights for columns {missing}")
    streams = encode_clips(val_set, base_cfg.gop_length)
    gts = val_set.all_gts()
    rows = []
    for col, cfg in grid.items():
        report, results = evaluate(streams, gts, weights[col], cfg)
        rows.append(AblationRow(col, ABLATION_COLUMNS[col], report, profile(results)))
    return rows


def format_ablation(rows) -> str:
    cols = [r.column for r in rows]
    flag_rows = [
        ("Per-frame detector", lambda r: True),
        ("SFA - W(F', M)", lambda r: r.flags.get("use_motion_vectors", False)),
        ("SFA - Conv(R)", lambda r: r.flags.get("use_residual_term", False)),
        ("SFA - N_tiny", lambda r: r.flags.get("use_tiny_term", False)),
        ("LFA", lambda r: r.flags.get("use_lfa", False)),
    ]

    def pct(v):
        return "n/a" if v is None else f"{100 * v:.1f}"

    width = 22
    out = ["Method".ljust(width) + "".join(f"({c})".rjust(8) for c in cols)]
    for name, fn in flag_rows:
        out.append(name.ljust(width) + "".join(("x" if fn(r) else "").rjust(8) for r in rows))
    out.append("mAP (%)".ljust(width) + "".join(pct(r.report.mAP).rjust(8) for r in rows))
    for s in ("slow", "medium", "fast"):
        out.append(f"mAP (%) ({s})".ljust(width) + "".join(pct(r.report.mAP_by_speed.get(s)).rjust(8) for r in rows))
    out.append("Speed (fps)".ljust(width) + "".join(f"{r.timing.fps:.1f}".rjust(8) for r in rows))
    return "\n".join(out) + "\n"
