"""Dense single-stage detection head, greedy NMS and a VOC-style mAP evaluator."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .networks import STRIDE, ModelWeights, run_stack
from .tensor_ops import ShapeError

SPEEDS = ("slow", "medium", "fast")


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    score: float
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        _check_rect(self)

    @property
    def rect(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)


def _check_rect(b):
    if not (b.x1 < b.x2 and b.y1 < b.y2):
        raise ValueError(f"degenerate rectangle {(b.x1, b.y1, b.x2, b.y2)}")


@dataclass(frozen=True)
class GroundTruthBox:
    frame: str
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float
    track_id: int = -1
    motion_speed: str = "slow"

    def __post_init__(self):
        _check_rect(self)
        if self.motion_speed not in SPEEDS:
            raise ValueError(f"unknown speed label {self.motion_speed!r}")

    @property
    def rect(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def nms(boxes: Sequence[DetectionBox], iou_thresh: float = 0.5) -> list[DetectionBox]:
    """Greedy per-class suppression; result sorted by descending score.

    Equal scores keep input order, so the earlier box wins.
    """
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept: list[DetectionBox] = []
    for i in order:
        b = boxes[i]
        if all(k.class_id != b.class_id or iou(k.rect, b.rect) < iou_thresh for k in kept):
            kept.append(b)
    return kept


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------

def head_forward(feature: np.ndarray, w: ModelWeights, keep_cache: bool = False):
    """Return (class logits (K, h, w), box distances in stride units (4, h, w))."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-3] != w.spec.c_feat:
        raise ShapeError(f"head expects {w.spec.c_feat} channels, got {feature.shape[-3]}")
    spec = w.spec
    trunk, c_trunk = run_stack(feature, spec.head_trunk(), w, keep_cache=True)
    logits, c_cls = run_stack(trunk, spec.head_cls(), w, keep_cache=True)
    reg, c_reg = run_stack(trunk, spec.head_reg(), w, keep_cache=True)
    if keep_cache:
        return logits, reg, (c_trunk, c_cls, c_reg)
    return logits, reg


def cell_centers(h: int, w: int, stride: int = STRIDE):
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    return cy, cx


def decode_cells(scores: np.ndarray, distances: np.ndarray, score_thresh: float,
                 frame_size: tuple[int, int], stride: int = STRIDE) -> list[DetectionBox]:
    """Turn per-cell class scores (K, h, w) and pixel distances (4, h, w) into boxes.

    Distances are (left, top, right, bottom) from the cell center; boxes are
    clipped to the frame and degenerate ones dropped.  Output order is
    (row, col, class) raster order.
    """
    H, W = frame_size
    K, h, w = scores.shape
    cy, cx = cell_centers(h, w, stride)
    out = []
    for r, c, k in zip(*np.nonzero(scores.transpose(1, 2, 0) > score_thresh)):
        l, t, rr, b = distances[:, r, c]
        x1 = min(max(cx[c] - l, 0.0), W)
        y1 = min(max(cy[r] - t, 0.0), H)
        x2 = min(max(cx[c] + rr, 0.0), W)
        y2 = min(max(cy[r] + b, 0.0), H)
        if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
            continue
        out.append(DetectionBox(int(k), float(scores[k, r, c]), float(x1), float(y1), float(x2), float(y2)))
    return out


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def detect(feature: np.ndarray, w: ModelWeights, score_thresh: float = 0.05, nms_iou: float = 0.5,
           frame_size: tuple[int, int] | None = None) -> list[DetectionBox]:
    logits, reg = head_forward(feature, w)
    h, wd = logits.shape[-2:]
    if frame_size is None:
        frame_size = (h * STRIDE, wd * STRIDE)
    boxes = decode_cells(sigmoid(logits), reg * STRIDE, score_thresh, frame_size)
    return nms(boxes, nms_iou)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_class_ap: dict = field(default_factory=dict)
    mAP: float | None = None
    mAP_by_speed: dict = field(default_factory=dict)
    num_gt: int = 0
    num_det: int = 0
    gt_by_speed: dict = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return self.mAP is not None

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        lines = [f"mAP = {fmt(self.mAP)}"]
        for s in SPEEDS:
            lines.append(f"mAP_{s} = {fmt(self.mAP_by_speed.get(s))}")
        for k in sorted(self.per_class_ap):
            lines.append(f"AP_class_{k} = {fmt(self.per_class_ap[k])}")
        lines.append(f"num_gt = {self.num_gt}")
        lines.append(f"num_det = {self.num_det}")
        for s in SPEEDS:
            lines.append(f"num_gt_{s} = {self.gt_by_speed.get(s, 0)}")
        return "\n".join(lines) + "\n"


def average_precision(tp: np.ndarray, npos: int) -> float:
    """All-point interpolated AP from a score-sorted TP/FP indicator."""
    if npos == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _match(dets, gts, iou_thresh):
    """Greedy matching per class.

    Returns {class: list of (score, matched_gt_index or -1)} in descending
    score order, with ties broken by (frame, coordinates) so input order
    never matters.
    """
    gt_by_key = defaultdict(list)
    for gi, g in enumerate(gts):
        gt_by_key[(g.frame, g.class_id)].append(gi)
    flat = [(frame, d) for frame, boxes in dets.items() for d in boxes]
    flat.sort(key=lambda fd: (-fd[1].score, str(fd[0]), fd[1].rect))
    matched = set()
    result = defaultdict(list)
    for frame, d in flat:
        best, best_iou = -1, iou_thresh
        for gi in gt_by_key.get((frame, d.class_id), ()):
            if gi in matched:
                continue
            o = iou(d.rect, gts[gi].rect)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0:
            matched.add(best)
        result[d.class_id].append((d.score, best))
    return result


def evaluate_map(dets: dict, gts: Sequence[GroundTruthBox], iou_thresh: float = 0.5) -> EvalReport:
    """``dets`` maps frame id -> list of DetectionBox; ``gts`` is a flat list."""
    gts = list(gts)
    report = EvalReport(num_gt=len(gts), num_det=sum(len(v) for v in dets.values()))
    for s in SPEEDS:
        report.gt_by_speed[s] = sum(g.motion_speed == s for g in gts)
    if not gts:
        return report
    matches = _match(dets, gts, iou_thresh)
    classes = sorted({g.class_id for g in gts})

    def stratum_map(keep):
        aps = {}
        for k in classes:
            npos = sum(1 for g in gts if g.class_id == k and keep(g))
            if npos == 0:
                continue
            tp = []
            for _, gi in matches.get(k, []):
                if gi >= 0 and not keep(gts[gi]):
                    continue  # matched to a GT outside the stratum: ignored
                tp.append(1.0 if gi >= 0 else 0.0)
            aps[k] = average_precision(np.asarray(tp), npos)
        return aps

    report.per_class_ap = stratum_map(lambda g: True)
    report.mAP = float(np.mean(list(report.per_class_ap.values())))
    for s in SPEEDS:
        aps = stratum_map(lambda g, s=s: g.motion_speed == s)
        report.mAP_by_speed[s] = float(np.mean(list(aps.values()))) if aps else None
    return report


def label_motion_speed(gts: Sequence[GroundTruthBox], window: int = 10,
                       frame_order=None) -> list[GroundTruthBox]:
    """Label each box by the mean IoU with its own track within +-window frames.

    ``frame_order`` maps a frame id to an integer time index; by default the
    trailing integer of the id (``"clip:17"`` -> 17) is used.  Tracks are
    keyed by (clip prefix, track_id).
    """
    if frame_order is None:
        frame_order = _frame_time
    tracks = defaultdict(dict)
    for i, g in enumerate(gts):
        tracks[(_frame_clip(g.frame), g.track_id)][frame_order(g.frame)] = i
    out = list(gts)
    for members in tracks.values():
        for t, i in members.items():
            ious = [iou(gts[i].rect, gts[j].rect) for u, j in members.items()
                    if u != t and abs(u - t) <= window]
            if not ious:
                speed = "slow"
            else:
                m = float(np.mean(ious))
                speed = "slow" if m > 0.9 else ("medium" if m >= 0.7 else "fast")
            out[i] = replace(gts[i], motion_speed=speed)
    return out


def _frame_time(frame) -> int:
    return int(str(frame).rsplit(":", 1)[-1])


def _frame_clip(frame) -> str:
    parts = str(frame).rsplit(":", 1)
    return parts[0] if len(parts) == 2 else ""


# ---------------------------------------------------------------------------
# text files
# ---------------------------------------------------------------------------

def format_detections(dets: dict) -> str:
    lines = []
    for frame, boxes in dets.items():
        for d in boxes:
            lines.append(f"{frame} {d.class_id} {d.score:.4f} {d.x1:.4f} {d.y1:.4f} {d.x2:.4f} {d.y2:.4f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_detections(path, dets: dict) -> None:
    Path(path).write_text(format_detections(dets))


def read_detections(path) -> dict:
    dets = defaultdict(list)
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f, k, s, x1, y1, x2, y2 = line.split()
        dets[f].append(DetectionBox(int(k), float(s), float(x1), float(y1), float(x2), float(y2)))
    return dict(dets)


def format_ground_truth(gts: Iterable[GroundTruthBox]) -> str:
    lines = [f"{g.frame} {g.class_id} {g.x1:.4f} {g.y1:.4f} {g.x2:.4f} {g.y2:.4f} {g.track_id} {g.motion_speed}"
             for g in gts]
    return "\n".join(lines) + ("\n" if lines else "")


def write_ground_truth(path, gts: Iterable[GroundTruthBox]) -> None:
    Path(path).write_text(format_ground_truth(gts))


def read_ground_truth(path) -> list[GroundTruthBox]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        f, k, x1, y1, x2, y2 = parts[:6]
        track = int(parts[6]) if len(parts) > 6 else -1
        speed = parts[7] if len(parts) > 7 else "slow"
        out.append(GroundTruthBox(f, int(k), float(x1), float(y1), float(x2), float(y2), track, speed))
    return out
