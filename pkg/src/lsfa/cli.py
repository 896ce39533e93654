"""Command-line entry point: ``lsfa <subcommand> ...``.

Settings come from built-in defaults, then an optional INI file (``--config``;
sections ``[lsfa]`` for the pipeline and ``[dataset]`` for the generator),
then command-line options, which win.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .compressed_stream import CodecParams, encode_stream, read_container, stream_frames, write_container
from .detection import (evaluate_map, label_motion_speed, read_detections, read_ground_truth,
                        write_detections)
from .networks import NetworkSpec, load_weights, save_weights
from .pipeline.config import ABLATION_COLUMNS, SECTION, PipelineConfig, config_from_mapping
from .pipeline.dataset import (SyntheticDatasetSpec, generate_synthetic_dataset, load_clips,
                               load_dataset, save_dataset)
from .pipeline.harness import format_ablation, profile, run_ablation, speed_vs_gop_length
from .pipeline.inference import detections_by_frame, run_inference
from .pipeline.training import train
from .pipeline.viz import export_feature_viz

DATASET_SECTION = "dataset"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _add_dataclass_options(parser, cls, skip=()):
    """One ``--field-name`` option per dataclass field, defaulting to None so
    unset options never override the config file."""
    group = parser.add_argument_group(cls.__name__)
    for f in fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool}.get(f.type, str)
        if typ is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=f.name, type=typ, default=None)


def _read_ini(path):
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    return cp


def _pipeline_config(args, require_seed=False) -> PipelineConfig:
    cp = _read_ini(args.config)
    values = dict(cp[SECTION]) if SECTION in cp else {}
    names = {f.name for f in fields(PipelineConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names and v is not None})
    if require_seed and "seed" not in values:
        raise CliError("a seed is required: pass --seed or set seed in the config file")
    return config_from_mapping(values)


def _dataset_spec(args) -> SyntheticDatasetSpec:
    cp = _read_ini(args.config)
    values = dict(cp[DATASET_SECTION]) if DATASET_SECTION in cp else {}
    if "seed" not in values and SECTION in cp and "seed" in cp[SECTION]:
        values["seed"] = cp[SECTION]["seed"]
    known = {f.name: f.type for f in fields(SyntheticDatasetSpec)}
    unknown = set(values) - set(known)
    if unknown:
        raise CliError(f"unknown [{DATASET_SECTION}] keys: {sorted(unknown)}")
    kw = {}
    for k, v in values.items():
        kw[k] = int(v) if known[k] in (int, "int") else float(v)
    kw.update({k: v for k, v in vars(args).items() if k in known and v is not None})
    if "seed" not in kw:
        raise CliError("a seed is required: pass --seed or set seed in the config file")
    return SyntheticDatasetSpec(**kw)


def _int_list(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _clip_id(path: Path) -> str:
    stem = path.stem
    tail = stem.rsplit("_", 1)[-1]
    return str(int(tail)) if tail.isdigit() else stem


def _streams(paths):
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(load_clips(p))
        else:
            out.append((_clip_id(p), read_container(p)))
    if not out:
        raise CliError("no containers found")
    return out


def _load_raw_frames(path) -> np.ndarray:
    """Frames as uint8 (N, 3, H, W) from a .npy array or a directory of images."""
    p = Path(path)
    if p.is_dir():
        from PIL import Image
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".bmp", ".ppm", ".jpg", ".jpeg"))
        if not files:
            raise CliError(f"no image files in {p}")
        arr = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    else:
        arr = np.load(p)
    if arr.ndim != 4:
        raise CliError(f"expected a 4-d frame array, got shape {arr.shape}")
    if arr.shape[-1] == 3 and arr.shape[1] != 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0 if arr.max() <= 1.0 else arr), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    spec = _dataset_spec(args)
    cfg = _pipeline_config(args)
    ds = generate_synthetic_dataset(spec, clip_offset=args.clip_offset)
    paths = save_dataset(ds, args.out, cfg.gop_length)
    print(f"wrote {len(paths)} clips and {len(ds.all_gts())} boxes to {args.out}")


def cmd_encode(args):
    frames = _load_raw_frames(args.frames)
    cfg = _pipeline_config(args)
    params = CodecParams(args.macroblock, args.search_radius, cfg.gop_length)
    gops = encode_stream(list(frames), params)
    write_container(args.out, gops)
    print(f"encoded {len(frames)} frames into {len(gops)} GOPs: {args.out}")


def cmd_train(args):
    cfg = _pipeline_config(args, require_seed=True)
    ds = load_dataset(args.data)
    w = train(ds, cfg, NetworkSpec(), log_every=args.log_every)
    save_weights(w, args.out)
    print(f"saved weights to {args.out}")


def cmd_detect(args):
    cfg = _pipeline_config(args)
    w = load_weights(args.weights)
    dets, results = {}, []
    for clip_id, gops in _streams(args.stream):
        res = run_inference(gops, w, cfg)
        dets.update(detections_by_frame(res, clip_id))
        results.append(res)
    write_detections(args.out, dets)
    if args.timing:
        Path(args.timing).write_text(profile(results).to_text())
    print(f"wrote {sum(len(v) for v in dets.values())} detections for {len(dets)} frames to {args.out}")


def cmd_eval(args):
    dets = read_detections(args.dets)
    gts = read_ground_truth(args.gt)
    if args.relabel_speed:
        gts = label_motion_speed(gts)
    text = evaluate_map(dets, gts, args.iou).to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_ablate(args):
    cfg = _pipeline_config(args, require_seed=True)
    columns = [c.strip() for c in args.columns.split(",") if c.strip()]
    val = load_dataset(args.val)
    weights = None
    if args.weights_dir and all((Path(args.weights_dir) / f"column_{c}.lsfw").exists() for c in columns):
        weights = {c: load_weights(Path(args.weights_dir) / f"column_{c}.lsfw") for c in columns}
    train_set = load_dataset(args.train) if weights is None and args.train else None
    if weights is None and train_set is None:
        raise CliError("need --train data or a complete --weights-dir")
    if weights is None:
        weights = {c: train(train_set, cfg.with_flags(**ABLATION_COLUMNS[c]), log_every=args.log_every)
                   for c in columns}
        if args.weights_dir:
            Path(args.weights_dir).mkdir(parents=True, exist_ok=True)
            for c, w in weights.items():
                save_weights(w, Path(args.weights_dir) / f"column_{c}.lsfw")
    rows = run_ablation(None, val, cfg, columns, weights=weights)
    text = format_ablation(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_profile(args):
    cfg = _pipeline_config(args)
    w = load_weights(args.weights)
    (_, gops), = _streams([args.stream])[:1]
    frames = [f.pixels for f in stream_frames(gops)]
    gops = encode_stream(frames, CodecParams(gop_length=cfg.gop_length))
    run_inference(gops[:1], w, cfg)
    report = profile(run_inference(gops, w, cfg))
    if args.lengths:
        report.speed_vs_L = speed_vs_gop_length(frames, w, cfg, _int_list(args.lengths), repeats=args.repeats)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_viz(args):
    cfg = _pipeline_config(args)
    w = load_weights(args.weights)
    (_, gops), = _streams([args.stream])[:1]
    res = run_inference(gops, w, cfg, keep_features=True)
    if not 0 <= args.frame < len(res.features):
        raise CliError(f"frame {args.frame} outside [0, {len(res.features) - 1}]")
    paths = export_feature_viz(res.features[args.frame], _int_list(args.channels), args.out,
                               scale=args.scale, prefix=f"frame{args.frame:04d}_channel")
    for p in paths:
        print(p)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsfa", description="Compressed-video feature aggregation detector")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with [lsfa] / [dataset] sections")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        p.set_defaults(func=fn)
        return p

    p = add("gen", cmd_gen, "render a synthetic dataset to containers + gt.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--clip-offset", type=int, default=0)
    _add_dataclass_options(p, SyntheticDatasetSpec)
    p.add_argument("--gop-length", dest="gop_length", type=int, default=None)

    p = add("encode", cmd_encode, "encode raw frames (.npy or image directory) into a container")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--macroblock", type=int, default=16)
    p.add_argument("--search-radius", type=int, default=8)
    p.add_argument("--gop-length", dest="gop_length", type=int, default=None)

    p = add("train", cmd_train, "train all networks on a generated dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=100)
    _add_dataclass_options(p, PipelineConfig)

    p = add("detect", cmd_detect, "run online detection over containers")
    p.add_argument("--stream", required=True, nargs="+", help="container files or dataset directories")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", help="write the timing report here")
    _add_dataclass_options(p, PipelineConfig)

    p = add("eval", cmd_eval, "score a detections file against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--relabel-speed", action="store_true", help="recompute speed strata from track ids")
    p.add_argument("--out")

    p = add("ablate", cmd_ablate, "train and score each ablation column")
    p.add_argument("--train")
    p.add_argument("--val", required=True)
    p.add_argument("--columns", default="a,c,d,e,g")
    p.add_argument("--weights-dir", help="reuse column_<c>.lsfw files here, or save them after training")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out")
    _add_dataclass_options(p, PipelineConfig)

    p = add("profile", cmd_profile, "per-component timing and the speed-vs-L sweep")
    p.add_argument("--stream", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--lengths", default="2,4,8,12,24")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    _add_dataclass_options(p, PipelineConfig)

    p = add("viz", cmd_viz, "dump feature channels of one frame as PNGs")
    p.add_argument("--stream", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--channels", default="0,1,2,3")
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_dataclass_options(p, PipelineConfig)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, IndexError, OSError) as exc:
        print(f"lsfa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
