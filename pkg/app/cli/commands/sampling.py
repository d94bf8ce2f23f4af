import argparse
import logging
from pathlib import Path
from typing import List

from app.cli.common import joined_line, value_line
from app.core.config import Settings
from app.services import io_service
from app.services.sampling_service import class_uniform_crops, mdmm, mdmm_sequence, rts_indices, stdn

logger = logging.getLogger(__name__)

DEFAULT_STDN_WINDOW = 16


def sample_rts(args: argparse.Namespace, settings: Settings) -> List[str]:
    return [joined_line("indices", rts_indices(args.frames, args.length, args.max_stride, settings.SEED))]


def class_crops(args: argparse.Namespace, settings: Settings) -> List[str]:
    labels = [io_service.read_labels(path) for path in args.labels]
    plan = class_uniform_crops(labels, args.crop, args.classes, args.count, settings.SEED)
    io_service.write_crops(args.out, plan)
    for note in plan.diagnostics:
        logger.warning(note)
    return [
        value_line("crops", len(plan.crops)),
        value_line("centroid_crops", sum(c.class_id is not None for c in plan.crops)),
    ]


def normalize_depth(args: argparse.Namespace, settings: Settings) -> List[str]:
    clip, names = io_service.read_depth_clip(args.input)
    out = stdn(clip, args.window)
    io_service.write_depth_clip(args.out, out, names)
    return [value_line("frames", len(out)), value_line("windows", -(-len(out) // args.window))]


def motion_map(args: argparse.Namespace, settings: Settings) -> List[str]:
    clip, _ = io_service.read_depth_clip(args.input)
    if args.per_clip:
        maps = mdmm_sequence(clip, args.length)
        stem = Path(args.out)
        for k, m in enumerate(maps):
            io_service.write_matrix(stem.with_name(f"{stem.stem}_{k}{stem.suffix}"), m)
        return [value_line("clips", len(maps))]
    m = mdmm(clip, args.start, args.length)
    io_service.write_matrix(args.out, m)
    return [value_line("energy", float(m.sum()))]


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("sample-rts", help="random temporal skipping frame indices")
    p.add_argument("--frames", required=True, type=int, help="clip length T")
    p.add_argument("--length", required=True, type=int, help="number of strides N")
    p.add_argument("--max-stride", required=True, type=int)
    p.set_defaults(handler=sample_rts)

    p = sub.add_parser("class-crops", help="class-uniform crop rectangles")
    p.add_argument("--labels", required=True, nargs="+")
    p.add_argument("--crop", required=True, type=int)
    p.add_argument("--classes", required=True, type=int)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=class_crops)

    p = sub.add_parser("stdn", help="spatio-temporal depth normalization of a frame directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=DEFAULT_STDN_WINDOW)
    p.set_defaults(handler=normalize_depth)

    p = sub.add_parser("mdmm", help="modified depth motion map")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--length", required=True, type=int, help="number of difference terms N")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--per-clip", action="store_true", help="one map per consecutive clip, written as <out>_<k>")
    p.set_defaults(handler=motion_map)
