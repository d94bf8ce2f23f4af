import argparse
import logging
from typing import List

import numpy as np

from app.cli.common import value_line
from app.core.config import Settings
from app.schemas.fields import VOID
from app.services import io_service
from app.services.propagation_service import (
    boundary_mask,
    cross_entropy_map,
    miou,
    propagate_sequence,
    relaxed_loss,
)

logger = logging.getLogger(__name__)


def propagate(args: argparse.Namespace, settings: Settings) -> List[str]:
    """Chain joint image-label propagation over the given flows, one output pair per step."""
    img = io_service.read_image(args.image)
    labels = io_service.read_labels(args.labels)
    flows = [io_service.read_flo(path) for path in args.flow]
    extension = "pgm" if img.channels == 1 else "ppm"

    lines = []
    for step, (frame, warped) in enumerate(propagate_sequence(img, labels, flows), start=1):
        io_service.write_image(f"{args.out_prefix}_{step}.{extension}", frame)
        io_service.write_labels(f"{args.out_prefix}_{step}_labels.pgm", warped)
        lines.append(value_line(f"void_fraction_{step}", float((warped.ids == VOID).mean())))
    return lines


def mean_iou(args: argparse.Namespace, settings: Settings) -> List[str]:
    pred = io_service.read_labels(args.pred)
    gt = io_service.read_labels(args.gt)
    per_class, mean = miou(pred, gt, args.classes)
    lines = [value_line(f"iou_{c}", v) for c, v in enumerate(per_class) if v is not None]
    lines.append(value_line("miou", mean))
    return lines


def relax_loss(args: argparse.Namespace, settings: Settings) -> List[str]:
    logits = io_service.read_logits(args.logits)
    labels = io_service.read_labels(args.labels)
    window = args.window or settings.RELAX_WINDOW
    value, _ = relaxed_loss(logits, labels, window)
    standard = cross_entropy_map(logits, labels)
    boundary = boundary_mask(labels, window)
    return [
        value_line("relaxed", value),
        value_line("cross_entropy", float(np.nanmean(standard))),
        value_line("boundary_fraction", float(boundary[labels.valid].mean())),
    ]


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("propagate", help="synthesize frame/label pairs by joint propagation")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--flow", required=True, nargs="+", help="successive flows, one per propagation step")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(handler=propagate)

    p = sub.add_parser("miou", help="per-class IoU and mean IoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", required=True, type=int)
    p.set_defaults(handler=mean_iou)

    p = sub.add_parser("relax-loss", help="boundary label relaxation loss")
    p.add_argument("--logits", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--window", type=int)
    p.set_defaults(handler=relax_loss)
