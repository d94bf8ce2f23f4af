"""Flow-side subcommands: warping, losses, occlusion, solving, metrics and rasters."""

import argparse
import logging
from typing import List

import numpy as np

from app.cli.common import report_lines, value_line
from app.core.config import Settings
from app.schemas.fields import FlowField
from app.services import io_service
from app.services.loss_service import (
    SSIM_PATCH,
    census_distance,
    epe,
    fl_outliers,
    guided_loss,
    multiscale_loss,
    pixel_loss,
    pixel_loss_map,
    scale_loss,
    smoothness_loss,
    ssim_loss,
)
from app.services.occlusion_service import occlusion_aware_loss, occlusion_masks
from app.services.solver_service import FlowSolver
from app.services.visualization_service import flow_to_ppm_samples, normalized_flow_samples
from app.services.warp_service import image_to_gray, inverse_warp

logger = logging.getLogger(__name__)


def _valid_mask(path):
    # Evaluation masks use the occlusion raster convention: 255 marks an excluded pixel
    if path is None:
        return None
    return io_service.read_mask(path).flags == 0


# ============================================
# Handlers
# ============================================

def warp(args: argparse.Namespace, settings: Settings) -> List[str]:
    target = io_service.read_image(args.image)
    flow = io_service.read_flo(args.flow)
    out = inverse_warp(target, flow)
    io_service.write_image(args.out, out)
    lines = [value_line("height", out.height), value_line("width", out.width)]
    if args.reference:
        reference = io_service.read_image(args.reference)
        lines.append(value_line("mae", float(np.abs(reference.data - out.data).mean())))
    return lines


def loss(args: argparse.Namespace, settings: Settings) -> List[str]:
    I1 = io_service.read_image(args.i1)
    I2 = io_service.read_image(args.i2)
    flow = io_service.read_flo(args.flow)
    w = settings.loss_weights()

    if args.multiscale:
        lines = report_lines(multiscale_loss(I1, I2, flow, w, settings.SMOOTH_ORDER, use_ssim=not args.no_ssim))
    else:
        pix, _ = pixel_loss(I1, I2, flow, w)
        smooth, _ = smoothness_loss(flow, w, settings.SMOOTH_ORDER)
        sim = 0.0
        if not args.no_ssim and min(I1.shape) >= SSIM_PATCH:
            sim, _ = ssim_loss(I1, inverse_warp(I2, flow))
        lines = report_lines(scale_loss(pix, smooth, sim, w))

    if args.census:
        rec = inverse_warp(I2, flow)
        value = census_distance(image_to_gray(I1), image_to_gray(rec), settings.CENSUS_WINDOW, settings.CENSUS_THRESHOLD)
        lines.append(value_line("census", value))
    if args.guided_gt:
        proxy = io_service.read_flo(args.guided_gt)
        lines.extend(report_lines(guided_loss(flow, proxy, I1, I2, settings.GUIDANCE_LAMBDA, w), prefix="guided_"))
    return lines


def occlusion(args: argparse.Namespace, settings: Settings) -> List[str]:
    Mf = io_service.read_flo(args.forward)
    Mb = io_service.read_flo(args.backward)
    of, ob = occlusion_masks(Mf, Mb, settings.OCCLUSION_ALPHA1, settings.OCCLUSION_ALPHA2)
    io_service.write_mask(f"{args.out_prefix}_forward.pgm", of)
    io_service.write_mask(f"{args.out_prefix}_backward.pgm", ob)
    lines = [value_line("occluded_forward", of.occluded_fraction), value_line("occluded_backward", ob.occluded_fraction)]

    if args.i1 and args.i2:
        I1 = io_service.read_image(args.i1)
        I2 = io_service.read_image(args.i2)
        w = settings.loss_weights()
        report = occlusion_aware_loss(pixel_loss_map(I1, I2, Mf, w), pixel_loss_map(I2, I1, Mb, w), of, ob)
        lines.extend(report_lines(report))
    return lines


def solve(args: argparse.Namespace, settings: Settings) -> List[str]:
    I1 = io_service.read_image(args.i1)
    I2 = io_service.read_image(args.i2)
    gt = io_service.read_flo(args.gt) if args.gt else None
    cfg = settings.solver_config()
    bidirectional = cfg.bidirectional or args.bidirectional or bool(args.backward_out or args.mask_prefix)

    solver = FlowSolver(cfg)
    result = solver.solve_bidirectional(I1, I2, gt) if bidirectional else solver.solve(I1, I2, gt)
    io_service.write_flo(result.flow, args.out)
    if args.trace:
        io_service.write_trace(args.trace, result.loss_trace)

    lines = report_lines(result.loss_trace[-1])
    lines.append(value_line("iterations", len(result.loss_trace) - 1))
    if result.backward_flow is not None and args.backward_out:
        io_service.write_flo(result.backward_flow, args.backward_out)
    if result.masks is not None:
        of, ob = result.masks
        lines.append(value_line("occluded_forward", of.occluded_fraction))
        lines.append(value_line("occluded_backward", ob.occluded_fraction))
        if args.mask_prefix:
            io_service.write_mask(f"{args.mask_prefix}_forward.pgm", of)
            io_service.write_mask(f"{args.mask_prefix}_backward.pgm", ob)
    if result.epe is not None:
        lines.append(value_line("epe", result.epe))
    return lines


def endpoint_error(args: argparse.Namespace, settings: Settings) -> List[str]:
    flow = io_service.read_flo(args.flow)
    gt = io_service.read_flo(args.gt)
    return [value_line("epe", epe(flow, gt, _valid_mask(args.exclude)))]


def outliers(args: argparse.Namespace, settings: Settings) -> List[str]:
    flow = io_service.read_flo(args.flow)
    gt = io_service.read_flo(args.gt)
    return [value_line("fl", fl_outliers(flow, gt, _valid_mask(args.exclude)))]


def flow2ppm(args: argparse.Namespace, settings: Settings) -> List[str]:
    flow = io_service.read_flo(args.flow)
    io_service.write_pnm(args.out, flow_to_ppm_samples(flow, args.max_mag))
    return [value_line("max_magnitude", float(np.hypot(flow.u, flow.v).max()))]


def flownorm(args: argparse.Namespace, settings: Settings) -> List[str]:
    flow: FlowField = io_service.read_flo(args.flow)
    cap = args.cap if args.cap is not None else settings.FLOW_CAP
    io_service.write_pnm(args.out, normalized_flow_samples(flow, cap))
    clipped = float(((np.abs(flow.u) > cap) | (np.abs(flow.v) > cap)).mean())
    return [value_line("clipped_fraction", clipped)]


# ============================================
# Registration
# ============================================

def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("warp", help="inverse-warp an image by a flow field")
    p.add_argument("--image", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="image to compare the warped result against")
    p.set_defaults(handler=warp)

    p = sub.add_parser("loss", help="evaluate the photometric objective of a flow")
    p.add_argument("--i1", required=True)
    p.add_argument("--i2", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--multiscale", action="store_true", help="evaluate on the per-scale pyramid")
    p.add_argument("--no-ssim", action="store_true")
    p.add_argument("--census", action="store_true", help="also report the ternary census distance")
    p.add_argument("--guided-gt", help="proxy ground-truth flow for the guided loss")
    p.set_defaults(handler=loss)

    p = sub.add_parser("occlusion", help="forward-backward occlusion masks")
    p.add_argument("--forward", required=True)
    p.add_argument("--backward", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--i1")
    p.add_argument("--i2")
    p.set_defaults(handler=occlusion)

    p = sub.add_parser("solve", help="estimate flow with the coarse-to-fine solver")
    p.add_argument("--i1", required=True)
    p.add_argument("--i2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="CSV loss trace of the finest level")
    p.add_argument("--gt", help="ground-truth flow; prints epe")
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--backward-out")
    p.add_argument("--mask-prefix")
    p.set_defaults(handler=solve)

    for name, handler, metric in (("epe", endpoint_error, "mean endpoint error"), ("fl", outliers, "outlier fraction")):
        p = sub.add_parser(name, help=metric)
        p.add_argument("--flow", required=True)
        p.add_argument("--gt", required=True)
        p.add_argument("--exclude", help="PGM mask, 255 = pixel excluded from evaluation")
        p.set_defaults(handler=handler)

    p = sub.add_parser("flow2ppm", help="color-coded flow visualization")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-mag", type=float)
    p.set_defaults(handler=flow2ppm)

    p = sub.add_parser("flownorm", help="flow quantized to 8 bits per component")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=float)
    p.set_defaults(handler=flownorm)
