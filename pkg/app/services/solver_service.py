import logging
from typing import List, Optional, Tuple

import numpy as np

from app.core.errors import InvalidArgumentError, NumericError, require_same_shape
from app.schemas.fields import FlowField, Image
from app.schemas.losses import LossReport
from app.schemas.solver import MIN_LEVEL_SIZE, SolverConfig, SolveResult
from app.services.loss_service import (
    SSIM_PATCH,
    epe,
    pixel_loss,
    scale_loss,
    smoothness_loss,
    ssim_loss_flow_gradient,
)
from app.services.occlusion_service import occlusion_masks
from app.services.warp_service import downsample_image, level_shape, upsample_flow

logger = logging.getLogger(__name__)


class FlowSolver:
    """
    Coarse-to-fine variational flow estimator.

    Minimizes lambda1 * L_pixel + lambda2 * L_smooth (+ lambda3 * L_ssim)
    directly over a per-pixel flow field with gradient descent and a
    backtracking line search, starting from zero flow on the coarsest level.
    Each accepted step strictly lowers the objective, so every level's trace
    is monotone.
    """

    def __init__(self, cfg: Optional[SolverConfig] = None):
        self.cfg = cfg or SolverConfig()

    # ----------------------------------------
    # Objective
    # ----------------------------------------

    def _objective(
        self,
        I1: Image,
        I2: Image,
        flow: FlowField,
        mask: Optional[np.ndarray] = None,
    ) -> Tuple[LossReport, np.ndarray]:
        w = self.cfg.weights
        pix, g_pix = pixel_loss(I1, I2, flow, w, mask)
        smooth, g_smooth = smoothness_loss(flow, w, self.cfg.smooth_order)
        grad = w.lambda1 * g_pix.as_array() + w.lambda2 * g_smooth.as_array()

        sim = 0.0
        if self.cfg.use_ssim and min(I1.shape) >= SSIM_PATCH:
            sim, g_sim = ssim_loss_flow_gradient(I1, I2, flow)
            grad = grad + w.lambda3 * g_sim.as_array()

        if not (np.all(np.isfinite([pix, smooth, sim])) and np.all(np.isfinite(grad))):
            raise NumericError(
                f"objective became non-finite at {flow.height}x{flow.width}: pixel={pix}, smooth={smooth}, ssim={sim}"
            )
        return scale_loss(pix, smooth, sim, w), grad

    def _descend(
        self,
        I1: Image,
        I2: Image,
        flow: FlowField,
        iterations: int,
        mask: Optional[np.ndarray] = None,
    ) -> Tuple[FlowField, List[LossReport]]:
        report, grad = self._objective(I1, I2, flow, mask)
        trace = [report]
        # Objectives are pixel means, so scale the step by the pixel count
        step = self.cfg.step * flow.u.size

        for _ in range(iterations):
            if not np.any(grad):
                break
            accepted = None
            for _ in range(self.cfg.max_halvings + 1):
                uv = flow.as_array() - step * grad
                if not np.all(np.isfinite(uv)):
                    step *= 0.5
                    continue
                trial = FlowField.from_array(uv)
                trial_report, trial_grad = self._objective(I1, I2, trial, mask)
                if trial_report.total < report.total:
                    accepted = (trial, trial_report, trial_grad)
                    break
                step *= 0.5
            if accepted is None:
                break
            flow, report, grad = accepted
            trace.append(report)
            step *= 2.0
        return flow, trace

    # ----------------------------------------
    # Pyramid
    # ----------------------------------------

    def _pyramid(self, I1: Image, I2: Image) -> List[Tuple[Image, Image]]:
        levels = [(I1, I2)]
        while len(levels) < self.cfg.pyramid_levels:
            next_shape = level_shape(levels[-1][0].shape, self.cfg.scale_factor)
            if min(next_shape) < MIN_LEVEL_SIZE:
                break
            a, b = levels[-1]
            levels.append((downsample_image(a, self.cfg.scale_factor), downsample_image(b, self.cfg.scale_factor)))
        return levels

    def _check_inputs(self, I1: Image, I2: Image) -> None:
        require_same_shape("I1", I1.data.shape, "I2", I2.data.shape)
        if min(I1.shape) < MIN_LEVEL_SIZE:
            raise InvalidArgumentError(f"images must be at least {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}, got {I1.height}x{I1.width}")

    def solve(self, I1: Image, I2: Image, gt: Optional[FlowField] = None) -> SolveResult:
        """Estimate the flow that warps I2 back onto I1."""
        self._check_inputs(I1, I2)
        pyramid = self._pyramid(I1, I2)
        logger.info(f"Solving {I1.height}x{I1.width} flow on {len(pyramid)} levels (seed {self.cfg.seed})")

        flow = FlowField.zeros(*pyramid[-1][0].shape)
        level_traces = []
        for depth, (a, b) in reversed(list(enumerate(pyramid))):
            flow = upsample_flow(flow, *a.shape)
            flow, trace = self._descend(a, b, flow, self.cfg.iters_per_level)
            level_traces.append(trace)
            logger.info(
                f"Level {depth} ({a.height}x{a.width}): {len(trace) - 1} steps, "
                f"loss {trace[0].total:.6g} -> {trace[-1].total:.6g}"
            )

        error = epe(flow, gt) if gt is not None else None
        return SolveResult(flow=flow, loss_trace=level_traces[-1], level_traces=level_traces, epe=error)

    def solve_bidirectional(self, I1: Image, I2: Image, gt: Optional[FlowField] = None) -> SolveResult:
        """
        Forward and backward flows with forward-backward occlusion masks. With
        occlusion_second_pass, both flows are refined at full resolution with
        the data term restricted to visible pixels, while smoothness stays
        unmasked and fills in the occluded regions.
        """
        forward = self.solve(I1, I2)
        backward = self.solve(I2, I1)
        a1, a2 = self.cfg.occlusion_alpha1, self.cfg.occlusion_alpha2
        of, ob = occlusion_masks(forward.flow, backward.flow, a1, a2)
        logger.info(f"Occlusion: {of.occluded_fraction:.1%} forward, {ob.occluded_fraction:.1%} backward")

        flow_f, flow_b = forward.flow, backward.flow
        trace = forward.loss_trace
        level_traces = list(forward.level_traces)
        if self.cfg.occlusion_second_pass:
            flow_f, trace = self._descend(I1, I2, flow_f, self.cfg.iters_per_level, mask=1.0 - of.flags)
            flow_b, _ = self._descend(I2, I1, flow_b, self.cfg.iters_per_level, mask=1.0 - ob.flags)
            level_traces.append(trace)
            of, ob = occlusion_masks(flow_f, flow_b, a1, a2)
            logger.info(f"Second pass: {of.occluded_fraction:.1%} forward, {ob.occluded_fraction:.1%} backward occluded")

        error = epe(flow_f, gt) if gt is not None else None
        return SolveResult(
            flow=flow_f,
            loss_trace=trace,
            level_traces=level_traces,
            epe=error,
            backward_flow=flow_b,
            masks=(of, ob),
        )


def solve_flow(I1: Image, I2: Image, cfg: Optional[SolverConfig] = None, gt: Optional[FlowField] = None) -> SolveResult:
    return FlowSolver(cfg).solve(I1, I2, gt)


def solve_bidirectional(I1: Image, I2: Image, cfg: Optional[SolverConfig] = None, gt: Optional[FlowField] = None) -> SolveResult:
    return FlowSolver(cfg).solve_bidirectional(I1, I2, gt)
