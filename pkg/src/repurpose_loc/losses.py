"""Training objective: focal, KL-alignment and 1-D GIoU terms.

Every term is averaged over the valid segments of each video and then over
the videos of a batch, so long and short videos weigh the same. Inputs may
be ``[T]`` (one video) or ``[B, T]`` with a boolean ``mask``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .core import ReproError


class LengthMismatch(ReproError, ValueError):
    pass


class NonFiniteLoss(ReproError, FloatingPointError):
    pass


@dataclass
class LossWeights:
    uni_focal: float = 0.1
    mul_focal: float = 0.3
    alignment: float = 0.1
    iou: float = 0.7

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


def _check(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t is not None and t.shape != shape:
            raise LengthMismatch(f"shape {tuple(t.shape)} does not match {tuple(shape)}")


def video_mean(values: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over segments per video, then over videos. Empty videos count as 0."""
    if values.dim() == 1:
        values = values[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones_like(values, dtype=torch.bool)
    mask_f = mask.to(values.dtype)
    summed = torch.where(mask, values, torch.zeros_like(values)).sum(dim=1)
    count = mask_f.sum(dim=1)
    per_video = summed / count.clamp(min=1.0)
    return per_video.mean()


def focal_elementwise(probs: torch.Tensor, targets: torch.Tensor, params: FocalParams) -> torch.Tensor:
    p = probs.clamp(params.epsilon, 1 - params.epsilon)
    targets = targets.to(p.dtype)
    pos = -params.alpha * (1 - p) ** params.gamma * torch.log(p)
    neg = -(1 - params.alpha) * p ** params.gamma * torch.log1p(-p)
    return targets * pos + (1 - targets) * neg


def focal_loss(probs, targets, params: FocalParams | None = None, mask=None) -> torch.Tensor:
    params = params or FocalParams()
    _check(probs, targets, mask)
    return video_mean(focal_elementwise(probs, targets, params), mask)


def uni_focal(output, targets, params: FocalParams | None = None, mask=None) -> torch.Tensor:
    """Focal loss of the visual and audio branches against the segment labels."""
    total = output.prob_fused.new_zeros(())
    for probs in (output.prob_visual, output.prob_audio):
        if probs is not None:
            total = total + focal_loss(probs, targets.class_label, params, mask)
    return total


def kl_alignment(branch_probs, fused_probs, epsilon: float = 1e-7, mask=None, detach_target: bool = False) -> torch.Tensor:
    """Bernoulli KL(branch || fused) per segment."""
    _check(branch_probs, fused_probs, mask)
    p = branch_probs.clamp(epsilon, 1 - epsilon)
    q = fused_probs.clamp(epsilon, 1 - epsilon)
    if detach_target:
        q = q.detach()
    kl = p * (torch.log(p) - torch.log(q)) + (1 - p) * (torch.log1p(-p) - torch.log1p(-q))
    return video_mean(kl, mask)


def giou_1d_tensor(lo_a, hi_a, lo_b, hi_b) -> torch.Tensor:
    inter = (torch.minimum(hi_a, hi_b) - torch.maximum(lo_a, lo_b)).clamp(min=0)
    union = (hi_a - lo_a) + (hi_b - lo_b) - inter
    hull = torch.maximum(hi_a, hi_b) - torch.minimum(lo_a, lo_b)
    return inter / union - (hull - union) / hull


def iou_regression_loss(
    pred_start,
    pred_end,
    targets,
    segment_length: float = 1.0,
    mask=None,
    *,
    tau=None,
    min_length: float = 1e-4,
) -> torch.Tensor:
    """Mean ``1 - GIoU`` between predicted and true clips over positive segments.

    Intervals are ``[tau - start, tau + end]``; ``tau`` defaults to segment
    centers. Predicted intervals shorter than ``min_length`` are widened on
    the end side.
    """
    _check(pred_start, pred_end, targets.start_offset, mask)
    if tau is None:
        n = pred_start.shape[-1]
        tau = (torch.arange(n, dtype=pred_start.dtype) + 0.5) * segment_length
        tau = tau.expand_as(pred_start)
    valid = targets.valid_regression.bool()
    if mask is not None:
        valid = valid & mask
    lo_p = tau - pred_start
    hi_p = torch.maximum(tau + pred_end, lo_p + min_length)
    lo_g = tau - targets.start_offset.to(pred_start.dtype)
    hi_g = tau + targets.end_offset.to(pred_start.dtype)
    # keep padded / negative rows well-defined so gradients stay finite
    safe = valid.to(pred_start.dtype)
    hi_g = torch.where(valid, hi_g, lo_g + 1.0)
    loss = 1 - giou_1d_tensor(lo_p, hi_p, lo_g, hi_g)
    return video_mean(loss * safe, valid)


@dataclass
class LossOptions:
    uni_focal_on: bool = True
    alignment_on: bool = True
    detach_fused_target: bool = False


def total_loss(
    output,
    targets,
    weights: LossWeights | None = None,
    focal: FocalParams | None = None,
    *,
    options: LossOptions | None = None,
    segment_length: float = 1.0,
    mask=None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the four terms plus a float breakdown for logging.

    Terms whose weight is zero (or that are switched off) are left out of the
    graph entirely, so the heads they feed receive no gradient from them.
    """
    weights = weights or LossWeights()
    focal = focal or FocalParams()
    options = options or LossOptions()
    if mask is None:
        mask = getattr(output, "mask", None)

    terms = {}
    use_uni = options.uni_focal_on and weights.uni_focal > 0
    use_kl = options.alignment_on and weights.alignment > 0
    terms["uni_focal"] = uni_focal(output, targets, focal, mask) if use_uni else None
    terms["mul_focal"] = focal_loss(output.prob_fused, targets.class_label, focal, mask) if weights.mul_focal > 0 else None
    if use_kl:
        kl = output.prob_fused.new_zeros(())
        for probs in (output.prob_visual, output.prob_audio):
            if probs is not None:
                kl = kl + kl_alignment(probs, output.prob_fused, focal.epsilon, mask, options.detach_fused_target)
        terms["kl"] = kl
    else:
        terms["kl"] = None
    terms["iou"] = (
        iou_regression_loss(output.start_offset, output.end_offset, targets, segment_length, mask)
        if weights.iou > 0
        else None
    )
    lam = {"uni_focal": weights.uni_focal, "mul_focal": weights.mul_focal, "kl": weights.alignment, "iou": weights.iou}
    total = output.prob_fused.new_zeros(())
    for k, v in terms.items():
        if v is not None:
            total = total + lam[k] * v
    breakdown = {k: (float(v.detach()) if v is not None else 0.0) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown


__all__ = [
    "FocalParams",
    "LengthMismatch",
    "LossOptions",
    "LossWeights",
    "NonFiniteLoss",
    "focal_elementwise",
    "focal_loss",
    "giou_1d_tensor",
    "iou_regression_loss",
    "kl_alignment",
    "total_loss",
    "uni_focal",
    "video_mean",
]
