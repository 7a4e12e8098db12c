"""Scalar objectives: end-point error, disparity L1, joint loss and adversarial terms.

Tensor arguments are laid out channel-first: flow ``(..., 2, H, W)``,
disparity ``(..., H, W)`` or ``(..., 1, H, W)``, scene flow ``(..., 4, H, W)``.
Domain objects (FlowField, Image2D, SceneFlowField) are accepted too.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ShapeError
from .types import DISP_T, DISP_T1, FLOW_SLICE, FlowField, Image2D, SceneFlowField, pack_target

EPS = 1e-7
REDUCTIONS = ("mean", "sum")
GAN_MODES = ("vanilla", "wasserstein")


def _tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, FlowField):
        x = x.as_array()
    elif isinstance(x, Image2D):
        x = x.data
    elif isinstance(x, SceneFlowField):
        x = pack_target(x)
    return torch.tensor(np.asarray(x), dtype=dtype)


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def _check_same(pred, gt, what):
    if pred.shape != gt.shape:
        raise ShapeError(f"{what}: prediction shape {tuple(pred.shape)} != ground truth {tuple(gt.shape)}")


def _safe_norm(dx, dy):
    # sqrt with gradient 0 at the origin instead of NaN
    sq = dx * dx + dy * dy
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def epe(pred, gt, reduction: str = "mean") -> torch.Tensor:
    """End-point error ``sqrt((u - u')**2 + (v - v')**2)`` reduced over pixels."""
    pred, gt = _tensor(pred), _tensor(gt)
    _check_same(pred, gt, "epe")
    if pred.shape[-3] != 2:
        raise ShapeError(f"epe: flow must have 2 channels, got {pred.shape[-3]}")
    d = pred - gt
    return _reduce(_safe_norm(d[..., 0, :, :], d[..., 1, :, :]), reduction)


def l1_disparity(pred, gt, reduction: str = "mean") -> torch.Tensor:
    pred, gt = _tensor(pred), _tensor(gt)
    _check_same(pred, gt, "l1_disparity")
    return _reduce((pred - gt).abs(), reduction)


@dataclass
class LossBreakdown:
    epe: float = 0.0
    l1_dt: float = 0.0
    l1_dt1: float = 0.0
    joint: float = 0.0
    adversarial: float = 0.0
    total: float = 0.0
    critic: float | None = None
    step: int | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None}, sort_keys=True)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values() if v is not None)


def joint_terms(pred, gt, reduction: str = "mean") -> dict[str, torch.Tensor]:
    """Differentiable joint loss and its three terms, keyed like LossBreakdown."""
    pred, gt = _tensor(pred), _tensor(gt)
    _check_same(pred, gt, "joint_loss")
    if pred.shape[-3] != 4:
        raise ShapeError(f"joint_loss: scene flow must have 4 channels, got {pred.shape[-3]}")
    terms = {
        "epe": epe(pred[..., FLOW_SLICE, :, :], gt[..., FLOW_SLICE, :, :], reduction),
        "l1_dt": l1_disparity(pred[..., DISP_T, :, :], gt[..., DISP_T, :, :], reduction),
        "l1_dt1": l1_disparity(pred[..., DISP_T1, :, :], gt[..., DISP_T1, :, :], reduction),
    }
    terms["joint"] = terms["epe"] + terms["l1_dt"] + terms["l1_dt1"]
    return terms


def joint_loss(pred, gt, reduction: str = "mean") -> LossBreakdown:
    terms = joint_terms(pred, gt, reduction)
    out = LossBreakdown(**{k: v.item() for k, v in terms.items()})
    out.total = out.joint
    return out


def _check_mode(mode):
    if mode not in GAN_MODES:
        raise ValueError(f"gan mode must be one of {GAN_MODES}, got {mode!r}")


def _check_probs(p, what):
    if p.numel() == 0:
        raise ValueError(f"{what}: empty batch")
    if torch.any(p < 0) or torch.any(p > 1) or torch.any(torch.isnan(p)):
        raise ValueError(f"{what}: vanilla mode needs probabilities in [0, 1]")


def _log_clamped(p):
    return torch.log(p.clamp(EPS, 1 - EPS))


def critic_loss(scores_real, scores_fake, mode: str = "wasserstein") -> torch.Tensor:
    """Loss the critic minimizes.

    vanilla: ``-mean(log D(x)) - mean(log(1 - D(G(z))))`` on clamped probabilities.
    wasserstein: ``mean(fake) - mean(real)``.
    """
    _check_mode(mode)
    real, fake = _tensor(scores_real), _tensor(scores_fake)
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("critic_loss: empty batch")
    if mode == "wasserstein":
        return fake.mean() - real.mean()
    _check_probs(real, "critic_loss")
    _check_probs(fake, "critic_loss")
    return -_log_clamped(real).mean() - _log_clamped(1 - fake).mean()


def generator_adv_loss(scores_fake, mode: str = "wasserstein") -> torch.Tensor:
    """wasserstein: ``-mean(fake)``; vanilla (non-saturating): ``-mean(log D(G(z)))``."""
    _check_mode(mode)
    fake = _tensor(scores_fake)
    if fake.numel() == 0:
        raise ValueError("generator_adv_loss: empty batch")
    if mode == "wasserstein":
        return -fake.mean()
    _check_probs(fake, "generator_adv_loss")
    return -_log_clamped(fake).mean()


def total_generator_loss(joint, adversarial, lambda_adv: float = 1.0):
    return joint + lambda_adv * adversarial
