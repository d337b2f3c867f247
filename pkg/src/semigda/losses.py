"""Training objectives: latent alignment, Dice segmentation terms, warm-up weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import torch

from .acr import soft_foreground
from .errors import ConfigError, ShapeError, TrainingError


def _same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def prior_sup_loss(ztilde_v: torch.Tensor, z_r: torch.Tensor, z_g: torch.Tensor) -> torch.Tensor:
    """Pull both image-branch latents towards the mask latent."""
    _same_shape(ztilde_v, z_r, z_g)
    return mse(ztilde_v, z_g) + mse(z_r, z_g)


def prior_unsup_loss(ztilde_v: torch.Tensor, z_r: torch.Tensor) -> torch.Tensor:
    return mse(ztilde_v, z_r)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss. A 2-D input is one map; (N, H, W) is averaged over N."""
    _same_shape(pred, target)
    if pred.dim() == 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    dims = tuple(range(1, pred.dim()))
    inter = (pred * target).sum(dim=dims)
    denom = pred.abs().sum(dim=dims) + target.abs().sum(dim=dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def foreground(y: torch.Tensor, K: int = 2) -> torch.Tensor:
    return (y == K - 1).to(torch.get_default_dtype())


def seg_sup_loss(yhat_v: torch.Tensor, yhat_r: torch.Tensor, y: torch.Tensor, K: int = 2,
                 smooth: float = 1.0) -> torch.Tensor:
    target = foreground(y, K).to(yhat_v.dtype)
    return (dice_loss(soft_foreground(yhat_v, K), target, smooth)
            + dice_loss(soft_foreground(yhat_r, K), target, smooth))


def seg_unsup_loss(yhat_v: torch.Tensor, yhat_r: torch.Tensor, K: int = 2, smooth: float = 1.0,
                   stop_gradient: bool = True) -> torch.Tensor:
    """Bidirectional cross-branch Dice.

    With ``stop_gradient`` each term treats its second argument as a fixed
    target, so each branch is pulled only by the term it predicts in.
    """
    p_v = soft_foreground(yhat_v, K)
    p_r = soft_foreground(yhat_r, K)
    t_v, t_r = (p_v.detach(), p_r.detach()) if stop_gradient else (p_v, p_r)
    return dice_loss(p_v, t_r, smooth) + dice_loss(p_r, t_v, smooth)


def lambda_schedule(t: float, t_max: float, beta: float = 0.1) -> float:
    """Gaussian warm-up ``beta * exp(-5 (1 - t / t_max)^2)``."""
    if t_max <= 0:
        raise ConfigError("t_max must be positive")
    if not 0 <= t <= t_max:
        raise ConfigError(f"t={t} outside [0, {t_max}]")
    return beta * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


@dataclass
class LossReport:
    sup_prior: float
    sup_seg: float
    unsup_prior: float
    unsup_seg: float
    lambda_u: float
    total: float
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "loss"}


def _zero_like(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype)


def total_loss(sup_prior=None, sup_seg=None, unsup_prior=None, unsup_seg=None, *, t: float,
               t_max: float, beta: float = 0.1, lambda_u: Optional[float] = None) -> LossReport:
    """Assemble ``L_sup + lambda_u * L_unsup``; missing terms count as zero.

    ``lambda_u`` overrides the schedule (used when the warm-up clock is not
    running, e.g. during latent pretraining).
    """
    terms = {"sup_prior": sup_prior, "sup_seg": sup_seg, "unsup_prior": unsup_prior, "unsup_seg": unsup_seg}
    ref = next((v for v in terms.values() if v is not None), None)
    if ref is None:
        raise TrainingError("total_loss called without any loss term")
    terms = {k: (_zero_like(ref) if v is None else v) for k, v in terms.items()}
    values = {k: float(v.detach()) for k, v in terms.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingError(f"non-finite loss terms: {bad}", values)
    lam = lambda_schedule(t, t_max, beta) if lambda_u is None else float(lambda_u)
    loss = terms["sup_prior"] + terms["sup_seg"] + lam * (terms["unsup_prior"] + terms["unsup_seg"])
    total = values["sup_prior"] + values["sup_seg"] + lam * (values["unsup_prior"] + values["unsup_seg"])
    return LossReport(lambda_u=lam, total=total, loss=loss, **values)
