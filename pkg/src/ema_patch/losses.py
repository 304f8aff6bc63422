"""Smoothness and detection-suppression objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .detector import DetectionSet

DEFAULT_LAMBDA_TV = 0.1


def _safe_sqrt(u: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; a constant patch should give a zero gradient instead of NaN
    pos = u > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, u, torch.ones_like(u))), torch.zeros_like(u))


def tv_loss(patch: torch.Tensor) -> torch.Tensor:
    """Root of summed squared neighbour differences, divided by the pixel count.

    Only in-range neighbours contribute; all channels go under the root.
    Accepts ``(C, S, S)`` or a single-channel ``(S, S)`` array.
    """
    if patch.dim() == 2:
        patch = patch[None]
    S = patch.shape[-1]
    if patch.shape[-2] != S:
        raise ValueError("tv_loss expects a square patch")
    if S < 2:
        raise ValueError("tv_loss needs a patch of at least 2x2 pixels")
    dv = patch[:, 1:, :] - patch[:, :-1, :]
    dh = patch[:, :, 1:] - patch[:, :, :-1]
    return _safe_sqrt((dv**2).sum() + (dh**2).sum()) / (S * S)


def det_loss(dets_per_image: Sequence[DetectionSet]) -> torch.Tensor:
    """Mean of ``class_conf * objectness`` over every candidate in the batch."""
    scores = [d.scores for d in dets_per_image if len(d)]
    if not scores:
        return torch.zeros((), dtype=torch.float64)
    allscores = torch.cat(scores)
    return allscores.sum() / allscores.numel()


@dataclass
class LossReport:
    tv: torch.Tensor
    det: torch.Tensor
    total: torch.Tensor
    lambda_tv: float

    def as_dict(self) -> dict[str, float]:
        return {"tv": float(self.tv.detach()), "det": float(self.det.detach()), "total": float(self.total.detach()),
                "lambda_tv": self.lambda_tv}


def total_loss(patch: torch.Tensor, dets: Sequence[DetectionSet], lambda_tv: float = DEFAULT_LAMBDA_TV) -> LossReport:
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be non-negative")
    tv = tv_loss(patch)
    det = det_loss(dets).to(tv.dtype)
    return LossReport(tv, det, lambda_tv * tv + det, lambda_tv)
