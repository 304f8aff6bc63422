"""Patch and perturbation state, clipping rules and mask compositing.

Patches are float tensors of shape ``(3, S, S)`` with values in ``[0, tau]``.
Scene images use the same channel-first layout, ``(3, H, W)``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

DEFAULT_TAU = 1.0
DEFAULT_LINF_BOUND = 0.6


def check_patch(patch: torch.Tensor) -> None:
    if patch.dim() != 3 or patch.shape[0] != 3 or patch.shape[1] != patch.shape[2]:
        raise ValueError(f"patch must have shape (3, S, S), got {tuple(patch.shape)}")


def clip_patch(patch: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Clamp every element to ``[0, tau]``.

    Gradients pass through unclamped elements only.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return patch.clamp(min=0.0, max=tau)


def apply_perturbation(init: torch.Tensor, d: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    if init.shape != d.shape:
        raise ValueError(f"shape mismatch: init {tuple(init.shape)} vs d {tuple(d.shape)}")
    return clip_patch(init + d, tau)


def zero_perturbation(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(like)


def project_linf(d: torch.Tensor, bound: float = DEFAULT_LINF_BOUND) -> torch.Tensor:
    if bound <= 0:
        raise ValueError(f"linf bound must be positive, got {bound}")
    return d.clamp(min=-bound, max=bound)


def project_linf_(d: torch.Tensor, bound: float = DEFAULT_LINF_BOUND) -> torch.Tensor:
    """In-place variant used on the trainable leaf after an optimizer step."""
    if bound <= 0:
        raise ValueError(f"linf bound must be positive, got {bound}")
    with torch.no_grad():
        d.clamp_(min=-bound, max=bound)
    return d


def composite(scene: torch.Tensor, rendered: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``(1 - m) * scene + m * rendered`` for a binary ``(H, W)`` mask."""
    if scene.shape != rendered.shape:
        raise ValueError(f"scene {tuple(scene.shape)} and rendered layer {tuple(rendered.shape)} differ")
    if mask.shape != scene.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match scene {tuple(scene.shape[-2:])}")
    m = mask.to(scene.dtype)
    return (1 - m) * scene + m * rendered


# -- export / import ---------------------------------------------------------

def patch_to_uint8(patch: torch.Tensor) -> np.ndarray:
    check_patch(patch)
    hwc = patch.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(hwc * 255.0).astype(np.uint8)


def save_patch(
    patch: torch.Tensor,
    path: str | Path,
    *,
    tau: float = DEFAULT_TAU,
    linf_bound: float = DEFAULT_LINF_BOUND,
    config_hash: str = "",
    seed: int | None = None,
) -> Path:
    """Write an 8-bit RGB PNG plus a ``.json`` sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # pinned PNG params so identical pixels give identical bytes
    Image.fromarray(patch_to_uint8(patch), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    meta = {
        "size_s": int(patch.shape[-1]),
        "tau": tau,
        "linf_bound": linf_bound,
        "creation_config_hash": config_hash,
        "seed": seed,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(png_path: str | Path) -> Path:
    return Path(png_path).with_suffix(".json")


def load_patch(path: str | Path) -> tuple[torch.Tensor, dict | None]:
    """Returns the patch as float64 ``(3, S, S)`` and the sidecar dict if present."""
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{path}: patch image is not square ({arr.shape[1]}x{arr.shape[0]})")
    patch = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    meta = None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return patch, meta
