"""Pixel-space diffusion pieces: schedules, forward noising, denoising updates
and the deterministic patch-generation loop.

All ``alpha`` coefficients inside the generation loop are cumulative
(``alpha_bar``). The loop is plain torch, so gradients reach the perturbation
that was injected at its start.

Noise predictors are callables ``predictor(x, t, cond) -> eps`` with ``x`` of
shape ``(3, H, W)``. Real pretrained models (latent diffusion with
classifier-free guidance, VAE encode/decode) belong behind that callable; see
:class:`RescaledAdapter` for the value-range convention external adapters get.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import torch

from .blob import load_weights, save_weights
from .patch import DEFAULT_TAU, apply_perturbation, clip_patch


class PredictorContractError(RuntimeError):
    """A noise predictor returned something the loop cannot use."""


@dataclass(frozen=True)
class TextCondition:
    prompt: str = ""
    guidance_scale: float = 6.5
    inference_steps: int = 20

    def __post_init__(self):
        if self.guidance_scale <= 0:
            raise ValueError("guidance_scale must be positive")
        if self.inference_steps < 1:
            raise ValueError("inference_steps must be >= 1")
        if self.guidance_enabled and not self.prompt.strip():
            raise ValueError("a non-empty prompt is required when guidance is enabled")

    @property
    def guidance_enabled(self) -> bool:
        return self.guidance_scale > 1.0


class NoisePredictor(Protocol):
    def __call__(self, x: torch.Tensor, t: int, cond: TextCondition) -> torch.Tensor: ...


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative coefficients ``alpha_bar[t]`` for ``t = 0..total_steps``."""

    alpha_bar: torch.Tensor
    step_size: int = 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.dim() != 1 or ab.numel() < 1:
            raise ValueError("alpha_bar must be a non-empty 1-D tensor")
        if float(ab[0]) != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1.0")
        if bool((ab <= 0).any()) or bool((ab > 1).any()):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if bool((ab[1:] > ab[:-1]).any()):
            raise ValueError("alpha_bar must be non-increasing")
        if self.step_size < 1 or self.step_size > max(self.total_steps, 1):
            raise ValueError(f"step_size must be in [1, {max(self.total_steps, 1)}], got {self.step_size}")

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.numel() - 1

    def ab(self, t: int) -> float:
        if t < 0 or t > self.total_steps:
            raise ValueError(f"timestep {t} outside schedule range [0, {self.total_steps}]")
        return float(self.alpha_bar[t])

    def alpha(self, t: int) -> float:
        """Per-step coefficient ``alpha_t = alpha_bar[t] / alpha_bar[t-1]``."""
        if t < 1 or t > self.total_steps:
            raise ValueError(f"timestep {t} outside [1, {self.total_steps}]")
        return float(self.alpha_bar[t] / self.alpha_bar[t - 1])

    def with_step_size(self, step_size: int) -> "DiffusionSchedule":
        return DiffusionSchedule(self.alpha_bar, step_size)

    def for_inference_steps(self, n: int) -> "DiffusionSchedule":
        return self.with_step_size(max(1, self.total_steps // max(n, 1)))

    @classmethod
    def from_alpha_bar(cls, values: Sequence[float], step_size: int = 1) -> "DiffusionSchedule":
        return cls(torch.tensor(list(values), dtype=torch.float64), step_size)


def linear_betas(total_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> torch.Tensor:
    if total_steps == 1:
        return torch.tensor([beta_start], dtype=torch.float64)
    return torch.linspace(beta_start, beta_end, total_steps, dtype=torch.float64)


def make_schedule(
    total_steps: int,
    kind: str = "linear",
    step_size: int = 1,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    cosine_offset: float = 0.008,
) -> DiffusionSchedule:
    """Build ``alpha_bar`` for a linear-beta or cosine profile."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if kind == "linear":
        betas = linear_betas(total_steps, beta_start, beta_end)
        ab = torch.cumprod(1.0 - betas, dim=0)
    elif kind == "cosine":
        ts = torch.arange(total_steps + 1, dtype=torch.float64) / total_steps
        f = torch.cos((ts + cosine_offset) / (1 + cosine_offset) * math.pi / 2) ** 2
        betas = (1 - f[1:] / f[:-1]).clamp(max=0.999)
        ab = torch.cumprod(1.0 - betas, dim=0)
    else:
        raise ValueError(f"unknown schedule kind {kind!r} (expected 'linear' or 'cosine')")
    ab = torch.cat([torch.ones(1, dtype=torch.float64), ab])
    return DiffusionSchedule(ab, step_size)


def forward_diffuse(x_prev: torch.Tensor, t: int, schedule: DiffusionSchedule, noise: torch.Tensor) -> torch.Tensor:
    """One forward noising step from ``t-1`` to ``t``."""
    if noise.shape != x_prev.shape:
        raise ValueError("noise shape must match x_prev")
    a = schedule.alpha(t)
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * noise


def _predict(predictor: NoisePredictor, x: torch.Tensor, t: int, cond: TextCondition) -> torch.Tensor:
    eps = predictor(x, t, cond)
    if not isinstance(eps, torch.Tensor) or eps.shape != x.shape:
        shape = tuple(eps.shape) if isinstance(eps, torch.Tensor) else type(eps).__name__
        raise PredictorContractError(f"predictor returned {shape} for input of shape {tuple(x.shape)}")
    return eps


def ddpm_step(
    x_t: torch.Tensor, t: int, schedule: DiffusionSchedule, predictor: NoisePredictor, cond: TextCondition
) -> torch.Tensor:
    """Ancestral-mean update ``x_{t-1}`` (no added noise)."""
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    a = schedule.alpha(t)
    ab = schedule.ab(t)
    eps = _predict(predictor, x_t, t, cond)
    if a == 1.0:
        return x_t / math.sqrt(a)
    return (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)


def ddim_update(x_t: torch.Tensor, eps: torch.Tensor, ab_t: float, ab_next: float) -> torch.Tensor:
    x0 = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps


def denoise_loop(
    x: torch.Tensor,
    start_timestep: int,
    schedule: DiffusionSchedule,
    predictor: NoisePredictor,
    cond: TextCondition,
) -> torch.Tensor:
    """Deterministic strided denoising from ``start_timestep`` down to 0.

    Stops at the last computed state; when the stride overshoots, the final
    jump lands on ``t = 0`` (``alpha_bar = 1``). A jump out of ``t = 0`` would
    be the identity, so it is not taken.
    """
    if start_timestep < 0 or start_timestep > schedule.total_steps:
        raise ValueError(f"start_timestep {start_timestep} outside [0, {schedule.total_steps}]")
    t = start_timestep
    s = schedule.step_size
    while t > 0:
        t_next = max(t - s, 0)
        eps = _predict(predictor, x, t, cond)
        x = ddim_update(x, eps, schedule.ab(t), schedule.ab(t_next))
        t = t_next
    return x


def default_start_timestep(schedule: DiffusionSchedule) -> int:
    return schedule.total_steps // 2


def generate_patch(
    p_init: torch.Tensor,
    d: torch.Tensor,
    cond: TextCondition,
    schedule: DiffusionSchedule,
    predictor: NoisePredictor | None,
    start_timestep: int | None = None,
    tau: float = DEFAULT_TAU,
) -> torch.Tensor:
    """Inject ``d`` into ``p_init`` once, then denoise; result clipped to ``[0, tau]``.

    ``predictor=None`` bypasses the loop entirely (ablation mode).
    """
    x = apply_perturbation(p_init, d, tau)
    if predictor is None:
        return x
    if start_timestep is None:
        start_timestep = default_start_timestep(schedule)
    x = denoise_loop(x, start_timestep, schedule, predictor, cond)
    return clip_patch(x, tau)


def classifier_free_guidance(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    return eps_uncond + scale * (eps_cond - eps_uncond)


# -- predictors ---------------------------------------------------------------

class ZeroPredictor:
    def __call__(self, x, t, cond):
        return torch.zeros_like(x)


class OracleNoisePredictor:
    """Returns the exact noise separating ``x`` from a known clean image ``x0``.

    For a chain produced by forward diffusion from ``x0`` this is the noise
    that was used, so the loop must reconstruct ``x0``.
    """

    def __init__(self, x0: torch.Tensor, schedule: DiffusionSchedule):
        self.x0 = x0
        self.schedule = schedule

    def __call__(self, x, t, cond):
        ab = self.schedule.ab(t)
        return (x - math.sqrt(ab) * self.x0) / math.sqrt(1.0 - ab)


class LinearNoisePredictor:
    """Toy predictor: per-pixel channel mixing plus a timestep-scaled bias.

    eps = W @ x[:, i, j] + (t / t_ref) * b. Ignores the text condition.
    """

    kind = "linear"

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor, t_ref: int = 1000):
        self.weight = weight
        self.bias = bias
        self.t_ref = t_ref

    def __call__(self, x, t, cond):
        w = self.weight.to(x.dtype)
        b = self.bias.to(x.dtype)
        return torch.einsum("oc,chw->ohw", w, x) + (t / self.t_ref) * b[:, None, None]

    @classmethod
    def random(cls, seed: int = 0, scale: float = 0.1, channels: int = 3, t_ref: int = 1000):
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(channels, channels, generator=g, dtype=torch.float64) * scale
        b = torch.randn(channels, generator=g, dtype=torch.float64) * scale
        return cls(w, b, t_ref)

    def save(self, path: str | Path) -> Path:
        return save_weights(path, {"weight": self.weight, "bias": self.bias}, kind=self.kind, t_ref=self.t_ref)

    @classmethod
    def load(cls, path: str | Path) -> "LinearNoisePredictor":
        header, tensors = load_weights(path)
        if header.get("kind") != cls.kind:
            raise ValueError(f"{path}: expected {cls.kind!r} weights, found {header.get('kind')!r}")
        return cls(tensors["weight"], tensors["bias"], int(header.get("t_ref", 1000)))


# Rough sRGB reference colours for prompt keywords understood by the toy
# palette predictor.
PROMPT_PALETTE: dict[str, tuple[float, float, float]] = {
    "desert": (0.80, 0.69, 0.49),
    "sand": (0.76, 0.70, 0.50),
    "grass": (0.33, 0.49, 0.20),
    "grassland": (0.36, 0.50, 0.22),
    "forest": (0.13, 0.33, 0.16),
    "snow": (0.92, 0.93, 0.95),
    "asphalt": (0.30, 0.30, 0.32),
    "concrete": (0.60, 0.60, 0.58),
}
DARKEN_WORDS = {"black": 0.6, "dark": 0.75}


def palette_from_prompt(prompt: str) -> tuple[float, float, float] | None:
    words = [w.strip().lower() for w in prompt.replace(";", ",").replace(",", " ").split()]
    hits = [PROMPT_PALETTE[w] for w in words if w in PROMPT_PALETTE]
    if not hits:
        return None
    rgb = [sum(c[i] for c in hits) / len(hits) for i in range(3)]
    for w in words:
        if w in DARKEN_WORDS:
            rgb = [v * DARKEN_WORDS[w] for v in rgb]
    return (rgb[0], rgb[1], rgb[2])


class PalettePredictor:
    """Toy text-conditioned predictor biased toward one colour.

    The unconditional branch is neutral: its clean-image estimate is chosen
    so that one strided update maps ``x_t`` to itself. The conditional branch
    pulls that estimate toward ``target_rgb`` by ``strength``. Both go through
    classifier-free guidance, so the pull per step is
    ``guidance_scale * strength`` and ``strength = 0`` leaves the patch
    unchanged.
    """

    kind = "palette"

    def __init__(self, target_rgb: Sequence[float] | None = None, strength: float = 0.08,
                 schedule: DiffusionSchedule | None = None):
        self.target_rgb = tuple(float(v) for v in target_rgb) if target_rgb is not None else None
        self.strength = strength
        self.schedule = schedule

    def bind(self, schedule: DiffusionSchedule) -> "PalettePredictor":
        return PalettePredictor(self.target_rgb, self.strength, schedule)

    def _target(self, cond: TextCondition) -> tuple[float, float, float]:
        if self.target_rgb is not None:
            return self.target_rgb
        rgb = palette_from_prompt(cond.prompt)
        if rgb is None:
            raise ValueError(f"prompt {cond.prompt!r} names no colour the palette predictor knows")
        return rgb

    def _neutral_gain(self, t: int) -> float:
        # x_next = sqrt(ab_n) x0 + sqrt(1 - ab_n) (x - sqrt(ab) x0) / sqrt(1 - ab) equals x for x0 = gain * x
        sch = self.schedule
        ab, ab_n = sch.ab(t), sch.ab(max(t - sch.step_size, 0))
        r = math.sqrt(1.0 - ab_n) / math.sqrt(1.0 - ab)
        denom = math.sqrt(ab_n) - r * math.sqrt(ab)
        return 1.0 if abs(denom) < 1e-15 else (1.0 - r) / denom

    def __call__(self, x, t, cond):
        if self.schedule is None:
            raise RuntimeError("PalettePredictor must be bound to a schedule before use")
        ab = self.schedule.ab(t)
        k = self._neutral_gain(t)
        c = torch.tensor(self._target(cond), dtype=x.dtype)[:, None, None]
        x0_uncond = k * x
        x0_cond = k * ((1 - self.strength) * x + self.strength * c)
        to_eps = lambda x0: (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)  # noqa: E731
        return classifier_free_guidance(to_eps(x0_uncond), to_eps(x0_cond), cond.guidance_scale)


class RescaledAdapter:
    """Wraps an external model callable ``model(x, t, prompt, guidance_scale)``.

    The model sees the image rescaled from ``[0, 1]`` to ``[-1, 1]`` and must
    return a same-shape noise estimate. Latent encode/decode and classifier-free
    guidance are the wrapped model's business.
    """

    def __init__(self, model: Callable[[torch.Tensor, int, str, float], torch.Tensor]):
        self.model = model

    def __call__(self, x, t, cond):
        return self.model(2.0 * x - 1.0, t, cond.prompt, cond.guidance_scale)
