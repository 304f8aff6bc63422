"""End-to-end optimisation of the perturbation field.

Each iteration: inject ``d`` into the initial patch, run the denoising loop,
scene-match the result onto every image of the batch, score with the victim
detector, back-propagate the combined loss to ``d``, take an Adam step and
project ``d`` back into its L-infinity ball.
"""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .blob import BlobFormatError, read_blob, write_blob
from .config import AttackConfig
from .data import SceneImage
from .detector import CapabilityError, DetectorHandle, filter_by_class
from .diffusion import (
    DiffusionSchedule,
    NoisePredictor,
    TextCondition,
    denoise_loop,
    generate_patch,
    make_schedule,
)
from .losses import total_loss
from .patch import clip_patch, project_linf_
from .scene import SceneRanges, attack_render

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EMAC"
CHECKPOINT_VERSION = 1


class ConstraintViolation(AssertionError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def stream_seed(*keys: int) -> int:
    """Deterministic 63-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(2, np.uint64)[0] >> 1)


def generator_for(*keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(*keys))


def scene_ranges(cfg: AttackConfig) -> SceneRanges:
    return SceneRanges(
        contrast=tuple(cfg.contrast_range),
        brightness=tuple(cfg.brightness_range),
        rotation_deg=tuple(cfg.rotation_range),
        area_ratio=cfg.area_ratio,
        noise_std=cfg.noise_std,
    )


def text_condition(cfg: AttackConfig) -> TextCondition:
    return TextCondition(cfg.prompt, cfg.guidance_scale, cfg.inference_steps)


def diffusion_schedule(cfg: AttackConfig) -> DiffusionSchedule:
    return make_schedule(cfg.diffusion_steps, cfg.schedule_kind).for_inference_steps(cfg.inference_steps)


def start_timestep(cfg: AttackConfig) -> int:
    return cfg.start_timestep if cfg.start_timestep is not None else cfg.diffusion_steps // 2


# -- patch initialisation ------------------------------------------------------

def init_patch(
    mode: str,
    size: int,
    generator: torch.Generator,
    *,
    image: torch.Tensor | None = None,
    predictor: NoisePredictor | None = None,
    cond: TextCondition | None = None,
    schedule: DiffusionSchedule | None = None,
) -> torch.Tensor:
    """Initial patch: a random crop of an environment image, or a full
    denoising run from Gaussian noise."""
    if mode == "background_sample":
        if image is None:
            raise ValueError("background_sample needs an environment image")
        H, W = image.shape[-2:]
        if H < size or W < size:
            raise ValueError(f"environment image {W}x{H} is smaller than the {size}px patch")
        y = int(torch.randint(0, H - size + 1, (1,), generator=generator))
        x = int(torch.randint(0, W - size + 1, (1,), generator=generator))
        return image[:, y:y + size, x:x + size].to(torch.float64).clone()
    if mode == "predictor_sample":
        if predictor is None or cond is None or schedule is None:
            raise ValueError("predictor_sample needs predictor, cond and schedule")
        x = torch.randn(3, size, size, generator=generator, dtype=torch.float64)
        with torch.no_grad():
            x = denoise_loop(x, schedule.total_steps, schedule, predictor, cond)
        return clip_patch(x)
    raise ValueError(f"unknown init mode {mode!r}")


# -- state & checkpoints ------------------------------------------------------------

@dataclass
class TrainState:
    d: torch.Tensor
    p_init: torch.Tensor
    optimizer: dict
    iteration: int = 0
    best_loss: float = math.inf
    best_d: torch.Tensor | None = None


def checkpoint(state: TrainState, path: str | Path, config_hash: str, seed: int) -> Path:
    buf = io.BytesIO()
    torch.save({
        "d": state.d.detach().clone(),
        "p_init": state.p_init,
        "optimizer": state.optimizer,
        "best_loss": state.best_loss,
        "best_d": state.best_d,
    }, buf)
    header = {"version": CHECKPOINT_VERSION, "config_hash": config_hash, "iteration": state.iteration, "seed": seed}
    return write_blob(path, CHECKPOINT_MAGIC, header, buf.getvalue())


def resume(path: str | Path, config_hash: str | None = None) -> tuple[TrainState, dict]:
    """Load a checkpoint; refuses other format versions or a different config."""
    try:
        header, payload = read_blob(path, CHECKPOINT_MAGIC)
    except (OSError, BlobFormatError) as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    if config_hash is not None and header.get("config_hash") != config_hash:
        raise CheckpointError("checkpoint was written for a different configuration (config hash mismatch)")
    try:
        blob = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on bad pickles
        raise CheckpointError(f"corrupt checkpoint payload: {exc}") from None
    state = TrainState(
        d=blob["d"], p_init=blob["p_init"], optimizer=blob["optimizer"], iteration=int(header["iteration"]),
        best_loss=float(blob["best_loss"]), best_d=blob["best_d"],
    )
    return state, header


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    patch: torch.Tensor
    log: list[dict]
    state: TrainState
    violations: int = 0


@dataclass
class _Batching:
    n: int
    batch_size: int
    seed: int
    _cache: dict = field(default_factory=dict)

    @property
    def per_epoch(self) -> int:
        return max(1, math.ceil(self.n / self.batch_size))

    def batch(self, iteration: int) -> list[int]:
        epoch, b = divmod(iteration, self.per_epoch)
        if epoch not in self._cache:
            self._cache = {epoch: torch.randperm(self.n, generator=generator_for(self.seed, 0xE90C, epoch)).tolist()}
        order = self._cache[epoch]
        return order[b * self.batch_size:(b + 1) * self.batch_size]


def _target_boxes(cfg: AttackConfig, scene: SceneImage, detector, cache: dict):
    if cfg.boxes_source == "ground_truth":
        return scene.boxes(cfg.target_class)
    if scene.image_id not in cache:
        dets = filter_by_class(detector.detect(scene.pixels, scene.image_id), cfg.target_class)
        cache[scene.image_id] = [tuple(b) for b in dets.boxes.tolist()]
    return cache[scene.image_id]


def train(
    cfg: AttackConfig,
    dataset: Sequence[SceneImage],
    detector: DetectorHandle,
    predictor: NoisePredictor | None,
    *,
    p_init: torch.Tensor | None = None,
    env_image: torch.Tensor | None = None,
    state: TrainState | None = None,
    max_iterations: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    config_hash: str = "",
    snapshot_dir: str | Path | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise the perturbation field and return the exported patch.

    ``state`` continues a resumed run. ``max_iterations`` stops early (total
    count, including resumed iterations) without changing the schedule.
    """
    if not getattr(detector, "supports_gradients", False):
        raise CapabilityError("training needs a detector with gradient support (detect_differentiable)")
    if not dataset:
        raise ValueError("training dataset is empty")

    cond = text_condition(cfg)
    schedule = diffusion_schedule(cfg)
    t0 = start_timestep(cfg)
    ranges = scene_ranges(cfg)
    if hasattr(predictor, "bind"):
        predictor = predictor.bind(schedule)

    if state is None:
        if p_init is None:
            g = generator_for(cfg.seed, 0x1417)
            p_init = init_patch(cfg.init_mode, cfg.patch_size, g, image=env_image, predictor=predictor,
                                cond=cond, schedule=schedule)
        d0 = torch.zeros_like(p_init, dtype=torch.float64)
        state = TrainState(d=d0, p_init=p_init.to(torch.float64), optimizer={})
    p_init = state.p_init
    d = state.d.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([d], lr=cfg.learning_rate)
    if state.optimizer:
        opt.load_state_dict(state.optimizer)

    batching = _Batching(len(dataset), cfg.batch_size, cfg.seed)
    total_iters = cfg.epochs * batching.per_epoch
    stop = total_iters if max_iterations is None else min(total_iters, max_iterations)
    box_cache: dict = {}
    records: list[dict] = []
    violations = 0
    logf = open(log_path, "a") if log_path else None
    start_wall = time.perf_counter()

    def snapshot_state() -> TrainState:
        return TrainState(d.detach().clone(), p_init, opt.state_dict(), it, state.best_loss, state.best_d)

    it = state.iteration
    try:
        while it < stop:
            p_ema = generate_patch(p_init, d, cond, schedule, predictor, t0, cfg.tau)
            if bool((p_ema < 0).any()) or bool((p_ema > cfg.tau).any()):
                violations += 1
                raise ConstraintViolation(f"iteration {it}: patch left [0, {cfg.tau}]")
            dets = []
            for k, idx in enumerate(batching.batch(it)):
                scene = dataset[idx]
                g = generator_for(cfg.seed, it, k)
                rendered = attack_render(scene.pixels, _target_boxes(cfg, scene, detector, box_cache),
                                         p_ema, ranges, g)
                cand = detector.detect_differentiable(rendered.image, scene.image_id)
                dets.append(filter_by_class(cand, cfg.target_class))
            report = total_loss(p_ema, dets, cfg.lambda_tv)
            total = float(report.total.detach())
            if not math.isfinite(total):
                if snapshot_dir is not None:
                    checkpoint(snapshot_state(), Path(snapshot_dir) / "diverged.ckpt", config_hash, cfg.seed)
                raise TrainingDiverged(f"non-finite loss at iteration {it}: {report.as_dict()}")
            if total < state.best_loss:
                state.best_loss = total
                state.best_d = d.detach().clone()

            opt.zero_grad()
            report.total.backward()
            opt.step()
            project_linf_(d, cfg.linf_bound)
            linf = float(d.detach().abs().max())
            if linf > cfg.linf_bound:
                violations += 1
                raise ConstraintViolation(f"iteration {it}: |d|_inf = {linf} > {cfg.linf_bound}")

            rec = {"iter": it, **{k: v for k, v in report.as_dict().items() if k != "lambda_tv"},
                   "n_candidates": sum(len(x) for x in dets), "linf_d": linf,
                   "wallclock": round(time.perf_counter() - start_wall, 4)}
            records.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if on_iteration:
                on_iteration(rec)
            it += 1
            if checkpoint_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                checkpoint(snapshot_state(), checkpoint_path, config_hash, cfg.seed)
    finally:
        if logf:
            logf.close()

    final = snapshot_state()
    if checkpoint_path:
        checkpoint(final, checkpoint_path, config_hash, cfg.seed)
    chosen = final.d
    if cfg.export == "best" and final.best_d is not None:
        chosen = final.best_d
    with torch.no_grad():
        patch = generate_patch(p_init, chosen, cond, schedule, predictor, t0, cfg.tau)
    return TrainResult(patch.detach(), records, final, violations)
