"""Procedural overhead "vehicle" scenes and fitting of the toy detector.

Everything here is seeded and CPU-sized; it stands in for real aerial
datasets and real detectors so that the attack can be exercised end to end.
"""

from __future__ import annotations

import logging
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import Annotation, SceneImage
from .detector import ToyDetector
from .scene import SceneRanges, attack_render

log = logging.getLogger(__name__)

SAND_RGB = (0.78, 0.68, 0.47)
GRASS_RGB = (0.32, 0.47, 0.21)

CAR_COLOURS = [
    (0.92, 0.92, 0.90),
    (0.68, 0.69, 0.70),
    (0.25, 0.25, 0.27),
    (0.70, 0.10, 0.10),
    (0.15, 0.25, 0.60),
    (0.08, 0.08, 0.09),
]

BUILTIN_WEIGHTS = "toy_detector.emaw"


def make_background(h: int, w: int, generator: torch.Generator, base_rgb=SAND_RGB,
                    low_amp: float = 0.06, grain: float = 0.02) -> torch.Tensor:
    base = torch.tensor(base_rgb, dtype=torch.float64)[:, None, None]
    coarse = torch.randn(1, 1, max(h // 8, 2), max(w // 8, 2), generator=generator, dtype=torch.float64)
    low = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)[0]
    tint = 1 + 0.15 * torch.randn(3, 1, 1, generator=generator, dtype=torch.float64) * low_amp
    fine = torch.randn(3, h, w, generator=generator, dtype=torch.float64) * grain
    return (base * tint + low_amp * low + fine).clamp(0, 1)


def _randint(g: torch.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi]."""
    return int(torch.randint(lo, hi + 1, (1,), generator=g))


def _paint_vehicle(img: torch.Tensor, x1: int, y1: int, w: int, h: int, colour, g: torch.Generator) -> None:
    body = torch.tensor(colour, dtype=torch.float64)[:, None, None]
    img[:, y1:y1 + h, x1:x1 + w] = body
    # dark rim
    img[:, y1:y1 + h, x1] *= 0.55
    img[:, y1:y1 + h, x1 + w - 1] *= 0.55
    img[:, y1, x1:x1 + w] *= 0.55
    img[:, y1 + h - 1, x1:x1 + w] *= 0.55
    glass = torch.tensor((0.10, 0.12, 0.16), dtype=torch.float64)[:, None]
    horizontal = w >= h
    front = bool(torch.rand(1, generator=g) < 0.5)
    if horizontal:
        band = max(2, w // 6)
        xs = x1 + w // 5 if front else x1 + w - w // 5 - band
        img[:, y1 + 2:y1 + h - 2, xs:xs + band] = glass[:, :, None]
    else:
        band = max(2, h // 6)
        ys = y1 + h // 5 if front else y1 + h - h // 5 - band
        img[:, ys:ys + band, x1 + 2:x1 + w - 2] = glass[:, None, :]


def make_vehicle_scene(generator: torch.Generator, image_id: str, size: int = 64,
                       n_vehicles: tuple[int, int] = (1, 3), base_rgb=SAND_RGB) -> SceneImage:
    img = make_background(size, size, generator, base_rgb)
    boxes: list[tuple[int, int, int, int]] = []
    want = _randint(generator, *n_vehicles)
    tries = 0
    while len(boxes) < want and tries < 50:
        tries += 1
        long_side, short_side = _randint(generator, 18, 24), _randint(generator, 12, 16)
        if bool(torch.rand(1, generator=generator) < 0.5):
            w, h = long_side, short_side
        else:
            w, h = short_side, long_side
        x1 = _randint(generator, 1, size - w - 1)
        y1 = _randint(generator, 1, size - h - 1)
        cand = (x1, y1, x1 + w, y1 + h)
        if any(not (cand[2] + 2 <= b[0] or b[2] + 2 <= cand[0] or cand[3] + 2 <= b[1] or b[3] + 2 <= cand[1])
               for b in boxes):
            continue
        colour = CAR_COLOURS[_randint(generator, 0, len(CAR_COLOURS) - 1)]
        _paint_vehicle(img, x1, y1, w, h, colour, generator)
        boxes.append(cand)
    anns = [Annotation(tuple(float(v) for v in b), 0) for b in boxes]
    return SceneImage(image_id, img.clamp(0, 1), anns)


def make_dataset(n: int, seed: int = 0, size: int = 64, base_rgb=SAND_RGB, prefix: str = "toy") -> list[SceneImage]:
    g = torch.Generator().manual_seed(seed)
    return [make_vehicle_scene(g, f"{prefix}_{i:03d}", size, base_rgb=base_rgb) for i in range(n)]


def make_environment_image(seed: int = 0, size: int = 64, base_rgb=SAND_RGB) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed + 7919)
    return make_background(size, size, g, base_rgb)


# -- detector fitting ---------------------------------------------------------------

def _targets(scenes: list[SceneImage], det: ToyDetector, size: int):
    gs = size // det.stride
    B = len(scenes)
    obj = torch.zeros(B, gs, gs, dtype=torch.float64)
    box_t = torch.zeros(B, 4, gs, gs, dtype=torch.float64)
    for b, sc in enumerate(scenes):
        for a in sc.annotations:
            x1, y1, x2, y2 = a.box
            cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
            gx, gy = min(int(cx // det.stride), gs - 1), min(int(cy // det.stride), gs - 1)
            obj[b, gy, gx] = 1.0
            box_t[b, 0, gy, gx] = (cx / det.stride - gx + 0.5) / 2
            box_t[b, 1, gy, gx] = (cy / det.stride - gy + 0.5) / 2
            box_t[b, 2, gy, gx] = (w / det.anchor) ** 0.5 / 2
            box_t[b, 3, gy, gx] = (h / det.anchor) ** 0.5 / 2
    return obj, box_t


def random_occluder(generator: torch.Generator, size: int = 16) -> torch.Tensor:
    """Noise, flat colour or background texture: the non-adversarial patches
    the detector should shrug off."""
    kind = _randint(generator, 0, 2)
    if kind == 0:
        return torch.rand(3, size, size, generator=generator, dtype=torch.float64)
    if kind == 1:
        c = torch.rand(3, 1, 1, generator=generator, dtype=torch.float64)
        return c.expand(3, size, size).clone()
    base = SAND_RGB if bool(torch.rand(1, generator=generator) < 0.5) else GRASS_RGB
    return make_background(size, size, generator, base)


def _occlude(scene: SceneImage, generator: torch.Generator, prob: float) -> SceneImage:
    if prob <= 0 or not scene.annotations or float(torch.rand(1, generator=generator)) >= prob:
        return scene
    ranges = SceneRanges(area_ratio=float(0.15 + 0.25 * torch.rand(1, generator=generator)))
    out = attack_render(scene.pixels, scene.boxes(), random_occluder(generator), ranges, generator)
    return scene.with_pixels(out.image)


def fit_toy_detector(seed: int = 0, steps: int = 600, batch: int = 16, size: int = 64, lr: float = 3e-3,
                     occlusion_prob: float = 0.0) -> ToyDetector:
    """Train the toy detector on freshly generated scenes every step.

    With ``occlusion_prob > 0`` that share of the scenes gets random
    (non-adversarial) patches pasted on the vehicles, which makes the detector
    much harder to attack. The bundled weights use no occlusion.
    """
    torch.manual_seed(seed)
    det = ToyDetector()
    g = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(det.parameters(), lr=lr)
    for step in range(steps):
        scenes = [make_vehicle_scene(g, f"fit_{step}_{i}", size,
                                     base_rgb=SAND_RGB if i % 2 == 0 else GRASS_RGB) for i in range(batch)]
        scenes = [_occlude(s, g, occlusion_prob) for s in scenes]
        x = torch.stack([s.pixels for s in scenes])
        out = det.raw(x)
        obj_t, box_t = _targets(scenes, det, size)
        pos = obj_t > 0
        l_obj = F.binary_cross_entropy_with_logits(out[:, 4], obj_t)
        l_cls = F.binary_cross_entropy_with_logits(out[:, 5][pos], torch.ones_like(out[:, 5][pos]))
        l_box = F.binary_cross_entropy_with_logits(out[:, :4].permute(0, 2, 3, 1)[pos], box_t.permute(0, 2, 3, 1)[pos])
        loss = 5 * l_obj + l_cls + 5 * l_box
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("fit step %d loss %.4f (obj %.4f box %.4f)", step, loss.item(), l_obj.item(), l_box.item())
    det.eval()
    for p in det.parameters():
        p.requires_grad_(False)
    return det


def builtin_weights_path() -> Path:
    return Path(str(resources.files("ema_patch") / "assets" / BUILTIN_WEIGHTS))


def load_builtin_detector(**kwargs) -> ToyDetector:
    return ToyDetector.load(builtin_weights_path(), **kwargs)
