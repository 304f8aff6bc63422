"""Clean vs. patched evaluation and report formatting."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from ..attack import generator_for, scene_ranges
from ..config import AttackConfig, EvalConfig
from ..data import SceneImage
from ..detector import DetectionSet, DetectorHandle, filter_by_class
from ..scene import attack_render
from .color import color_difference
from .metrics import map_50_95, normalized_map, per_class_map

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    map_clean: float
    map_patched: float
    normalized_map: float
    delta_e00: float | None
    per_class_ap: dict[str, dict[str, float]] = field(default_factory=dict)
    method: str = "EMA"
    detector: str = "victim"
    n_images: int = 0
    config_hash: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    def table(self) -> str:
        return format_table([self])


def format_table(reports: Sequence[EvalReport]) -> str:
    """One row per method, one normalized-mAP column per detector, then ΔE00."""
    detectors: list[str] = []
    for r in reports:
        if r.detector not in detectors:
            detectors.append(r.detector)
    rows: dict[str, dict] = {}
    for r in reports:
        row = rows.setdefault(r.method, {"dE": r.delta_e00})
        row[r.detector] = r.normalized_map
        if row["dE"] is None:
            row["dE"] = r.delta_e00
    header = ["Method", *detectors, "dE00"]
    body = []
    for method, row in rows.items():
        cells = [method]
        cells += [f"{row[d]:.1f}" if d in row else "-" for d in detectors]
        cells.append("-" if row["dE"] is None else f"{row['dE']:.2f}")
        body.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def num_workers(detector: DetectorHandle | None = None) -> int:
    """Worker cap from ``EMA_NUM_WORKERS``; single-threaded handles get one."""
    if detector is not None and not getattr(detector, "thread_safe", False):
        return 1
    raw = os.environ.get("EMA_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring EMA_NUM_WORKERS=%r (not an integer)", raw)
        return 1


def _run_detector(detector: DetectorHandle, images: Sequence[tuple[torch.Tensor, str]], workers: int) -> list[DetectionSet]:
    def one(item):
        with torch.no_grad():
            return detector.detect(item[0], item[1])

    if workers <= 1:
        return [one(x) for x in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, images))  # map keeps input order


def evaluate(
    patch: torch.Tensor,
    dataset: Sequence[SceneImage],
    detector: DetectorHandle,
    env_image: torch.Tensor | None,
    cfg: AttackConfig,
    eval_cfg: EvalConfig | None = None,
    *,
    config_hash: str | None = None,
) -> EvalReport:
    """Clean and patched detection passes plus the dominant-colour distance.

    Patched scenes reuse the training transform ranges, but draw parameters
    from a stream offset by ``eval_cfg.seed_offset`` so they never coincide
    with training samples. An empty patch (zero pixels) or ``clean_only``
    leaves the scenes untouched.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    eval_cfg = eval_cfg or EvalConfig()
    workers = num_workers(detector)
    clean = _run_detector(detector, [(s.pixels, s.image_id) for s in dataset], workers)
    clean = [filter_by_class(d, cfg.target_class) for d in clean]

    no_op = eval_cfg.clean_only or patch.numel() == 0
    if no_op:
        patched = clean
    else:
        ranges = scene_ranges(cfg)
        images = []
        for i, s in enumerate(dataset):
            if eval_cfg.boxes_source == "detector":
                boxes = [tuple(b) for b in clean[i].boxes.tolist()]
            else:
                boxes = s.boxes(cfg.target_class)
            g = generator_for(cfg.seed + eval_cfg.seed_offset, i)
            with torch.no_grad():
                r = attack_render(s.pixels, boxes, patch.detach().to(torch.float64), ranges, g)
            images.append((r.image, s.image_id))
        patched = _run_detector(detector, images, workers)
        patched = [filter_by_class(d, cfg.target_class) for d in patched]

    gts = [_only_class(s, cfg.target_class) for s in dataset]
    m_clean = map_50_95(clean, gts)
    m_patched = m_clean if no_op else map_50_95(patched, gts)
    norm = normalized_map(m_patched, m_clean)

    de = None
    if env_image is not None and patch.numel() > 0:
        de = color_difference(patch, env_image)

    per_class = {
        str(c): {"clean": clean_ap, "patched": per_class_map(patched, gts).get(c, 0.0)}
        for c, clean_ap in per_class_map(clean, gts).items()
    }
    return EvalReport(
        map_clean=m_clean, map_patched=m_patched, normalized_map=norm, delta_e00=de,
        per_class_ap=per_class, method=eval_cfg.method_name, detector=eval_cfg.detector_name,
        n_images=len(dataset), config_hash=config_hash,
    )


def _only_class(scene: SceneImage, class_id: int) -> SceneImage:
    anns = [a for a in scene.annotations if a.class_id == class_id]
    return SceneImage(scene.image_id, scene.pixels, anns)
