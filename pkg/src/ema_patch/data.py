"""Scene images, annotations and dataset manifests.

A manifest is either a JSON file::

    {"images": [{"path": "img_000.png", "image_id": "img_000",
                 "boxes": [{"x1": 4, "y1": 6, "x2": 20, "y2": 18, "class_id": 0}]}]}

or a directory where every image has a same-stem ``.json`` sidecar holding
``{"image_id": ..., "boxes": [...]}``. Relative paths resolve against the
manifest's directory. Images may be PNG/JPEG (8-bit) or ``.npy`` float arrays
``(H, W, 3)`` in ``[0, 1]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".npy"}


@dataclass(frozen=True)
class Annotation:
    box: tuple[float, float, float, float]
    class_id: int = 0


@dataclass
class SceneImage:
    image_id: str
    pixels: torch.Tensor  # (3, H, W) in [0, 1]
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def hw(self) -> tuple[int, int]:
        return int(self.pixels.shape[-2]), int(self.pixels.shape[-1])

    def boxes(self, class_id: int | None = None) -> list[tuple[float, float, float, float]]:
        return [a.box for a in self.annotations if class_id is None or a.class_id == class_id]

    def with_pixels(self, pixels: torch.Tensor) -> "SceneImage":
        return SceneImage(self.image_id, pixels, list(self.annotations))


class ImageReadError(OSError):
    pass


def read_image(path: str | Path) -> torch.Tensor:
    """Load an image file as float64 ``(3, H, W)``."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".npy":
            arr = np.load(path).astype(np.float64)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from None
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageReadError(f"{path}: expected an RGB image, got array of shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).contiguous()


def write_image(path: str | Path, pixels: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hwc = pixels.detach().double().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    if path.suffix.lower() == ".npy":
        np.save(path, hwc)
    else:
        Image.fromarray(np.round(hwc * 255).astype(np.uint8), mode="RGB").save(path)
    return path


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    image_id: str
    boxes: tuple[Annotation, ...]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def load(self) -> list[SceneImage]:
        return [SceneImage(e.image_id, read_image(e.path), list(e.boxes)) for e in self.entries]


class ManifestError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid manifest:\n  " + "\n  ".join(self.errors))


def _image_size(path: Path) -> tuple[int, int]:
    if path.suffix.lower() == ".npy":
        arr = np.load(path, mmap_mode="r")
        return int(arr.shape[1]), int(arr.shape[0])
    with Image.open(path) as im:
        return im.size


def _parse_entry(raw: dict, base: Path, where: str, errors: list[str], warnings: list[str]) -> ManifestEntry | None:
    try:
        rel = raw["path"]
    except (KeyError, TypeError):
        errors.append(f"{where}: missing 'path'")
        return None
    path = (base / rel) if not Path(rel).is_absolute() else Path(rel)
    if not path.exists():
        errors.append(f"{where}: image {path} does not exist")
        return None
    image_id = str(raw.get("image_id") or path.stem)
    try:
        W, H = _image_size(path)
    except (OSError, ValueError, UnidentifiedImageError) as exc:
        errors.append(f"{where}: unreadable image {path} ({exc})")
        return None
    anns = []
    for k, b in enumerate(raw.get("boxes", [])):
        try:
            x1, y1, x2, y2 = (float(b[key]) for key in ("x1", "y1", "x2", "y2"))
            cid = int(b.get("class_id", 0))
        except (KeyError, TypeError, ValueError):
            errors.append(f"{where}: box {k} malformed: {b!r}")
            continue
        cx1, cy1 = min(max(x1, 0.0), W), min(max(y1, 0.0), H)
        cx2, cy2 = min(max(x2, 0.0), W), min(max(y2, 0.0), H)
        if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
            msg = f"{where}: box {k} {[x1, y1, x2, y2]} clamped to image bounds {W}x{H}"
            warnings.append(msg)
            log.warning(msg)
        if cx2 <= cx1 or cy2 <= cy1:
            errors.append(f"{where}: box {k} has no area after clamping")
            continue
        anns.append(Annotation((cx1, cy1, cx2, cy2), cid))
    return ManifestEntry(path, image_id, tuple(anns))


def load_manifest(path: str | Path, fail_fast: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file or sidecar directory.

    Entries come back sorted by ``image_id``. Malformed entries are collected;
    with ``fail_fast`` any error raises :class:`ManifestError`, otherwise the
    bad entries are dropped and listed in ``errors``.
    """
    path = Path(path)
    errors: list[str] = []
    warnings: list[str] = []
    entries: list[ManifestEntry] = []
    if path.is_dir():
        for side in sorted(path.glob("*.json")):
            imgs = [p for p in path.glob(side.stem + ".*") if p.suffix.lower() in IMAGE_SUFFIXES]
            if not imgs:
                continue
            try:
                raw = json.loads(side.read_text())
            except json.JSONDecodeError as exc:
                errors.append(f"{side.name}: invalid JSON ({exc})")
                continue
            raw = dict(raw, path=imgs[0].name)
            e = _parse_entry(raw, path, side.name, errors, warnings)
            if e is not None:
                entries.append(e)
    elif path.is_file():
        try:
            doc = json.loads(path.read_text())
            items = doc["images"] if isinstance(doc, dict) else doc
        except (json.JSONDecodeError, KeyError) as exc:
            raise ManifestError([f"{path}: not a manifest ({exc})"]) from None
        for i, raw in enumerate(items):
            e = _parse_entry(raw, path.parent, f"{path.name}[{i}]", errors, warnings)
            if e is not None:
                entries.append(e)
    else:
        raise ManifestError([f"{path}: no such file or directory"])
    ids = [e.image_id for e in entries]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        errors.append(f"duplicate image_id(s): {dupes}")
    if errors and fail_fast:
        raise ManifestError(errors)
    entries.sort(key=lambda e: e.image_id)
    return DatasetManifest(entries, errors, warnings)


def write_manifest(path: str | Path, scenes: Sequence[SceneImage], image_dir: str | Path | None = None,
                   suffix: str = ".png") -> Path:
    """Write scenes to image files plus a JSON manifest next to them."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent
    items = []
    for sc in scenes:
        img_path = image_dir / f"{sc.image_id}{suffix}"
        write_image(img_path, sc.pixels)
        items.append({
            "path": str(img_path.relative_to(path.parent)) if img_path.is_relative_to(path.parent) else str(img_path),
            "image_id": sc.image_id,
            "boxes": [dict(zip(("x1", "y1", "x2", "y2"), a.box), class_id=a.class_id) for a in sc.annotations],
        })
    path.write_text(json.dumps({"images": items}, indent=2) + "\n")
    return path
