"""Victim-detector abstraction plus a small differentiable grid detector.

A detector handle exposes two capability levels:

* ``detect(image, image_id)`` returns final (post-NMS) detections and is all
  that evaluation needs. Out-of-process detectors only offer this.
* ``detect_differentiable(image, image_id)`` returns dense pre-NMS candidates
  whose score tensors stay attached to the autograd graph of ``image``.
  Training needs it; handles advertise it with ``supports_gradients``.
"""

from __future__ import annotations

import json
import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from torchvision.ops import batched_nms

from .blob import load_weights, save_weights

CANDIDATE_FLOOR = 0.1
# fixed objectness prior (probability 0.01) added to the objectness logit, so
# a zero input through bias-free weights scores far below any threshold
OBJ_PRIOR_LOGIT = math.log(0.01 / 0.99)


class CapabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_conf: float
    objectness: float
    class_id: int = 0

    @property
    def score(self) -> float:
        return self.class_conf * self.objectness


@dataclass
class DetectionSet:
    """Detections for one image, stored column-wise as tensors."""

    image_id: str
    boxes: torch.Tensor  # (N, 4) x1, y1, x2, y2
    class_conf: torch.Tensor  # (N,)
    objectness: torch.Tensor  # (N,)
    class_ids: torch.Tensor  # (N,) int64

    def __len__(self) -> int:
        return int(self.class_conf.shape[0])

    @property
    def scores(self) -> torch.Tensor:
        return self.class_conf * self.objectness

    @classmethod
    def empty(cls, image_id: str = "", dtype=torch.float64) -> "DetectionSet":
        z = torch.zeros(0, dtype=dtype)
        return cls(image_id, torch.zeros(0, 4, dtype=dtype), z, z.clone(), torch.zeros(0, dtype=torch.int64))

    @classmethod
    def from_detections(cls, image_id: str, dets: Sequence[Detection]) -> "DetectionSet":
        if not dets:
            return cls.empty(image_id)
        return cls(
            image_id,
            torch.tensor([d.box for d in dets], dtype=torch.float64),
            torch.tensor([d.class_conf for d in dets], dtype=torch.float64),
            torch.tensor([d.objectness for d in dets], dtype=torch.float64),
            torch.tensor([d.class_id for d in dets], dtype=torch.int64),
        )

    def detections(self) -> list[Detection]:
        boxes = self.boxes.detach().tolist()
        conf = self.class_conf.detach().tolist()
        obj = self.objectness.detach().tolist()
        cls_ = self.class_ids.tolist()
        return [Detection(tuple(b), c, o, k) for b, c, o, k in zip(boxes, conf, obj, cls_)]

    def select(self, keep: torch.Tensor) -> "DetectionSet":
        return DetectionSet(self.image_id, self.boxes[keep], self.class_conf[keep], self.objectness[keep],
                            self.class_ids[keep])

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "detections": [
                {"box": list(d.box), "class_id": d.class_id, "class_conf": d.class_conf, "objectness": d.objectness}
                for d in self.detections()
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionSet":
        dets = [
            Detection(tuple(float(v) for v in d["box"]), float(d["class_conf"]), float(d["objectness"]),
                      int(d.get("class_id", 0)))
            for d in obj.get("detections", [])
        ]
        return cls.from_detections(str(obj["image_id"]), dets)


def filter_by_class(dets: DetectionSet, class_id: int) -> DetectionSet:
    keep = torch.nonzero(dets.class_ids == class_id, as_tuple=False).flatten()
    return dets.select(keep)


def write_detections_jsonl(path: str | Path, sets: Iterable[DetectionSet]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for s in sets:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    return path


def read_detections_jsonl(path: str | Path) -> list[DetectionSet]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(DetectionSet.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record ({exc})") from None
    return out


class DetectorHandle(Protocol):
    supports_gradients: bool
    thread_safe: bool

    def detect(self, image: torch.Tensor, image_id: str = "") -> DetectionSet: ...

    def detect_differentiable(self, image: torch.Tensor, image_id: str = "") -> DetectionSet: ...


# -- toy detector ---------------------------------------------------------------

class ToyDetector(nn.Module):
    """Single-scale stride-8 grid detector with YOLO-style sigmoid heads.

    Each grid cell predicts one box around a fixed anchor, an objectness score
    and per-class confidences. SiLU activations keep the score surface smooth
    for finite-difference checks.
    """

    stride = 8
    supports_gradients = True
    thread_safe = True

    def __init__(self, num_classes: int = 1, width: int = 16, anchor: float = 16.0,
                 conf_thresh: float = 0.05, nms_iou: float = 0.5, floor: float = CANDIDATE_FLOOR):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.anchor = anchor
        self.conf_thresh = conf_thresh
        self.nms_iou = nms_iou
        self.floor = floor
        w = width
        self.backbone = nn.Sequential(
            nn.Conv2d(3, w, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1), nn.SiLU(),
        )
        self.head = nn.Conv2d(2 * w, 5 + num_classes, 1)
        self.double()

    def raw(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, 5 + C, H/8, W/8) logits (objectness prior included)."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % self.stride or W % self.stride:
            raise ValueError(f"image size {H}x{W} is not divisible by stride {self.stride}")
        out = self.head(self.backbone(images.to(self.head.weight.dtype)))
        prior = torch.zeros(out.shape[1], 1, 1, dtype=out.dtype)
        prior[4] = OBJ_PRIOR_LOGIT
        return out + prior

    def decode(self, out: torch.Tensor, image_hw: tuple[int, int]):
        """Returns per-image flattened (boxes, obj, cls) tensors."""
        B, _, gh, gw = out.shape
        s = self.stride
        gy, gx = torch.meshgrid(torch.arange(gh, dtype=out.dtype), torch.arange(gw, dtype=out.dtype), indexing="ij")
        t = torch.sigmoid(out)
        cx = (gx + 2 * t[:, 0] - 0.5) * s
        cy = (gy + 2 * t[:, 1] - 0.5) * s
        bw = self.anchor * (2 * t[:, 2]) ** 2
        bh = self.anchor * (2 * t[:, 3]) ** 2
        H, W = image_hw
        boxes = torch.stack([
            (cx - bw / 2).clamp(0, W), (cy - bh / 2).clamp(0, H),
            (cx + bw / 2).clamp(0, W), (cy + bh / 2).clamp(0, H),
        ], dim=-1).reshape(B, -1, 4)
        obj = t[:, 4].reshape(B, -1)
        cls = t[:, 5:].permute(0, 2, 3, 1).reshape(B, -1, self.num_classes)
        return boxes, obj, cls

    def dense(self, image: torch.Tensor):
        """All cell predictions for one ``(3, H, W)`` image, differentiable."""
        out = self.raw(image[None])
        boxes, obj, cls = self.decode(out, tuple(image.shape[-2:]))
        return boxes[0], obj[0], cls[0]

    def _flatten(self, image_id, boxes, obj, cls) -> DetectionSet:
        n, c = cls.shape
        cls_ids = torch.arange(c).repeat(n)
        return DetectionSet(
            image_id,
            boxes.repeat_interleave(c, dim=0),
            cls.reshape(-1),
            obj.repeat_interleave(c),
            cls_ids,
        )

    def detect_differentiable(self, image: torch.Tensor, image_id: str = "") -> DetectionSet:
        """Pre-NMS candidates whose ``conf * obj`` reaches the floor."""
        boxes, obj, cls = self.dense(image)
        allc = self._flatten(image_id, boxes, obj, cls)
        keep = torch.nonzero(allc.scores.detach() >= self.floor, as_tuple=False).flatten()
        return allc.select(keep)

    @torch.no_grad()
    def detect(self, image: torch.Tensor, image_id: str = "") -> DetectionSet:
        boxes, obj, cls = self.dense(image.detach())
        allc = self._flatten(image_id, boxes, obj, cls)
        sel = allc.select(torch.nonzero(allc.scores >= self.conf_thresh, as_tuple=False).flatten())
        pos = sel.boxes[:, 2:] > sel.boxes[:, :2]
        sel = sel.select(torch.nonzero(pos.all(dim=1), as_tuple=False).flatten())
        if len(sel) == 0:
            return sel
        keep = batched_nms(sel.boxes.float(), sel.scores.float(), sel.class_ids, self.nms_iou)
        return sel.select(keep)

    # weights io
    def save(self, path: str | Path) -> Path:
        return save_weights(path, dict(self.state_dict()), kind="toy_detector",
                            num_classes=self.num_classes, width=self.width, anchor=self.anchor)

    @classmethod
    def load(cls, path: str | Path, **kwargs) -> "ToyDetector":
        header, tensors = load_weights(path)
        if header.get("kind") != "toy_detector":
            raise ValueError(f"{path}: not toy detector weights")
        det = cls(num_classes=int(header["num_classes"]), width=int(header["width"]),
                  anchor=float(header["anchor"]), **kwargs)
        det.load_state_dict(tensors)
        det.eval()
        for p in det.parameters():
            p.requires_grad_(False)
        return det


class CommandDetector:
    """Out-of-process detector: runs ``argv + [image_png]`` per image.

    The command must print one detection-dump JSON object (the JSONL record
    format) on stdout. No gradients are available through this handle.
    """

    supports_gradients = False
    thread_safe = True

    def __init__(self, argv: Sequence[str], timeout: float = 120.0):
        self.argv = list(argv)
        self.timeout = timeout

    def detect(self, image: torch.Tensor, image_id: str = "") -> DetectionSet:
        arr = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).round().astype(np.uint8)
        with tempfile.TemporaryDirectory() as tmp:
            png = Path(tmp) / f"{image_id or 'image'}.png"
            Image.fromarray(arr, mode="RGB").save(png)
            proc = subprocess.run(self.argv + [str(png)], capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"detector command failed ({proc.returncode}): {proc.stderr.strip()[:500]}")
        line = next((ln for ln in proc.stdout.splitlines() if ln.strip()), None)
        if line is None:
            raise RuntimeError("detector command printed nothing")
        dets = DetectionSet.from_json(json.loads(line))
        dets.image_id = image_id
        return dets

    def detect_differentiable(self, image, image_id=""):
        raise CapabilityError("command detectors return no gradients; training needs an in-process detector")
