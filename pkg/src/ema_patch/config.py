"""Run configuration: validated pydantic models stored as YAML."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

PROMPT_PRESETS = {
    "desert": "desert, sand, camouflage",
    "grassland": "grass, camouflage, black",
}


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


def _ordered(name: str, lo: float, hi: float) -> None:
    if lo > hi:
        raise ValueError(f"{name} lower bound {lo} exceeds upper bound {hi}")


class AttackConfig(_Model):
    learning_rate: float = Field(0.005, gt=0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(400, ge=0)
    linf_bound: float = Field(0.6, gt=0)
    lambda_tv: float = Field(0.1, ge=0)
    inference_steps: int = Field(20, ge=1)
    guidance_scale: float = Field(6.5, gt=0)
    prompt: str = PROMPT_PRESETS["desert"]
    rotation_range: tuple[float, float] = (-20.0, 20.0)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    noise_std: float = Field(0.0, ge=0)
    area_ratio: float = Field(0.3, gt=0, le=1)
    seed: int = 0
    tau: float = Field(1.0, gt=0)
    patch_size: int = Field(32, ge=2)
    diffusion_steps: int = Field(1000, ge=1)
    schedule_kind: Literal["linear", "cosine"] = "linear"
    start_timestep: Optional[int] = Field(None, ge=0)
    init_mode: Literal["background_sample", "predictor_sample"] = "background_sample"
    export: Literal["best", "final"] = "best"
    target_class: int = 0
    boxes_source: Literal["ground_truth", "detector"] = "ground_truth"
    det_floor: float = Field(0.1, ge=0, lt=1)
    checkpoint_every: int = Field(50, ge=0)

    @field_validator("prompt")
    @classmethod
    def _expand_preset(cls, v: str) -> str:
        if v.startswith("preset:"):
            name = v.split(":", 1)[1].strip()
            if name not in PROMPT_PRESETS:
                raise ValueError(f"unknown prompt preset {name!r}; known: {sorted(PROMPT_PRESETS)}")
            return PROMPT_PRESETS[name]
        return v

    @model_validator(mode="after")
    def _ranges(self):
        _ordered("rotation_range", *self.rotation_range)
        _ordered("contrast_range", *self.contrast_range)
        _ordered("brightness_range", *self.brightness_range)
        if self.contrast_range[0] <= 0:
            raise ValueError("contrast_range must be positive")
        if self.start_timestep is not None and self.start_timestep > self.diffusion_steps:
            raise ValueError("start_timestep exceeds diffusion_steps")
        if self.guidance_scale > 1.0 and not self.prompt.strip():
            raise ValueError("prompt must be non-empty when guidance_scale > 1")
        return self


class DataConfig(_Model):
    train_manifest: str
    eval_manifest: Optional[str] = None
    environment_images: list[str] = Field(default_factory=list)
    fail_fast: bool = True


class DetectorConfig(_Model):
    kind: Literal["toy", "command", "python"] = "toy"
    weights: str = "builtin"
    argv: list[str] = Field(default_factory=list)
    target: Optional[str] = None  # "module:factory" for kind=python
    options: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "command" and not self.argv:
            raise ValueError("command detector needs a non-empty argv")
        if self.kind == "python" and not self.target:
            raise ValueError("python detector needs target 'module:factory'")
        return self


class PredictorConfig(_Model):
    kind: Literal["palette", "linear", "none", "python"] = "palette"
    target_rgb: Optional[tuple[float, float, float]] = None
    strength: float = Field(0.08, ge=0, le=1)
    weights: Optional[str] = None
    target: Optional[str] = None
    options: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "linear" and not self.weights:
            raise ValueError("linear predictor needs a weights file")
        if self.kind == "python" and not self.target:
            raise ValueError("python predictor needs target 'module:factory'")
        return self


class EvalConfig(_Model):
    clean_only: bool = False
    seed_offset: int = 1000
    boxes_source: Literal["ground_truth", "detector"] = "ground_truth"
    method_name: str = "EMA"
    detector_name: str = "victim"


class RunConfig(_Model):
    attack: AttackConfig = Field(default_factory=AttackConfig)
    data: DataConfig
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = "runs/latest"

    def hashable(self) -> dict:
        d = self.model_dump(mode="json")
        d.pop("output_dir", None)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.hashable(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` holds one line per offending field."""

    def __init__(self, messages: list[str]):
        self.messages = messages
        super().__init__("; ".join(messages))


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: invalid YAML ({exc})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path


def resolve(path: str, base: Path) -> Path:
    p = Path(path).expanduser()
    return p if p.is_absolute() else (base / p)
