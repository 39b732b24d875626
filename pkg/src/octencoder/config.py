"""Run configuration.  Unknown keys are rejected; ``RunConfig.json_schema()``
publishes the schema that ``--config`` files are validated against."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .encoder import ScheduleEntry
from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BranchSpec(_Strict):
    kind: Literal["vertices", "edge-midpoints", "face-centroids", "cell-centroids"] = "vertices"
    depth: int = Field(6, ge=1, le=20)
    curve: Literal["zorder", "hilbert"] = "zorder"


class BlockSpec(_Strict):
    type: Literal["local", "dilated"] = "local"
    window: int = Field(32, ge=1)
    stride: int = Field(1, ge=1)

    def entry(self) -> ScheduleEntry:
        return ScheduleEntry(self.type, self.window, self.stride if self.type == "dilated" else 1)


def _alternating(n: int, window: int = 32, stride: int = 4) -> list[BlockSpec]:
    return [BlockSpec(type="local", window=window) if i % 2 == 0
            else BlockSpec(type="dilated", window=window, stride=stride) for i in range(n)]


class ModelConfig(_Strict):
    dim: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    schedule: list[BlockSpec] = Field(default_factory=lambda: _alternating(4))
    decoder_schedule: list[BlockSpec] = Field(default_factory=lambda: _alternating(2))
    cpe: bool = True
    cpe_per_block: bool = False
    fusion: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if not self.schedule:
            raise ValueError("schedule must contain at least one block")
        if not self.decoder_schedule:
            raise ValueError("decoder_schedule must contain at least one block")
        return self


class MaeConfig(_Strict):
    enabled: bool = True
    mask_ratio: float = Field(0.6, ge=0.0, lt=1.0)
    lam: float = Field(1.0, ge=0.0)
    chamfer_normalize: bool = False
    pos_coarsen: int = Field(2, ge=0)
    resample_masks: bool = False


class OptimConfig(_Strict):
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = Field(0.0, ge=0.0)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(8, ge=1)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    checkpoint_every: int = Field(0, ge=0)


class FinetuneConfig(_Strict):
    task: Literal["classify", "segment"] = "classify"
    epochs: int = Field(30, ge=0)
    lr: float = Field(1e-3, ge=0.0)
    batch_size: int = Field(10, ge=1)
    freeze_encoder: bool = False
    test_fraction: float = Field(1.0 / 3.0, gt=0.0, lt=1.0)
    target_accuracy: float = Field(0.95, ge=0.0, le=1.0)
    stop_at_target: bool = False


class SynthConfig(_Strict):
    kind: Literal["ellipsoids", "boxes-vs-spheres"] = "ellipsoids"
    n: int = Field(20, ge=1)
    divisions: int = Field(9, ge=1)


class RunConfig(_Strict):
    branches: list[BranchSpec] = Field(default_factory=lambda: [
        BranchSpec(kind="vertices"), BranchSpec(kind="face-centroids")])
    model: ModelConfig = Field(default_factory=ModelConfig)
    mae: MaeConfig = Field(default_factory=MaeConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if not self.branches:
            raise ValueError("at least one octree branch is required")
        return self

    @classmethod
    def json_schema(cls) -> dict:
        return cls.model_json_schema()

    def schedule(self) -> list[ScheduleEntry]:
        return [b.entry() for b in self.model.schedule]

    def decoder_schedule(self) -> list[ScheduleEntry]:
        return [b.entry() for b in self.model.decoder_schedule]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def encoder_signature(self) -> dict:
        """Fields a pretrained encoder must share with a finetuning config."""
        m = self.model
        return {"dim": m.dim, "heads": m.heads, "mlp_ratio": m.mlp_ratio,
                "blocks": len(m.schedule), "cpe": m.cpe, "cpe_per_block": m.cpe_per_block,
                "branches": [b.kind for b in self.branches]}


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if overrides:
        data = _merge(data, overrides)
    return parse_config(data)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def save_resolved(config: RunConfig, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = d / "config.resolved.json"
    p.write_text(config.to_json() + "\n")
    return p
