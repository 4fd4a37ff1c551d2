"""Run configuration: a structured, schema-validated document whose defaults
mirror the runtime dataclasses, plus canonical serialization and hashing."""

from __future__ import annotations

import hashlib
import json
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import adapt, itta, synth
from .geometry import WindowConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorruptionSection(_Section):
    extra_sigma: float = 0.0
    drop_prob: float = Field(0.0, ge=0.0, le=1.0)
    bias: float = 0.0

    def build(self) -> synth.Corruption:
        return synth.Corruption(self.extra_sigma, self.drop_prob, self.bias)


class ShiftSegmentSection(_Section):
    start: int = Field(ge=0)
    end: int = Field(gt=0)
    corrupt_2d: CorruptionSection = CorruptionSection()
    corrupt_3d: CorruptionSection = CorruptionSection()

    def build(self) -> synth.ShiftSegment:
        return synth.ShiftSegment(self.start, self.end,
                                  self.corrupt_2d.build(), self.corrupt_3d.build())


class WorldSection(_Section):
    extent: float = 40.0
    points_per_frame: int = Field(4096, gt=0)
    feature_dim: int = Field(16, gt=0)
    prototype_scale: float = 2.0
    noise_sigma_2d: float = 0.25
    noise_sigma_3d: float = 0.25
    sensor_radius: float = 28.0
    counts: Optional[dict] = None


class StreamSection(_Section):
    length: int = Field(400, ge=0)
    heading_noise_sigma: float = 0.0
    pose_noise: Optional[Tuple[float, float]] = None


class WindowsSection(_Section):
    sizes: List[int] = [3]
    voxel_size: float = Field(0.2, gt=0.0)
    alpha: float = Field(0.9, gt=0.0, le=1.0)

    def build(self) -> WindowConfig:
        return WindowConfig(sizes=tuple(self.sizes), voxel_size=self.voxel_size,
                            alpha=self.alpha)


class ModelSection(_Section):
    hidden: List[int] = [32, 32]
    pretrain_steps: int = Field(1500, ge=0)
    pretrain_pool: int = Field(24, gt=0)
    pretrain_lr: float = 1e-2


class OptimizerSection(_Section):
    lr: float = Field(1e-2, gt=0.0)
    weight_decay: float = 0.01
    lambda_s: float = Field(0.99, ge=0.0, lt=1.0)
    lambda_xm: float = Field(0.3, ge=0.0)
    batch_size: int = Field(2, ge=1)
    update_scope: str = "norm_only"


class MethodSection(_Section):
    name: str = "latte"
    mode: str = "softmin"
    pslabel_threshold: float = Field(0.9, ge=0.0, le=1.0)

    @field_validator("name")
    @classmethod
    def _known_method(cls, v: str) -> str:
        if v.split("+")[0] not in adapt.BASE_METHODS:
            raise ValueError(f"unknown method {v!r}")
        return v

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in ("softmin", "paper_literal"):
            raise ValueError(f"unknown mode {v!r}")
        return v


class IttaSection(_Section):
    p_i: float = Field(0.01, ge=0.0, le=1.0)
    tau_in: float = 0.9
    tau_out: float = 0.7
    lambda_p: float = 0.01
    lambda_ac: float = 1.0
    lambda_cls: float = 1.0
    gamma_mg: float = 0.9
    dt_max: int = 10
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    mask_threshold: float = 0.5
    rho_min: int = 5
    rho_max: int = 10
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    bottleneck_dim: int = 16
    head_lr: float = 3e-3
    warmup_iterations: int = Field(2000, ge=0)

    def build(self) -> itta.IttaConfig:
        fields = self.model_dump()
        fields.pop("warmup_iterations")
        return itta.IttaConfig(**fields)


class ServiceSection(_Section):
    host: str = "127.0.0.1"
    port: int = Field(8765, gt=0, lt=65536)
    frames_per_second: float = Field(5.0, gt=0.0)
    live_prompts: str = "hybrid"  # simulated | human | hybrid

    @field_validator("live_prompts")
    @classmethod
    def _known_source(cls, v: str) -> str:
        if v not in ("simulated", "human", "hybrid"):
            raise ValueError(f"unknown live_prompts {v!r}")
        return v


class RunConfig(_Section):
    seed: int = 42
    world: WorldSection = WorldSection()
    shift: List[ShiftSegmentSection] = []
    stream: StreamSection = StreamSection()
    windows: WindowsSection = WindowsSection()
    model: ModelSection = ModelSection()
    optimizer: OptimizerSection = OptimizerSection()
    method: MethodSection = MethodSection()
    itta: IttaSection = IttaSection()
    service: ServiceSection = ServiceSection()

    def world_config(self) -> synth.WorldConfig:
        extra = {}
        if self.world.counts is not None:
            extra["counts"] = {k: int(v) for k, v in self.world.counts.items()}
        return synth.WorldConfig(
            seed=self.seed,
            **extra,
            extent=self.world.extent,
            points_per_frame=self.world.points_per_frame,
            feature_dim=self.world.feature_dim,
            prototype_scale=self.world.prototype_scale,
            noise_sigma2d=self.world.noise_sigma_2d,
            noise_sigma3d=self.world.noise_sigma_3d,
            sensor_radius=self.world.sensor_radius,
        )

    def stream_spec(self) -> synth.StreamSpec:
        schedule = synth.ShiftSchedule(tuple(s.build() for s in self.shift))
        return synth.StreamSpec(
            world=self.world_config(),
            shift=schedule,
            length=self.stream.length,
            heading_noise_sigma=self.stream.heading_noise_sigma,
            pose_noise=tuple(self.stream.pose_noise or ()),
        )

    def model_config_obj(self) -> synth.ModelConfig:
        return synth.ModelConfig(hidden=tuple(self.model.hidden),
                                 lr=self.model.pretrain_lr,
                                 weight_decay=self.optimizer.weight_decay)

    def adapt_config(self) -> adapt.AdaptConfig:
        return adapt.AdaptConfig(
            method=self.method.name,
            batch_size=self.optimizer.batch_size,
            lambda_xm=self.optimizer.lambda_xm,
            lambda_s=self.optimizer.lambda_s,
            lr=self.optimizer.lr,
            update_scope=self.optimizer.update_scope,
            windows=self.windows.build(),
            mode=self.method.mode,
            pslabel_threshold=self.method.pslabel_threshold,
            itta=self.itta.build(),
        )

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True,
                          separators=(",", ": "), indent=2) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_json().encode("utf-8")).hexdigest()


class ConfigError(ValueError):
    """A run configuration that cannot be loaded or validated."""


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return parse_config(raw, source=str(path))


def parse_config(raw: dict, source: str = "<inline>") -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except Exception as exc:
        raise ConfigError(f"invalid config ({source}): {exc}")
