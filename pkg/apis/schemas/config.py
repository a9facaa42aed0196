from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from domain.models import AttestationPolicy, CostModel, ModelShape, PipelineMode

PROJECT_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "default.yaml"

POST_DEFAULTS = {4: {"mu": 2, "post_lr": 0.5}, 8: {"mu": 20, "post_lr": 0.1}}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blocks: int = Field(16, ge=2)
    hidden: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    ffn: int = Field(256, ge=1)
    vocab: int = Field(512, ge=2)

    def to_shape(self) -> ModelShape:
        heads = 1 if self.hidden < 8 else self.heads
        return ModelShape(blocks=self.blocks, hidden=self.hidden, heads=heads, ffn=self.ffn, vocab=self.vocab)


class WatermarkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bits: Literal[4, 8] = 8
    alpha: float = Field(1e-3, ge=0)
    pre_lr: float = Field(1e-5, gt=0)
    projection_lr: float = Field(0.1, gt=0)
    pre_epochs: int = Field(20, ge=1)
    post_epochs: int = Field(40, ge=1)
    mu: Optional[int] = Field(None, ge=1)
    post_lr: Optional[float] = Field(None, ge=0)
    subset_size: int = Field(100, ge=1)
    signature_bits: int = Field(320, ge=0)
    channel_fraction: float = Field(0.4, gt=0, le=1)
    projection_scale: float = Field(1.0, gt=0)
    trigger_count: int = Field(16, ge=1)
    trigger_length: int = Field(32, ge=1)
    holdout_count: int = Field(32, ge=1)
    stages: Literal["two_stage", "pre_only", "post_only"] = "two_stage"
    post_only_budget: int = Field(10, ge=1)
    require_full_wer: bool = True

    @property
    def effective_mu(self) -> int:
        return self.mu if self.mu is not None else POST_DEFAULTS[self.bits]["mu"]

    @property
    def effective_post_lr(self) -> float:
        return self.post_lr if self.post_lr is not None else POST_DEFAULTS[self.bits]["post_lr"]


class PolicyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    interval: int = Field(100, ge=1)
    samples: int = Field(2, ge=1)
    mode: Literal["sequential", "overlapped"] = "overlapped"
    workers: int = Field(2, ge=1)
    early_exit: bool = True
    tokens: int = Field(1000, ge=0)


class CostModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    switch_us: float = Field(20.0, ge=0)
    copy_us_per_kib: float = Field(0.15, ge=0)
    decrypt_us_per_kib: float = Field(0.09, ge=0)
    verify_us_per_mflop: float = Field(4.0, ge=0)
    contention: float = Field(0.6, ge=0, le=1)
    baseline_token_us: float = Field(50.0, gt=0)

    def to_domain(self) -> CostModel:
        return CostModel(**self.model_dump())


class SeedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: int = Field(42, ge=0)
    watermark: int = Field(1234, ge=0)
    trigger: int = Field(2024, ge=0)
    holdout: int = Field(99, ge=0)
    attest: int = Field(7, ge=0)


class PathConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    out_dir: str = "out"
    bundle: str = "model.atlm"
    key_store: str = "keys.atks"
    log: str = "logs/attest.log"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = ModelConfig()
    watermark: WatermarkConfig = WatermarkConfig()
    policy: PolicyConfig = PolicyConfig()
    cost_model: CostModelConfig = CostModelConfig()
    seeds: SeedConfig = SeedConfig()
    paths: PathConfig = PathConfig()

    @model_validator(mode="after")
    def check_policy_fits_model(self) -> "RunConfig":
        if self.policy.samples > self.model.blocks:
            raise ValueError(f"policy samples k={self.policy.samples} exceed block count L={self.model.blocks}")
        if self.model.hidden % self.model.heads and self.model.hidden >= 8:
            raise ValueError(f"hidden size {self.model.hidden} is not divisible by {self.model.heads} heads")
        return self

    def attestation_policy(self) -> AttestationPolicy:
        return AttestationPolicy(
            interval=self.policy.interval,
            samples=self.policy.samples,
            blocks=self.model.blocks,
            mode=PipelineMode(self.policy.mode),
            workers=self.policy.workers,
            early_exit=self.policy.early_exit,
        )


def load_config(path: Path | str | None = None) -> RunConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    with path.open("r", encoding="utf-8") as handle:
        raw = yaml.safe_load(handle) or {}
    return RunConfig.model_validate(raw)


def dump_config(config: RunConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(config.model_dump(mode="json"), handle, sort_keys=False)
