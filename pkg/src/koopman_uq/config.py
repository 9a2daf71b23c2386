"""Pipeline configuration: a versioned JSON document validated by pydantic."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from .errors import ArtifactIOError, ValidationError

CONFIG_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DynamicsConfig(_Section):
    dt: float = Field(0.01, gt=0)
    steps: int = Field(200, ge=1)
    num_traj: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)


class SplitConfig(_Section):
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = Field(0, ge=0)

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")
        return v


class AEConfig(_Section):
    hidden_size: Literal[20, 60, 100] = 60
    lifted_dim: int = Field(20, ge=3)
    rho: float = Field(1e-4, ge=0)
    epochs: int = Field(1000, ge=0)
    optimizer: Literal["lbfgs", "scg"] = "lbfgs"
    patience: int = Field(300, ge=1)
    seed: int = Field(0, ge=0)
    select: Literal["multistep", "reconstruction"] = "multistep"
    select_every: int = Field(50, ge=1)


class KoopmanConfig(_Section):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    tikhonov: float = Field(1e-8, ge=0, alias="lambda")
    rho_max: float | None = Field(0.9999, gt=0, lt=1)
    alpha_target: float = Field(0.1, gt=0, lt=1)
    s_max: int = Field(1_000_000, ge=1)


class EdmdConfig(_Section):
    n_centers: int = Field(100, ge=1)
    fit_on: Literal["all", "train"] = "all"
    seed: int = Field(0, ge=0)
    tikhonov: float = Field(1e-8, ge=0)


class CertifyConfig(_Section):
    slope_lo: float = 0.0
    slope_hi: float = 1.0
    bisection_rtol: float = Field(1e-4, gt=0, lt=1)
    inner_iters: int = Field(500, ge=1)
    probe_points: int = Field(1000, ge=1)
    pairs: int = Field(2000, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _slopes(self):
        if self.slope_lo > self.slope_hi:
            raise ValueError("slope_lo must not exceed slope_hi")
        return self


class InputSignal(_Section):
    kind: Literal["square", "zero"] = "square"
    half_period: float = Field(0.3, gt=0)


class EvalConfig(_Section):
    x0: tuple[float, float] = (-0.1, -0.5)
    input: InputSignal = InputSignal()
    horizon: float = Field(7.0, gt=0)
    disk_times: tuple[float, ...] = (2.1, 2.9, 4.7, 5.5)


class PathsConfig(_Section):
    out_dir: str = "koopman_uq_run"


class PipelineConfig(_Section):
    version: Literal[1] = CONFIG_VERSION
    dynamics: DynamicsConfig = DynamicsConfig()
    split: SplitConfig = SplitConfig()
    ae: AEConfig = AEConfig()
    koopman: KoopmanConfig = KoopmanConfig()
    edmd: EdmdConfig = EdmdConfig()
    certify: CertifyConfig = CertifyConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()

    def with_overrides(self, seed: int | None = None,
                       hidden_size: int | None = None,
                       num_traj: int | None = None,
                       epochs: int | None = None,
                       out_dir: str | None = None) -> "PipelineConfig":
        """Apply command-line flags. ``seed`` replaces every section's seed."""
        d = self.to_dict()
        if seed is not None:
            for sec in ("dynamics", "split", "ae", "edmd", "certify"):
                d[sec]["seed"] = seed
        if hidden_size is not None:
            d["ae"]["hidden_size"] = hidden_size
        if num_traj is not None:
            d["dynamics"]["num_traj"] = num_traj
        if epochs is not None:
            d["ae"]["epochs"] = epochs
        if out_dir is not None:
            d["paths"]["out_dir"] = str(out_dir)
        return parse_config(d)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def parse_config(d: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(d)
    except PydanticValidationError as exc:
        raise ValidationError(f"invalid configuration:\n{exc}") from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(d)


def section_hash(cfg: PipelineConfig, *sections: str) -> str:
    """Stable digest of the named config sections."""
    d = cfg.to_dict()
    blob = json.dumps({s: d[s] for s in sections}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()
