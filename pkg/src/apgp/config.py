"""Application config, loaded from YAML or JSON; unknown keys are errors."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .graph import MAX_BACKTRACKS_CAP, NodeKind
from .pipeline import DEFAULT_TEMPERATURES, PipelineOptions
from .provider import ProviderConfig

CONFIG_ENV = "APGP_CONFIG"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PipelineSection(_Strict):
    temperatures: dict[NodeKind, float] = Field(default_factory=dict)
    max_backtracks: int = Field(1, ge=0, le=MAX_BACKTRACKS_CAP)
    generate_mode: Literal["single", "triple"] = "single"
    max_output_tokens: int = Field(1024, ge=1)


class DatasetSection(_Strict):
    path: str
    format: Literal["bbh", "qa"]
    language: Optional[str] = None


class JudgeSection(_Strict):
    method: Literal["exact", "model"] = "model"
    per_task: dict[str, Literal["exact", "model"]] = Field(default_factory=dict)
    model: Optional[str] = None


class AppConfig(_Strict):
    provider: ProviderConfig = Field(default_factory=ProviderConfig)
    templates: Optional[str] = None
    language: str = "en"
    stimulation: bool = True
    pipeline: PipelineSection = Field(default_factory=PipelineSection)
    datasets: list[DatasetSection] = Field(default_factory=list)
    judge: JudgeSection = Field(default_factory=JudgeSection)
    parallelism: int = Field(4, ge=1)
    output_dir: str = "apgp-out"

    def pipeline_options(self, *, stimulation: bool | None = None) -> PipelineOptions:
        temps = dict(DEFAULT_TEMPERATURES)
        temps.update(self.pipeline.temperatures)
        return PipelineOptions(
            model=self.provider.model,
            temperatures=temps,
            max_backtracks=self.pipeline.max_backtracks,
            generate_mode=self.pipeline.generate_mode,
            stimulation=self.stimulation if stimulation is None else stimulation,
            max_output_tokens=self.pipeline.max_output_tokens,
        )


def load_config(path: str | Path | None = None) -> AppConfig:
    """Read ``path``, else ``$APGP_CONFIG``, else return defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return AppConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text("utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    try:
        return AppConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{p}: {exc}") from None
