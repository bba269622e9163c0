"""Pydantic v2 models for probekit."""

from .checkpoint import CheckpointMeta
from .config import SCENARIOS, OptimizerConfig, ProbeTrainConfig, ScenarioConfig
from .entropy import ChainSpec, Pmf
from .records import CSV_HEADER, LayerAggregate, ProbeRecord, RunSummary

__all__ = [
    "CheckpointMeta",
    "SCENARIOS",
    "OptimizerConfig",
    "ProbeTrainConfig",
    "ScenarioConfig",
    "ChainSpec",
    "Pmf",
    "CSV_HEADER",
    "LayerAggregate",
    "ProbeRecord",
    "RunSummary",
]
