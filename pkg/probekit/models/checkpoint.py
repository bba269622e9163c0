"""Checkpoint sidecar metadata."""

from pydantic import BaseModel, ConfigDict, Field


class CheckpointMeta(BaseModel):
    scenario: str = ""
    run: int = Field(0, ge=0)
    seed: int = 0
    step: int = Field(0, ge=0)
    model_config = ConfigDict(from_attributes=True)
