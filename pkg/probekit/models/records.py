"""Probe results and per-run summaries."""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

Split = Literal["train", "test"]

CSV_HEADER = (
    "scenario",
    "run",
    "checkpoint_step",
    "probe_point",
    "layer_index",
    "split",
    "error_rate",
    "probe_epochs_used",
)


class ProbeRecord(BaseModel):
    """Error of one probe at one checkpoint on one split."""

    scenario: str
    run: int = Field(ge=0)
    checkpoint_step: int = Field(ge=0)
    probe_point: str
    layer_index: int = Field(ge=0)
    split: Split
    error_rate: float = Field(ge=0.0, le=1.0)
    probe_epochs_used: int = Field(ge=0)
    model_config = ConfigDict(from_attributes=True, frozen=True)

    @property
    def key(self) -> Tuple[str, int, int, str, str]:
        return (self.scenario, self.run, self.checkpoint_step, self.probe_point, self.split)


class LayerAggregate(BaseModel):
    """Mean probe error across runs for one probe point, with its envelope."""

    probe_point: str
    layer_index: int
    split: Split
    mean: float
    min: float
    max: float
    count: int
    model_config = ConfigDict(from_attributes=True)


class RunSummary(BaseModel):
    """Model-side diagnostics of one run (not part of the CSV schema)."""

    scenario: str
    run: int
    seed: int
    diverged: bool = False
    diverged_step: Optional[int] = None
    model_train_error: Dict[int, float] = Field(default_factory=dict)
    loss_trace: List[Tuple[int, float]] = Field(default_factory=list)
    activation_norms: Dict[int, Dict[str, float]] = Field(default_factory=dict)
    model_config = ConfigDict(from_attributes=True)
