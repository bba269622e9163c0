"""Optimizer, probe and scenario configuration models."""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

Scenario = Literal["untrained32", "mnist", "deep128", "deep128-guides", "deep128-bridge"]
SCENARIOS = ("untrained32", "mnist", "deep128", "deep128-guides", "deep128-bridge")


class OptimizerConfig(BaseModel):
    """SGD or RMSProp hyperparameters."""

    kind: Literal["sgd", "rmsprop"] = "rmsprop"
    learning_rate: float = Field(1e-3, gt=0)
    decay: float = Field(0.9, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    model_config = ConfigDict(from_attributes=True, extra="forbid")


class ProbeTrainConfig(BaseModel):
    """How a single probe is fitted and when its training stops."""

    learning_rate: float = Field(1e-3, gt=0)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(5, ge=1)
    minibatch: int = Field(256, ge=1)
    validation_size: int = Field(10_000, ge=1)
    optimizer: Literal["sgd", "rmsprop"] = "rmsprop"
    decay: float = Field(0.9, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    warm_start: bool = False
    standardize: bool = True
    model_config = ConfigDict(from_attributes=True, extra="forbid")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            decay=self.decay,
            epsilon=self.epsilon,
        )


class ScenarioConfig(BaseModel):
    """Everything needed to reproduce one scenario end to end.

    Mirrors the JSON config file accepted by ``probekit run --config``.
    """

    scenario: Scenario
    seed: int = 0
    runs: int = Field(1, ge=1)
    train_steps: int = Field(0, ge=0)
    checkpoint_steps: List[int] = Field(default_factory=lambda: [0])
    probe: ProbeTrainConfig = Field(default_factory=ProbeTrainConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    minibatch: int = Field(64, ge=1)
    output_dir: str = "runs"
    data_dir: Optional[str] = None
    workers: int = Field(1, ge=1)

    # architecture
    depth: int = Field(32, ge=1)
    width: int = Field(128, ge=1)
    alpha: float = Field(0.5, ge=0, le=1)
    aux_every: int = Field(16, ge=1)
    aux_weight: float = Field(1.0, gt=0)
    bridge_from: int = Field(0, ge=0)
    bridge_to: int = Field(64, ge=1)

    # data
    n_examples: int = Field(10_000, ge=10)
    input_dim: int = Field(128, ge=1)
    probe_train_size: Optional[int] = Field(None, ge=1)
    probe_test_size: Optional[int] = Field(None, ge=1)
    feature_budget_mb: int = Field(2048, ge=1)

    save_checkpoints: bool = True
    probes_enabled: bool = True
    model_config = ConfigDict(from_attributes=True, extra="forbid")

    @model_validator(mode="after")
    def _check_schedule(self) -> "ScenarioConfig":
        steps = self.checkpoint_steps
        if not steps:
            raise ValueError("checkpoint_steps must not be empty")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"checkpoint_steps must be strictly increasing, got {steps}")
        if steps[0] < 0 or steps[-1] > self.train_steps:
            raise ValueError(
                f"checkpoint_steps must lie within [0, {self.train_steps}], got {steps}"
            )
        if self.scenario == "untrained32" and steps != [0]:
            raise ValueError("untrained32 is never trained: checkpoint_steps must be [0]")
        if self.scenario == "deep128-bridge" and self.bridge_from >= self.bridge_to:
            raise ValueError("bridge_from must precede bridge_to")
        return self
