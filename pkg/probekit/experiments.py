"""Scenario definitions and the end-to-end driver.

A run builds the scenario's graph, trains it between scheduled checkpoints,
then fits one probe per probe point at every checkpoint and emits a
``ProbeRecord`` for its train and test error. Model training never looks at
the probes: all probe work happens on features extracted from finished
checkpoints, with random streams of its own.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .checkpoint import Checkpoint, checkpoint_path, load_checkpoint, save_checkpoint
from .datasets import Dataset, gen_separable, load_mnist_dir, split_fractions
from .exceptions import ConfigError, DataError, NumericError
from .graph import (
    ModelGraph,
    OptimizerState,
    Parameters,
    add_auxiliary_head,
    add_skip_concat,
    build_mlp,
    build_mnist_convnet,
    classification_error,
    train_step,
)
from .models.checkpoint import CheckpointMeta
from .models.config import SCENARIOS, ProbeTrainConfig, ScenarioConfig
from .models.records import ProbeRecord, RunSummary
from .probe import Probe, attach_probes, eval_probe, extract_many, train_probe
from .tensor import Rng

logger = logging.getLogger(__name__)

MNIST_TRAIN_ROWS = 60_000
MNIST_MINIBATCH = 64
DATA_ENV = "PROBEKIT_DATA"


def mnist_steps_per_epoch(validation_size: int = 10_000, minibatch: int = MNIST_MINIBATCH) -> int:
    """Minibatches per pass over the MNIST train split left after the validation hold-out."""
    return math.ceil(max(MNIST_TRAIN_ROWS - validation_size, 1) / minibatch)


MNIST_STEPS_PER_EPOCH = mnist_steps_per_epoch()

# sub-stream keys under a run's Rng
_GRAPH, _DATA, _BATCHES, _PROBES = 0, 1, 2, 3


class ScenarioResult(BaseModel):
    """Records plus model-side diagnostics of every run."""

    records: List[ProbeRecord] = Field(default_factory=list)
    summaries: List[RunSummary] = Field(default_factory=list)
    checkpoints: List[str] = Field(default_factory=list)
    model_config = ConfigDict(from_attributes=True)


# ---------- Configuration ----------
def default_config(scenario: str, **overrides) -> ScenarioConfig:
    """Scenario defaults, optionally overridden field by field."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}, expected one of {', '.join(SCENARIOS)}")
    base: Dict[str, object] = {"scenario": scenario}
    if scenario == "untrained32":
        base.update(runs=100, train_steps=0, checkpoint_steps=[0], depth=32, width=128, input_dim=128)
    elif scenario == "mnist":
        try:
            probe = ProbeTrainConfig.model_validate(overrides.get("probe", {}))
        except ValidationError as exc:
            raise ConfigError(f"invalid {scenario} config: {exc}") from exc
        minibatch = overrides.get("minibatch")
        if not isinstance(minibatch, int) or minibatch < 1:
            minibatch = MNIST_MINIBATCH
        per_epoch = mnist_steps_per_epoch(probe.validation_size, minibatch)
        base.update(
            train_steps=10 * per_epoch,
            checkpoint_steps=[0] + [e * per_epoch for e in range(1, 11)],
            minibatch=MNIST_MINIBATCH,
            probe_train_size=10_000,
        )
    else:
        steps = 2000 if scenario == "deep128-bridge" else 5000
        base.update(
            train_steps=steps,
            checkpoint_steps=[0, 500, steps],
            depth=128,
            width=128,
            input_dim=784,
            probe_train_size=10_000,
        )
    base.update(overrides)
    try:
        return ScenarioConfig.model_validate(base)
    except ValidationError as exc:
        raise ConfigError(f"invalid {scenario} config: {exc}") from exc


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    """Parse a JSON scenario config; fields it omits take the scenario defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    try:
        raw = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot read JSON config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object, got {type(raw).__name__}")
    scenario = raw.pop("scenario", None)
    if not isinstance(scenario, str):
        raise ConfigError(f"{path}: missing \"scenario\" field")
    try:
        return default_config(scenario, **raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_fits(config: ScenarioConfig) -> None:
    if config.scenario == "deep128-bridge" and config.bridge_to > config.depth:
        raise ConfigError(f"bridge_to={config.bridge_to} exceeds depth={config.depth}")


# ---------- Graphs and data ----------
def build_scenario_graph(config: ScenarioConfig, rng: Rng) -> ModelGraph:
    """The scenario's model with its interventions (guides or bridge) applied."""
    _check_fits(config)
    scenario = config.scenario
    if scenario == "mnist":
        return build_mnist_convnet(rng)
    classes = 2 if scenario == "untrained32" else 10
    graph = build_mlp(config.depth, config.width, config.alpha, classes, rng, input_dim=config.input_dim)
    if scenario == "deep128-guides":
        for k in range(config.aux_every, config.depth, config.aux_every):
            graph = add_auxiliary_head(graph, f"h{k}", classes, config.aux_weight, rng)
    elif scenario == "deep128-bridge":
        source = "input" if config.bridge_from == 0 else f"h{config.bridge_from}"
        graph = add_skip_concat(graph, source, f"fc{config.bridge_to}", rng)
    return graph


def resolve_data_dir(config: ScenarioConfig) -> Path:
    data_dir = config.data_dir or os.environ.get(DATA_ENV)
    if not data_dir:
        raise DataError(f"no MNIST directory: pass --data or set {DATA_ENV}")
    return Path(data_dir)


def scenario_dataset(config: ScenarioConfig, run_rng: Rng) -> Dataset:
    """Per-run Gaussian task for untrained32, MNIST for every other scenario."""
    if config.scenario == "untrained32":
        return split_fractions(gen_separable(config.n_examples, config.input_dim, run_rng.derive(_DATA)))
    return load_mnist_dir(resolve_data_dir(config), config.probe.validation_size)


def _shape_for(graph: ModelGraph, data: Dataset) -> Dataset:
    shape = graph.input_shape
    if data.inputs.shape[1:] == shape:
        return data
    n = len(data)
    if int(np.prod(data.inputs.shape[1:])) != int(np.prod(shape)):
        raise ConfigError(f"dataset rows {data.inputs.shape[1:]} cannot feed graph input {shape}")
    return Dataset(data.inputs.reshape((n,) + shape), data.labels, data.splits, data.info)


# ---------- Model training ----------
def train_model(
    graph: ModelGraph,
    config: ScenarioConfig,
    train: Dataset,
    rng: Rng,
    summary: RunSummary,
) -> List[Checkpoint]:
    """Train ``graph`` in place and return θ_n at every scheduled step.

    A non-finite loss stops training; the scheduled steps after it receive
    the last finite parameters and ``summary.diverged`` is set.
    """
    schedule = list(config.checkpoint_steps)
    meta = CheckpointMeta(scenario=config.scenario, run=summary.run, seed=summary.seed)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(step, graph.parameters, meta.model_copy(update={"step": step}))

    checkpoints = [snapshot(0)] if schedule and schedule[0] == 0 else []
    pending = [s for s in schedule if s > 0]
    if not pending:
        return checkpoints
    if len(train) == 0:
        raise DataError(f"{config.scenario}: empty training split")

    optimizer = OptimizerState(config.optimizer, graph.parameters)
    trace_every = max(1, config.train_steps // 500)
    batch = config.minibatch
    order: np.ndarray = np.zeros(0, dtype=np.int64)
    cursor = 0
    for step in range(1, config.train_steps + 1):
        if cursor >= len(order):
            order, cursor = rng.permutation(len(train)), 0
        idx = order[cursor : cursor + batch]
        cursor += batch
        try:
            _, loss = train_step(graph, optimizer, train.inputs[idx], train.labels[idx], step=step)
        except NumericError as exc:
            logger.warning("%s run %d diverged at step %d: %s", config.scenario, summary.run, step, exc)
            summary.diverged, summary.diverged_step = True, step
            break
        if step % trace_every == 0 or step == 1:
            summary.loss_trace.append((step, loss))
        if step == pending[0]:
            checkpoints.append(snapshot(step))
            pending.pop(0)
            logger.info("%s run %d: checkpoint at step %d (loss %.4f)", config.scenario, summary.run, step, loss)
            if not pending:
                break
    for step in pending:
        checkpoints.append(snapshot(step))
    return checkpoints


# ---------- Probing ----------
def _point_groups(
    graph: ModelGraph, points: Sequence[str], rows: int, budget_mb: int
) -> List[List[str]]:
    """Consecutive probe points whose features fit ``budget_mb`` together."""
    shapes = graph.output_shapes()
    budget = budget_mb * 1024 * 1024
    groups: List[List[str]] = []
    current: List[str] = []
    seen: set = set()
    used = 0
    for name in points:
        nid = graph.probe_point(name).node_id
        cost = 0 if nid in seen else int(np.prod(shapes[nid])) * 4 * rows
        if current and used + cost > budget:
            groups.append(current)
            current, seen, used = [], set(), 0
            cost = int(np.prod(shapes[nid])) * 4 * rows
        current.append(name)
        seen.add(nid)
        used += cost
    if current:
        groups.append(current)
    return groups


def _probe_splits(config: ScenarioConfig, data: Dataset) -> Tuple[Dataset, Dataset, Dataset]:
    train = data.split("train").head(config.probe_train_size)
    val = data.split("validation").head(config.probe.validation_size)
    test = data.split("test").head(config.probe_test_size)
    for tag, part in (("train", train), ("validation", val), ("test", test)):
        if len(part) == 0:
            raise ConfigError(f"{config.scenario}: the {tag} split is empty, cannot fit probes")
    return train, val, test


def _constant_error(label: int, labels: np.ndarray) -> float:
    return float(np.mean(labels.argmax(axis=1) != label))


def probe_checkpoint(
    graph: ModelGraph,
    parameters: Parameters,
    data: Dataset,
    config: ScenarioConfig,
    run: int,
    step: int,
    rng: Rng,
    warm: Optional[Dict[str, Probe]] = None,
) -> Tuple[List[ProbeRecord], Dict[str, float]]:
    """Records for every probe point at one checkpoint, plus mean activation norms.

    ``warm`` maps point name to the probe fitted at the previous checkpoint;
    it is updated in place when warm starting is on.
    """
    train, val, test = _probe_splits(config, data)
    num_classes = data.num_classes
    points = [p.name for p in graph.probe_points]
    position = {name: i for i, name in enumerate(points)}
    rows = len(train) + len(val) + len(test)
    results: Dict[str, Tuple[Optional[Probe], int, float, float]] = {}
    norms: Dict[str, float] = {}
    # a probe whose fit blows up on non-finite features predicts the majority train class
    majority = int(np.bincount(train.labels.argmax(axis=1), minlength=num_classes).argmax())
    fallback_train = _constant_error(majority, train.labels)
    fallback_test = _constant_error(majority, test.labels)

    for group in _point_groups(graph, points, rows, config.feature_budget_mb):
        f_train = extract_many(graph, parameters, train.inputs, group)
        f_val = extract_many(graph, parameters, val.inputs, group)
        f_test = extract_many(graph, parameters, test.inputs, group)
        probes = attach_probes(graph, group, num_classes)

        def fit(probe: Probe) -> Tuple[Optional[Probe], int, float, float]:
            name = probe.point.name
            start = warm.get(name, probe) if (warm is not None and config.probe.warm_start) else probe
            try:
                fitted, history = train_probe(
                    start,
                    f_train[name],
                    train.labels,
                    f_val[name],
                    val.labels,
                    config.probe,
                    rng.derive(position[name]),
                )
            except NumericError as exc:
                logger.warning("%s run %d step %d %s: %s", config.scenario, run, step, name, exc)
                return (None, exc.epoch or 0, fallback_train, fallback_test)
            return (
                fitted,
                history.epochs_used,
                eval_probe(fitted, f_train[name], train.labels),
                eval_probe(fitted, f_test[name], test.labels),
            )

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                fitted_all = list(pool.map(fit, probes))
        else:
            fitted_all = [fit(p) for p in probes]
        for name, outcome in zip(group, fitted_all):
            results[name] = outcome
            norms[name] = float(np.linalg.norm(f_train[name], axis=1).mean())
            logger.info(
                "%s run %d step %d %-12s train_err=%.4f test_err=%.4f epochs=%d",
                config.scenario, run, step, name, outcome[2], outcome[3], outcome[1],
            )
        del f_train, f_val, f_test

    records: List[ProbeRecord] = []
    for point in graph.probe_points:
        fitted, epochs, train_err, test_err = results[point.name]
        if warm is not None and config.probe.warm_start and fitted is not None:
            warm[point.name] = fitted
        for split, err in (("train", train_err), ("test", test_err)):
            records.append(
                ProbeRecord(
                    scenario=config.scenario,
                    run=run,
                    checkpoint_step=step,
                    probe_point=point.name,
                    layer_index=point.layer_index,
                    split=split,
                    error_rate=err,
                    probe_epochs_used=epochs,
                )
            )
    return records, norms


# ---------- Driver ----------
def _run_once(
    config: ScenarioConfig,
    run: int,
    dataset: Optional[Dataset],
    out_dir: Optional[Path],
) -> Tuple[List[ProbeRecord], RunSummary, List[str]]:
    run_rng = Rng(config.seed).derive(run)
    graph = build_scenario_graph(config, run_rng.derive(_GRAPH))
    data = _shape_for(graph, dataset if dataset is not None else scenario_dataset(config, run_rng))
    summary = RunSummary(scenario=config.scenario, run=run, seed=config.seed)
    logger.info("%s run %d: %r", config.scenario, run, graph)

    checkpoints = train_model(graph, config, data.split("train"), run_rng.derive(_BATCHES), summary)
    saved: List[str] = []
    if config.save_checkpoints and out_dir is not None:
        for ckpt in checkpoints:
            saved.append(str(save_checkpoint(ckpt, checkpoint_path(out_dir, config.scenario, run, ckpt.step))))

    train_part = data.split("train").head(config.probe_train_size)
    records: List[ProbeRecord] = []
    warm: Dict[str, Probe] = {}
    for ckpt in checkpoints:
        summary.model_train_error[ckpt.step] = classification_error(
            graph, train_part.inputs, train_part.labels, ckpt.parameters
        )
        if not config.probes_enabled:
            continue
        recs, norms = probe_checkpoint(
            graph, ckpt.parameters, data, config, run, ckpt.step, run_rng.derive(_PROBES, ckpt.step), warm
        )
        records.extend(recs)
        summary.activation_norms[ckpt.step] = norms
    return records, summary, saved


def execute_scenario(
    config: ScenarioConfig,
    dataset: Optional[Dataset] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> ScenarioResult:
    """Every run of ``config``; ``dataset`` replaces the scenario's own data when given."""
    target = Path(out_dir) if out_dir is not None else Path(config.output_dir)
    if dataset is None and config.scenario != "untrained32":
        dataset = scenario_dataset(config, Rng(config.seed))
    result = ScenarioResult()
    for run in range(config.runs):
        records, summary, saved = _run_once(config, run, dataset, target)
        result.records.extend(records)
        result.summaries.append(summary)
        result.checkpoints.extend(saved)
    return result


def run_scenario(config: ScenarioConfig, dataset: Optional[Dataset] = None) -> List[ProbeRecord]:
    """ProbeRecords for every (run, checkpoint, probe point, split), in that order."""
    return execute_scenario(config, dataset).records


def probe_checkpoints(
    config: ScenarioConfig,
    paths: Dict[int, List[Path]],
    dataset: Optional[Dataset] = None,
) -> List[ProbeRecord]:
    """Probe suite over saved checkpoints (run -> files) without retraining the model."""
    if dataset is None and config.scenario != "untrained32":
        dataset = scenario_dataset(config, Rng(config.seed))
    records: List[ProbeRecord] = []
    for run in sorted(paths):
        run_rng = Rng(config.seed).derive(run)
        graph = build_scenario_graph(config, run_rng.derive(_GRAPH))
        data = _shape_for(graph, dataset if dataset is not None else scenario_dataset(config, run_rng))
        warm: Dict[str, Probe] = {}
        for path in paths[run]:
            ckpt = load_checkpoint(path)
            graph.check_compatible(ckpt.parameters)
            recs, _ = probe_checkpoint(
                graph, ckpt.parameters, data, config, run, ckpt.step, run_rng.derive(_PROBES, ckpt.step), warm
            )
            records.extend(recs)
    return records


def mean_curve(records: Sequence[ProbeRecord], split: str = "test") -> Dict[int, float]:
    """Mean error per layer index across runs and checkpoints in ``records``."""
    sums: Dict[int, List[float]] = {}
    for r in records:
        if r.split == split:
            sums.setdefault(r.layer_index, []).append(r.error_rate)
    return {k: float(np.mean(v)) for k, v in sorted(sums.items())}
