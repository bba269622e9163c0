"""Linear classifier probes over frozen activations.

A probe is softmax(W h + b) fitted on the flattened activation h at one probe
point. Features are materialized as plain numpy arrays before any probe sees
them, so probe training has no path back into the model parameters.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .datasets import Dataset
from .exceptions import DimensionError, InputError, NumericError
from .graph import ModelGraph, OptimizerState, Parameters, ProbePoint, forward
from .models.config import ProbeTrainConfig
from .tensor import Rng, Tensor, add_bias, cross_entropy, matmul

logger = logging.getLogger(__name__)


class ProbeHistory(BaseModel):
    """Per-epoch trace of one probe fit."""

    initial_validation_error: float
    validation_error: List[float] = Field(default_factory=list)
    train_loss: List[float] = Field(default_factory=list)
    best_epoch: int = 0
    model_config = ConfigDict(from_attributes=True)

    @property
    def epochs_used(self) -> int:
        return len(self.validation_error)


class Probe:
    """Linear classifier bound to one probe point.

    ``W`` is d×k (classes × flattened feature size), ``b`` has d entries. When
    ``mean``/``scale`` are set, features are standardized before the affine map.
    """

    def __init__(
        self,
        point: ProbePoint,
        num_classes: int,
        num_features: int,
        W: Optional[np.ndarray] = None,
        b: Optional[np.ndarray] = None,
    ):
        self.point = point
        self.d = num_classes
        self.k = num_features
        self.W = np.zeros((self.d, self.k), np.float32) if W is None else np.asarray(W, np.float32)
        self.b = np.zeros(self.d, np.float32) if b is None else np.asarray(b, np.float32)
        if self.W.shape != (self.d, self.k) or self.b.shape != (self.d,):
            raise DimensionError(f"probe {point.name}: W {self.W.shape} / b {self.b.shape} do not fit d={self.d}, k={self.k}")
        self.mean: Optional[np.ndarray] = None
        self.scale: Optional[np.ndarray] = None
        self.optimizer: Optional[OptimizerState] = None

    @property
    def point_id(self) -> str:
        return self.point.name

    def copy(self) -> "Probe":
        other = Probe(self.point, self.d, self.k, self.W.copy(), self.b.copy())
        other.mean, other.scale = self.mean, self.scale
        return other

    def transform(self, features: np.ndarray) -> np.ndarray:
        if self.mean is None or self.scale is None:
            return features
        return ((features - self.mean) / self.scale).astype(np.float32)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.transform(features) @ self.W.T + self.b

    def predict(self, features: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        out = [self.logits(features[i : i + batch_size]).argmax(axis=1) for i in range(0, len(features), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def __repr__(self) -> str:
        return f"Probe(point={self.point.name!r}, d={self.d}, k={self.k})"


def attach_probes(
    graph: ModelGraph, points: Sequence[str], num_classes: int, rng: Optional[Rng] = None
) -> List[Probe]:
    """One zero-initialized probe per named probe point.

    ``rng`` is accepted for symmetry with the other constructors; zero init draws nothing.
    """
    resolved = [graph.probe_point(name) for name in points]
    shapes = graph.output_shapes()
    return [Probe(p, num_classes, int(np.prod(shapes[p.node_id]))) for p in resolved]


def extract_many(
    graph: ModelGraph,
    parameters: Parameters,
    inputs: np.ndarray,
    points: Sequence[str],
    batch_size: int = 256,
) -> Dict[str, np.ndarray]:
    """Flattened activations for several probe points from one pass over ``inputs``.

    Aliased points (same node) share one array.
    """
    graph.check_compatible(parameters)
    resolved = [graph.probe_point(name) for name in points]
    if not resolved:
        return {}
    last = max(resolved, key=lambda p: graph.index(p.node_id)).node_id
    node_ids = sorted({p.node_id for p in resolved}, key=graph.index)
    chunks: Dict[str, List[np.ndarray]] = {nid: [] for nid in node_ids}
    for start in range(0, len(inputs), batch_size):
        acts = forward(graph, inputs[start : start + batch_size], parameters, until=last)
        for nid in node_ids:
            a = acts[nid].data
            chunks[nid].append(a.reshape(a.shape[0], -1))
    by_node = {nid: np.concatenate(parts) if parts else np.zeros((0, 0), np.float32) for nid, parts in chunks.items()}
    return {p.name: by_node[p.node_id] for p in resolved}


def extract_features(
    graph: ModelGraph,
    parameters: Parameters,
    dataset: Dataset,
    point_id: str,
    batch_size: int = 256,
) -> Tuple[np.ndarray, np.ndarray]:
    """(n×k features, n×d labels) at ``point_id`` under frozen ``parameters``."""
    features = extract_many(graph, parameters, dataset.inputs, [point_id], batch_size)[point_id]
    return features, dataset.labels


def _feature_stats(x: np.ndarray, chunk: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    total = np.zeros(x.shape[1], np.float64)
    sq = np.zeros(x.shape[1], np.float64)
    for i in range(0, len(x), chunk):
        part = x[i : i + chunk].astype(np.float64)
        total += part.sum(axis=0)
        sq += (part * part).sum(axis=0)
    mean = total / len(x)
    var = np.maximum(sq / len(x) - mean * mean, 0.0)
    std = np.sqrt(var)
    # constant features: leave them centered but unscaled
    std[std <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def eval_probe(probe: Probe, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of examples whose argmax prediction (ties -> lowest class) is wrong."""
    if len(features) == 0:
        raise InputError(f"eval_probe: empty evaluation set for {probe.point.name}")
    if features.ndim != 2 or features.shape[1] != probe.k:
        raise DimensionError(f"eval_probe: features {features.shape} do not match probe k={probe.k}")
    if labels.shape != (len(features), probe.d):
        raise DimensionError(f"eval_probe: labels {labels.shape} do not match {len(features)}×{probe.d}")
    predicted = probe.predict(features)
    return float(np.mean(predicted != labels.argmax(axis=1)))


def train_probe(
    probe: Probe,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    config: ProbeTrainConfig,
    rng: Rng,
) -> Tuple[Probe, ProbeHistory]:
    """Minimize softmax cross-entropy over (W, b) with early stopping on validation error.

    Returns a new probe holding the parameters of the best validation epoch.
    """
    if len(train_x) == 0:
        raise InputError(f"train_probe: empty training set for {probe.point.name}")
    if train_x.ndim != 2 or train_x.shape[1] != probe.k:
        raise DimensionError(f"train_probe: features {train_x.shape} do not match probe k={probe.k}")

    work = probe.copy()
    if config.standardize:
        work.mean, work.scale = _feature_stats(train_x)
    else:
        work.mean = work.scale = None
    params = {"probe": {"W": Tensor(work.W.T), "b": Tensor(work.b)}}
    optimizer = OptimizerState(config.optimizer_config(), params)
    work.optimizer = optimizer

    best_err = eval_probe(work, val_x, val_y)
    history = ProbeHistory(initial_validation_error=best_err)
    best_W, best_b = work.W.copy(), work.b.copy()
    stale = 0
    n = len(train_x)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.minibatch):
            idx = order[start : start + config.minibatch]
            xb = Tensor(work.transform(train_x[idx]))
            W, b = params["probe"]["W"].trainable(), params["probe"]["b"].trainable()
            loss = cross_entropy(add_bias(matmul(xb, W), b), train_y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"probe {probe.point.name}: non-finite loss in epoch {epoch}", epoch=epoch)
            loss.backward()
            params = optimizer.apply(params, {"probe": {"W": W.grad, "b": b.grad}})
            loss_sum += value * len(idx)
        work.W = params["probe"]["W"].data.T.copy()
        work.b = params["probe"]["b"].data.copy()

        err = eval_probe(work, val_x, val_y)
        history.train_loss.append(loss_sum / n)
        history.validation_error.append(err)
        logger.debug("probe %s epoch %d: loss=%.6f val_err=%.4f", probe.point.name, epoch, loss_sum / n, err)
        if err < best_err:
            best_err, best_W, best_b = err, work.W.copy(), work.b.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    work.W, work.b = best_W, best_b
    return work, history
