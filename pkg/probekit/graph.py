"""Layer graphs: construction, execution, initialization and model optimizers.

A ``ModelGraph`` is an ordered list of ``NodeSpec`` (the order is the fixed
topological order), the parameter tensors of its affine/conv/loss-head nodes,
the weighted loss heads, and the named probe points that expose activations.
Probes never appear among the loss heads, so no gradient reaches the trunk
from them.
"""

import hashlib
import logging
import math
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import DimensionError, GraphError, InputError, NumericError
from .models.config import OptimizerConfig
from .tensor import (
    Rng,
    Tensor,
    add,
    add_bias,
    concat,
    conv2d,
    cross_entropy,
    flatten,
    leaky_relu,
    matmul,
    maxpool2d,
    scale,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

NodeKind = Literal["input", "affine", "conv", "activation", "pool", "concat", "loss_head"]
Parameters = Dict[str, Dict[str, Tensor]]
Gradients = Dict[str, Dict[str, np.ndarray]]

PARAMETER_NAMES: Dict[str, Tuple[str, ...]] = {
    "affine": ("W", "b"),
    "conv": ("kernel", "bias"),
    "loss_head": ("W", "b"),
}


class NodeSpec(BaseModel):
    """One layer of the graph."""

    id: str
    kind: NodeKind
    params: Dict[str, Any] = Field(default_factory=dict)
    inputs: List[str] = Field(default_factory=list)
    model_config = ConfigDict(from_attributes=True, frozen=True)


class ProbePoint(BaseModel):
    """A named place where an activation is exposed; several names may alias one node."""

    name: str
    node_id: str
    layer_index: int
    model_config = ConfigDict(from_attributes=True, frozen=True)


class LossHead(BaseModel):
    node_id: str
    weight: float = Field(gt=0)
    model_config = ConfigDict(from_attributes=True, frozen=True)


class ModelGraph:
    """DAG of layer nodes plus the parameter set θ_n.

    Parameters
    ----------
    nodes : sequence of NodeSpec
        Must already be in topological order (every input listed earlier).
    parameters : mapping node id -> {name: Tensor}
        Exactly the tensors the affine, conv and loss-head nodes reference.
    loss_heads : sequence of LossHead
        The first head is the model's own classifier.
    probe_points : sequence of ProbePoint
    """

    def __init__(
        self,
        nodes: Sequence[NodeSpec],
        parameters: Parameters,
        loss_heads: Sequence[LossHead],
        probe_points: Sequence[ProbePoint],
    ):
        self.nodes: List[NodeSpec] = list(nodes)
        self.parameters: Parameters = {nid: dict(p) for nid, p in parameters.items()}
        self.loss_heads: List[LossHead] = list(loss_heads)
        self.probe_points: List[ProbePoint] = list(probe_points)
        self.validate()

    # ---------- Structure ----------
    def validate(self) -> None:
        seen: Dict[str, NodeSpec] = {}
        for node in self.nodes:
            if node.id in seen:
                raise GraphError(f"duplicate node id {node.id!r}")
            if node.kind == "input":
                if node.inputs:
                    raise GraphError(f"input node {node.id!r} cannot have inputs")
            elif not node.inputs:
                raise GraphError(f"node {node.id!r} has no inputs")
            for parent in node.inputs:
                if parent not in seen:
                    raise GraphError(
                        f"node {node.id!r} reads {parent!r}, which is unknown or does not precede it"
                    )
            seen[node.id] = node
        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise GraphError(f"expected exactly one input node, found {len(inputs)}")

        expected = {n.id: PARAMETER_NAMES[n.kind] for n in self.nodes if n.kind in PARAMETER_NAMES}
        for nid, names in expected.items():
            have = tuple(sorted(self.parameters.get(nid, {})))
            if have != tuple(sorted(names)):
                raise GraphError(f"node {nid!r} needs parameters {names}, has {have}")
        orphans = sorted(set(self.parameters) - set(expected))
        if orphans:
            raise GraphError(f"parameters without a node: {orphans}")

        if not self.loss_heads:
            raise GraphError("a model graph needs at least one loss head")
        for head in self.loss_heads:
            if seen.get(head.node_id) is None or seen[head.node_id].kind != "loss_head":
                raise GraphError(f"loss head {head.node_id!r} is not a loss_head node")
        names = set()
        for point in self.probe_points:
            if point.node_id not in seen:
                raise GraphError(f"probe point {point.name!r} refers to unknown node {point.node_id!r}")
            if point.name in names:
                raise GraphError(f"duplicate probe point {point.name!r}")
            names.add(point.name)

    @property
    def input_node(self) -> NodeSpec:
        return next(n for n in self.nodes if n.kind == "input")

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.input_node.params["shape"])

    @property
    def main_head(self) -> LossHead:
        return self.loss_heads[0]

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"unknown node id {node_id!r}")

    def index(self, node_id: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise GraphError(f"unknown node id {node_id!r}")

    def probe_point(self, name: str) -> ProbePoint:
        for p in self.probe_points:
            if p.name == name:
                return p
        raise GraphError(f"unknown probe point {name!r}")

    def parameter_count(self) -> int:
        return sum(t.size for group in self.parameters.values() for t in group.values())

    def check_compatible(self, parameters: Parameters) -> None:
        """Raise GraphError unless ``parameters`` has exactly this graph's names and shapes."""
        if sorted(parameters) != sorted(self.parameters):
            raise GraphError(
                f"parameter set does not match graph topology: "
                f"{sorted(set(parameters) ^ set(self.parameters))}"
            )
        for nid, group in self.parameters.items():
            for name, t in group.items():
                other = parameters[nid].get(name)
                if other is None or other.shape != t.shape:
                    got = None if other is None else other.shape
                    raise GraphError(f"parameter {nid}/{name}: expected {t.shape}, got {got}")

    def copy(self) -> "ModelGraph":
        """Structural copy; parameter tensors are immutable and shared."""
        return ModelGraph(self.nodes, self.parameters, self.loss_heads, self.probe_points)

    def output_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Per-example activation shape of every node."""
        probe = np.zeros((1,) + self.input_shape, dtype=np.float32)
        return {nid: t.shape[1:] for nid, t in forward(self, probe).items()}

    def __repr__(self) -> str:
        return (
            f"ModelGraph(nodes={len(self.nodes)}, heads={len(self.loss_heads)}, "
            f"probe_points={len(self.probe_points)}, parameters={self.parameter_count()})"
        )


def parameter_checksum(parameters: Parameters) -> str:
    """sha256 over every parameter's name, shape and raw bytes."""
    digest = hashlib.sha256()
    for nid in sorted(parameters):
        for name in sorted(parameters[nid]):
            t = parameters[nid][name]
            digest.update(f"{nid}/{name}{t.shape}".encode())
            digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()


# ---------- Initialization ----------
def glorot_normal_init(
    fan_in: int, fan_out: int, rng: Rng, shape: Optional[Tuple[int, ...]] = None
) -> Tensor:
    """Weights drawn from N(0, 2 / (fan_in + fan_out)); shape defaults to fan_in×fan_out."""
    if fan_in < 1 or fan_out < 1:
        raise InputError(f"glorot_normal_init: fans must be >= 1, got {fan_in}, {fan_out}")
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(shape or (fan_in, fan_out), std=std))


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


# ---------- Builders ----------
def build_mlp(
    depth: int,
    width: int,
    alpha: float,
    num_classes: int,
    rng: Rng,
    input_dim: int = 128,
) -> ModelGraph:
    """input -> depth × (affine + LeakyReLU(alpha)) -> linear classifier head.

    Probe points ``layer0`` (the input) to ``layer{depth}`` (after each activation).
    """
    if depth < 1 or width < 1:
        raise InputError(f"build_mlp: depth and width must be >= 1, got {depth}, {width}")
    nodes = [NodeSpec(id="input", kind="input", params={"shape": [input_dim]})]
    parameters: Parameters = {}
    points = [ProbePoint(name="layer0", node_id="input", layer_index=0)]
    prev, fan_in = "input", input_dim
    for k in range(1, depth + 1):
        fc, act = f"fc{k}", f"h{k}"
        nodes.append(NodeSpec(id=fc, kind="affine", params={"units": width}, inputs=[prev]))
        nodes.append(
            NodeSpec(id=act, kind="activation", params={"fn": "leaky_relu", "alpha": alpha}, inputs=[fc])
        )
        parameters[fc] = {"W": glorot_normal_init(fan_in, width, rng), "b": zeros(width)}
        points.append(ProbePoint(name=f"layer{k}", node_id=act, layer_index=k))
        prev, fan_in = act, width
    nodes.append(NodeSpec(id="logits", kind="loss_head", params={"classes": num_classes}, inputs=[prev]))
    parameters["logits"] = {"W": glorot_normal_init(fan_in, num_classes, rng), "b": zeros(num_classes)}
    return ModelGraph(nodes, parameters, [LossHead(node_id="logits", weight=1.0)], points)


def build_mnist_convnet(rng: Rng) -> ModelGraph:
    """Two 5×5 same-padded conv blocks, fc 512, linear head; 13 probe points."""
    nodes = [
        NodeSpec(id="input", kind="input", params={"shape": [28, 28, 1]}),
        NodeSpec(id="conv1", kind="conv", params={"stride": 1, "padding": "same"}, inputs=["input"]),
        NodeSpec(id="relu1", kind="activation", params={"fn": "relu"}, inputs=["conv1"]),
        NodeSpec(id="pool1", kind="pool", params={"window": 2, "stride": 2}, inputs=["relu1"]),
        NodeSpec(id="conv2", kind="conv", params={"stride": 1, "padding": "same"}, inputs=["pool1"]),
        NodeSpec(id="relu2", kind="activation", params={"fn": "relu"}, inputs=["conv2"]),
        NodeSpec(id="pool2", kind="pool", params={"window": 2, "stride": 2}, inputs=["relu2"]),
        NodeSpec(id="fc1", kind="affine", params={"units": 512}, inputs=["pool2"]),
        NodeSpec(id="fc1_relu", kind="activation", params={"fn": "relu"}, inputs=["fc1"]),
        NodeSpec(id="logits", kind="loss_head", params={"classes": 10}, inputs=["fc1_relu"]),
    ]
    parameters: Parameters = {
        "conv1": {
            "kernel": glorot_normal_init(5 * 5 * 1, 5 * 5 * 32, rng, shape=(5, 5, 1, 32)),
            "bias": zeros(32),
        },
        "conv2": {
            "kernel": glorot_normal_init(5 * 5 * 32, 5 * 5 * 64, rng, shape=(5, 5, 32, 64)),
            "bias": zeros(64),
        },
        "fc1": {"W": glorot_normal_init(7 * 7 * 64, 512, rng), "b": zeros(512)},
        "logits": {"W": glorot_normal_init(512, 10, rng), "b": zeros(10)},
    }
    aliases = [
        ("input", "input"),
        ("conv1_in", "input"),
        ("conv1_out", "conv1"),
        ("relu1_out", "relu1"),
        ("pool1_out", "pool1"),
        ("conv2_in", "pool1"),
        ("conv2_out", "conv2"),
        ("relu2_out", "relu2"),
        ("pool2_out", "pool2"),
        ("fc1_in", "pool2"),
        ("fc1_preact", "fc1"),
        ("fc1_out", "fc1_relu"),
        ("logits", "logits"),
    ]
    points = [ProbePoint(name=n, node_id=nid, layer_index=i) for i, (n, nid) in enumerate(aliases)]
    return ModelGraph(nodes, parameters, [LossHead(node_id="logits", weight=1.0)], points)


# ---------- Interventions ----------
def add_auxiliary_head(
    graph: ModelGraph,
    node_id: str,
    num_classes: int,
    weight: float,
    rng: Rng,
) -> ModelGraph:
    """Trainable linear classifier whose loss joins the total; its gradient reaches the trunk."""
    if weight <= 0:
        raise InputError(f"auxiliary head weight must be > 0, got {weight}")
    graph.node(node_id)
    head_id = f"aux_{node_id}"
    if any(n.id == head_id for n in graph.nodes):
        raise GraphError(f"node {node_id!r} already has an auxiliary head")
    fan_in = int(np.prod(graph.output_shapes()[node_id]))

    nodes = graph.nodes + [
        NodeSpec(id=head_id, kind="loss_head", params={"classes": num_classes}, inputs=[node_id])
    ]
    parameters = dict(graph.parameters)
    parameters[head_id] = {"W": glorot_normal_init(fan_in, num_classes, rng), "b": zeros(num_classes)}
    heads = graph.loss_heads + [LossHead(node_id=head_id, weight=weight)]
    return ModelGraph(nodes, parameters, heads, graph.probe_points)


def add_skip_concat(graph: ModelGraph, from_id: str, to_id: str, rng: Rng) -> ModelGraph:
    """Feed concat(previous input, from_id output) into the affine layer at to_id.

    The consuming layer's weights are redrawn (Glorot) over the enlarged fan-in.
    """
    if from_id == to_id:
        raise GraphError(f"skip connection from {from_id!r} to itself would create a cycle")
    src, dst = graph.index(from_id), graph.index(to_id)
    if src >= dst:
        raise GraphError(f"skip connection {from_id!r} -> {to_id!r} would create a cycle")
    target = graph.nodes[dst]
    if target.kind not in ("affine", "loss_head"):
        raise GraphError(f"skip target {to_id!r} is a {target.kind} node, expected affine")

    shapes = graph.output_shapes()
    (previous,) = target.inputs
    joint_id = f"{to_id}_concat"
    fan_in = int(np.prod(shapes[previous])) + int(np.prod(shapes[from_id]))
    fan_out = shapes[to_id][-1]

    joint = NodeSpec(id=joint_id, kind="concat", inputs=[previous, from_id])
    rewired = target.model_copy(update={"inputs": [joint_id]})
    nodes = graph.nodes[:dst] + [joint, rewired] + graph.nodes[dst + 1 :]
    parameters = dict(graph.parameters)
    parameters[to_id] = {"W": glorot_normal_init(fan_in, fan_out, rng), "b": zeros(fan_out)}
    logger.debug("skip %s -> %s: fan-in now %d", from_id, to_id, fan_in)
    return ModelGraph(nodes, parameters, graph.loss_heads, graph.probe_points)


# ---------- Execution ----------
def _evaluate(node: NodeSpec, args: List[Tensor], params: Dict[str, Tensor]) -> Tensor:
    kind = node.kind
    if kind in ("affine", "loss_head"):
        return add_bias(matmul(flatten(args[0]), params["W"]), params["b"])
    if kind == "conv":
        return conv2d(
            args[0],
            params["kernel"],
            params["bias"],
            stride=node.params.get("stride", 1),
            padding=node.params.get("padding", "same"),
        )
    if kind == "activation":
        if node.params.get("fn", "relu") == "relu":
            return leaky_relu(args[0], 0.0)
        return leaky_relu(args[0], node.params["alpha"])
    if kind == "pool":
        return maxpool2d(args[0], node.params["window"], node.params["stride"])
    if kind == "concat":
        return concat(flatten(args[0]), flatten(args[1]), axis=1)
    raise GraphError(f"node {node.id!r}: cannot evaluate kind {kind!r}")


def forward(
    graph: ModelGraph,
    batch: Union[np.ndarray, Tensor],
    parameters: Optional[Parameters] = None,
    *,
    until: Optional[str] = None,
    observer: Optional[Callable[[str], None]] = None,
) -> Dict[str, Tensor]:
    """Activation of every node (or every node up to ``until``) in topological order.

    ``parameters`` overrides the graph's own θ (checkpoints, gradient leaves).
    ``observer`` is called with each node id as it is evaluated.
    """
    params = graph.parameters if parameters is None else parameters
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1:] != graph.input_shape:
        raise DimensionError(
            f"node 'input': batch shape {x.shape} does not match input shape {graph.input_shape}"
        )
    acts: Dict[str, Tensor] = {}
    for node in graph.nodes:
        if node.kind == "input":
            acts[node.id] = x
        else:
            try:
                acts[node.id] = _evaluate(node, [acts[i] for i in node.inputs], params.get(node.id, {}))
            except DimensionError as exc:
                raise DimensionError(f"node {node.id!r}: {exc}") from exc
            except KeyError as exc:
                raise GraphError(f"node {node.id!r}: missing parameter {exc}") from exc
        if observer is not None:
            observer(node.id)
        if node.id == until:
            break
    return acts


def backward(
    graph: ModelGraph,
    batch: np.ndarray,
    labels: np.ndarray,
    parameters: Optional[Parameters] = None,
) -> Tuple[float, Gradients]:
    """Total weighted loss over all heads and its gradient for every parameter."""
    params = graph.parameters if parameters is None else parameters
    leaves = {nid: {name: t.trainable() for name, t in group.items()} for nid, group in params.items()}
    acts = forward(graph, batch, leaves)
    total: Optional[Tensor] = None
    for head in graph.loss_heads:
        term = scale(cross_entropy(acts[head.node_id], labels), head.weight)
        total = term if total is None else add(total, term)
    assert total is not None
    total.backward()
    grads: Gradients = {
        nid: {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for name, leaf in group.items()}
        for nid, group in leaves.items()
    }
    return float(total.data), grads


def head_losses(graph: ModelGraph, batch: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """Unweighted cross-entropy of each loss head."""
    acts = forward(graph, batch)
    return {h.node_id: softmax_cross_entropy(acts[h.node_id], labels)[0] for h in graph.loss_heads}


def classification_error(
    graph: ModelGraph,
    inputs: np.ndarray,
    labels: np.ndarray,
    parameters: Optional[Parameters] = None,
    batch_size: int = 512,
) -> float:
    """Error rate of the model's own (first) head."""
    if len(inputs) == 0:
        raise InputError("classification_error: empty input set")
    head = graph.main_head.node_id
    wrong = 0
    for start in range(0, len(inputs), batch_size):
        acts = forward(graph, inputs[start : start + batch_size], parameters, until=head)
        pred = acts[head].data.argmax(axis=1)
        wrong += int(np.sum(pred != labels[start : start + batch_size].argmax(axis=1)))
    return wrong / len(inputs)


# ---------- Optimizers ----------
class OptimizerState:
    """SGD or RMSProp with one accumulator per parameter tensor.

    SGD:     θ <- θ - lr·g
    RMSProp: v <- d·v + (1-d)·g²;  θ <- θ - lr·g / (sqrt(v) + eps)
    """

    def __init__(self, config: OptimizerConfig, parameters: Parameters):
        self.config = config
        self.steps = 0
        self.accumulators: Dict[str, Dict[str, np.ndarray]] = {}
        if config.kind == "rmsprop":
            self.accumulators = {
                nid: {name: np.zeros_like(t.data) for name, t in group.items()}
                for nid, group in parameters.items()
            }

    @property
    def kind(self) -> str:
        return self.config.kind

    def apply(self, parameters: Parameters, grads: Gradients) -> Parameters:
        """New parameter map after one update; untouched inputs stay valid."""
        lr = self.config.learning_rate
        updated: Parameters = {}
        for nid, group in parameters.items():
            updated[nid] = {}
            for name, t in group.items():
                g = grads[nid][name]
                if g.shape != t.shape:
                    raise DimensionError(f"gradient {nid}/{name} {g.shape} does not match {t.shape}")
                if self.kind == "sgd":
                    new = t.data - lr * g
                else:
                    v = self.accumulators[nid][name]
                    if v.shape != t.shape:
                        raise DimensionError(
                            f"accumulator {nid}/{name} {v.shape} does not match {t.shape}"
                        )
                    d = self.config.decay
                    v = d * v + (1.0 - d) * (g * g)
                    self.accumulators[nid][name] = v
                    new = t.data - lr * g / (np.sqrt(v) + self.config.epsilon)
                updated[nid][name] = Tensor(new, dtype=t.data.dtype)
        self.steps += 1
        return updated


def train_step(
    graph: ModelGraph,
    optimizer: OptimizerState,
    batch: np.ndarray,
    labels: np.ndarray,
    step: Optional[int] = None,
) -> Tuple[Parameters, float]:
    """One optimizer update of the graph's parameters; returns (new θ, loss before the update)."""
    loss, grads = backward(graph, batch, labels)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite model loss at step {step}", step=step)
    graph.parameters = optimizer.apply(graph.parameters, grads)
    return graph.parameters, loss
