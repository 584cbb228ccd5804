"""Multi-layer graph convolution: aggregate neighbours, update, classify.

Layer ``k`` computes ``H_k = f([agg(H_{k-1}) | H_{k-1}] @ W_k)`` where the
aggregate excludes the node itself and is the zero vector for isolated nodes.

Neighbour sums run sequentially over neighbours sorted by their current
embedding row (lexicographically, ties by id).  Tied rows are equal, so the
result depends only on the multiset of neighbour embeddings: it is exactly
invariant under node relabeling and under any change outside the
neighbourhood.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .graph import InstanceGraph, order_neighbors
from .numeric import ShapeError, Tape, Var

AGGREGATIONS = ("mean", "sum", "max")
ACTIVATIONS = ("relu", "identity")


def _check_kind(kind: str) -> None:
    if kind not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {kind!r}; expected one of {AGGREGATIONS}")


def aggregate_by_index(h, index, kind: str = "mean") -> np.ndarray:
    """Aggregate rows of ``h`` over each node's neighbours.

    ``index`` is an (n, width) table of neighbour ids padded with ``-1``.
    Sums run sequentially in table order; padding is appended at the end so
    it never perturbs the running sum.
    """
    _check_kind(kind)
    h = np.asarray(h, dtype=np.float64)
    index = np.asarray(index, dtype=np.int64)
    n, d = index.shape[0], h.shape[1]
    if index.shape[1] == 0:
        return np.zeros((n, d))
    valid = index >= 0
    gathered = h[np.where(valid, index, 0)]
    deg = valid.sum(axis=1)
    if kind == "max":
        gathered[~valid] = -np.inf
        out = gathered.max(axis=1)
        out[deg == 0] = 0.0
        return out
    gathered[~valid] = 0.0
    # explicit slot loop: np.add.reduce may switch to pairwise summation
    out = np.zeros((n, d))
    for j in range(index.shape[1]):
        out += gathered[:, j]
    if kind == "mean":
        has = deg > 0
        out[has] /= deg[has, None]
    return out


def value_order(h) -> np.ndarray:
    """Node ids sorted lexicographically by embedding row, ties by id."""
    h = np.asarray(h)
    if h.shape[1] == 0:
        return np.arange(h.shape[0])
    return np.lexsort(h.T[::-1])


def ordered_index(h, graph: InstanceGraph) -> np.ndarray:
    return order_neighbors(graph, value_order(h))


def aggregate(h, graph: InstanceGraph, kind: str = "mean") -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != graph.n:
        raise ShapeError(f"embeddings {h.shape} do not match a graph of {graph.n} nodes")
    return aggregate_by_index(h, ordered_index(h, graph), kind)


def tape_aggregate(tape: Tape, h: Var, index: np.ndarray, kind: str) -> Var:
    value = aggregate_by_index(h.value, index, kind)
    n, d = h.value.shape
    valid = index >= 0
    deg = valid.sum(axis=1)

    if kind == "max":
        gathered = h.value[np.where(valid, index, 0)]
        gathered[~valid] = -np.inf
        has = deg > 0
        winners = index[np.arange(n)[:, None], gathered.argmax(axis=1)] if index.shape[1] else None

        def vjp(g):
            if winners is None:
                return (np.zeros_like(h.value),)
            flat = (winners[has] * d + np.arange(d)).ravel()
            return (np.bincount(flat, weights=g[has].ravel(), minlength=n * d).reshape(n, d),)
    else:
        rows, slots = np.nonzero(valid)
        mix = np.zeros((n, n))
        mix[rows, index[rows, slots]] = 1.0
        if kind == "mean":
            mix /= np.maximum(deg, 1)[:, None]

        def vjp(g):
            return (mix.T @ g,)

    return tape.custom(value, (h,), vjp)


@dataclass
class GcnLayer:
    weight: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] % 2:
            raise ShapeError(f"layer weight must be (2*d_in, d_out), got {self.weight.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0] // 2

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def layer_forward(layer: GcnLayer, h_prev, r) -> np.ndarray:
    h_prev = nm.as_matrix(h_prev)
    r = nm.as_matrix(r)
    if h_prev.shape != r.shape or h_prev.shape[1] != layer.d_in:
        raise ShapeError(
            f"layer expects width {layer.d_in}, got embeddings {h_prev.shape} and aggregate {r.shape}"
        )
    z = nm.matmul(np.concatenate([r, h_prev], axis=1), layer.weight)
    return nm.relu(z) if layer.activation == "relu" else z


@dataclass
class GcnModel:
    layers: list[GcnLayer]
    aggregation: str = "mean"
    seed: int = 0

    def __post_init__(self):
        _check_kind(self.aggregation)
        if not self.layers:
            raise ValueError("a GCN needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ShapeError(f"layer widths do not chain: {a.d_out} -> {b.d_in}")

    @classmethod
    def create(cls, widths, aggregation: str = "mean", seed: int = 0) -> "GcnModel":
        """Glorot-uniform weights for the width chain ``widths``; last layer is linear."""
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least input and output widths, got {widths}")
        rng = nm.make_rng(seed, "gcn-init")
        layers = []
        for k, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
            w = nm.glorot_uniform(rng, 2 * d_in, d_out)
            act = "identity" if k == len(widths) - 2 else "relu"
            layers.append(GcnLayer(w, act))
        return cls(layers, aggregation, seed)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].d_out

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"W{k}": l.weight for k, l in enumerate(self.layers)}

    def copy(self) -> "GcnModel":
        return GcnModel(
            [GcnLayer(l.weight.copy(), l.activation) for l in self.layers], self.aggregation, self.seed
        )


def init_embeddings(graph: InstanceGraph) -> np.ndarray:
    if graph.features is None:
        raise ValueError("graph has no node features")
    return graph.features.copy()


def _check_graph(model: GcnModel, graph: InstanceGraph) -> None:
    if graph.features is None:
        raise ValueError("graph has no node features")
    if graph.features.shape[1] != model.layers[0].d_in:
        raise ShapeError(
            f"graph feature width {graph.features.shape[1]} != model input width {model.layers[0].d_in}"
        )


def tape_forward(model: GcnModel, graph: InstanceGraph, tape: Tape) -> Var:
    """Record the forward pass; returns the class-probability Var."""
    _check_graph(model, graph)
    h = tape.const(init_embeddings(graph))
    for k, layer in enumerate(model.layers):
        w = tape.param(f"W{k}", layer.weight)
        r = tape_aggregate(tape, h, ordered_index(h.value, graph), model.aggregation)
        z = tape.matmul(tape.concat_cols(r, h), w)
        h = tape.relu(z) if layer.activation == "relu" else z
    return tape.softmax_rows(h)


def embeddings(model: GcnModel, graph: InstanceGraph) -> list[np.ndarray]:
    """Per-layer embeddings ``[H0, H1, ..., HK]`` (HK is pre-softmax)."""
    _check_graph(model, graph)
    hs = [init_embeddings(graph)]
    for layer in model.layers:
        r = aggregate(hs[-1], graph, model.aggregation)
        hs.append(layer_forward(layer, hs[-1], r))
    return hs


def forward(model: GcnModel, graph: InstanceGraph) -> np.ndarray:
    return nm.softmax_rows(embeddings(model, graph)[-1])


def loss_and_grads(model: GcnModel, graph: InstanceGraph, mask=None):
    if graph.labels is None:
        raise ValueError("graph has no labels")
    tape = Tape()
    probs = tape_forward(model, graph, tape)
    loss = tape.cross_entropy(probs, graph.labels, mask)
    return float(loss.value), probs.value, nm.backward(tape, loss)


def predict(model: GcnModel, graph: InstanceGraph):
    """Argmax class per node (ties -> lowest index) and the probabilities."""
    _check_graph(model, graph)
    probs = forward(model, graph)
    return probs.argmax(axis=1), probs


# Largest rate at which the training loss stayed non-increasing for the
# two-hidden architecture on the two-cluster checks; 0.1 already oscillates.
STABLE_LEARNING_RATE = 0.05


@dataclass
class TrainConfig:
    iterations: int = 150
    learning_rate: float = STABLE_LEARNING_RATE
    record_time: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")


@dataclass
class TrainState:
    iteration: int = 0
    learning_rate: float = 0.05
    seed: int = 0
    loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


def _accuracy(pred, labels, mask) -> float:
    return float((pred[mask] == labels[mask]).mean())


class DivergenceError(ArithmeticError):
    """Training produced non-finite parameters."""


def train(model: GcnModel, train_graph: InstanceGraph, config: TrainConfig | None = None,
          eval_graph: InstanceGraph | None = None):
    """Full-batch gradient descent on masked cross-entropy.

    Returns a trained copy and its :class:`TrainState`.  Each iteration logs
    the loss and training accuracy measured *before* that iteration's update;
    when ``eval_graph`` is given its accuracy is logged from the same weights.
    """
    config = config or TrainConfig()
    if train_graph.labels is None:
        raise ValueError("training graph has no labels")
    mask = train_graph.train_mask
    if mask is None:
        mask = np.ones(train_graph.n, dtype=bool)
    if not mask.any():
        raise ValueError("training graph has no labeled nodes under its train mask")
    model = model.copy()
    state = TrainState(learning_rate=config.learning_rate, seed=model.seed)
    eval_mask = None
    if eval_graph is not None:
        eval_mask = eval_graph.test_mask if eval_graph.test_mask is not None else np.ones(eval_graph.n, bool)
    start = time.perf_counter()
    for _ in range(config.iterations):
        loss, probs, grads = loss_and_grads(model, train_graph, mask)
        state.loss.append(loss)
        state.train_accuracy.append(_accuracy(probs.argmax(axis=1), train_graph.labels, mask))
        if eval_graph is not None:
            pred, _ = predict(model, eval_graph)
            state.test_accuracy.append(_accuracy(pred, eval_graph.labels, eval_mask))
        for k, layer in enumerate(model.layers):
            layer.weight = layer.weight - config.learning_rate * grads[f"W{k}"]
            if not np.all(np.isfinite(layer.weight)):
                raise DivergenceError(
                    f"non-finite weights in layer {k} at iteration {state.iteration}; lower the learning rate"
                )
        state.iteration += 1
        if config.record_time:
            state.seconds.append(time.perf_counter() - start)
    return model, state


# -- model file ---------------------------------------------------------------------

_MAGIC = "gcnfuse-model 1"


def save_model(model: GcnModel, path) -> Path:
    """Text format: header lines then row-major weights, one ``float.hex`` per line."""
    path = Path(path)
    lines = [
        _MAGIC,
        f"depth {model.depth}",
        "widths " + " ".join(str(w) for w in model.widths),
        f"aggregation {model.aggregation}",
        f"seed {model.seed}",
        "activations " + " ".join(l.activation for l in model.layers),
    ]
    for layer in model.layers:
        lines.extend(float(v).hex() for v in layer.weight.ravel())
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path) -> GcnModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path} is not a gcnfuse model file")
    header = {}
    for line in lines[1:6]:
        key, _, rest = line.partition(" ")
        header[key] = rest
    depth = int(header["depth"])
    widths = [int(w) for w in header["widths"].split()]
    acts = header["activations"].split()
    if len(widths) != depth + 1 or len(acts) != depth:
        raise ValueError(f"{path}: header widths/activations inconsistent with depth {depth}")
    values = [float.fromhex(v) for v in lines[6:]]
    layers, pos = [], 0
    for k in range(depth):
        rows, cols = 2 * widths[k], widths[k + 1]
        chunk = values[pos:pos + rows * cols]
        if len(chunk) != rows * cols:
            raise ValueError(f"{path}: truncated weights for layer {k}")
        layers.append(GcnLayer(np.array(chunk).reshape(rows, cols), acts[k]))
        pos += rows * cols
    if pos != len(values):
        raise ValueError(f"{path}: {len(values) - pos} trailing weight values")
    return GcnModel(layers, header["aggregation"], int(header["seed"]))
