"""Optimization: SGD with momentum, step-decay schedule, branch fine-tuning.

Training mutates a ParamStore in place and returns a TrainLog. Determinism
contract: given identical (graph, initial store, dataset, config), every
run produces bit-identical stores and logs. Minibatch composition at step t
depends only on (config.seed, t), so runs are also resumable.

Branching replaces the identity head with a task head and freezes every
parameter owned by a node before the branch layer. Frozen parameters are
shared with the donor store by reference, which both saves memory and makes
any accidental mutation visible to checksum tests.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .common import derive_rng
from .engine import backward_pass, forward_pass
from .graph import GraphSpec, LayerNode
from .params import ParamStore, batchnorm_nodes, param_owner, param_shapes

LOSS_KINDS = ("softmax", "sigmoid-multilabel")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    lr_decay_factor: float = 4.0
    lr_decay_every: int = 10_000
    momentum_coeff: float = 0.9
    batch_size: int = 400
    init_std: float = 0.1
    max_minibatches: int = 30_000
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.lr_decay_factor, self.lr_decay_every,
               self.batch_size) <= 0:
            raise ValueError("rate, decay factor, decay interval and batch size "
                             "must all be positive")
        if self.init_std < 0 or self.max_minibatches < 0:
            raise ValueError("init_std and max_minibatches must be nonnegative")

    @classmethod
    def desk(cls, **overrides):
        """CPU-sized schedule: small batches, faster decay, bounded run."""
        base = dict(batch_size=32, lr_decay_every=500, max_minibatches=5_000)
        base.update(overrides)
        return cls(**base)

    def to_mapping(self, prefix="train."):
        m = {
            "lr0": self.lr0, "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every,
            "momentum_coeff": self.momentum_coeff,
            "batch_size": self.batch_size, "init_std": self.init_std,
            "max_minibatches": self.max_minibatches, "seed": self.seed,
        }
        return {prefix + k: str(v) for k, v in m.items()}

    @classmethod
    def from_mapping(cls, mapping, prefix="train."):
        kw = {}
        for key, raw in mapping.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name in ("lr0", "lr_decay_factor", "momentum_coeff", "init_std"):
                kw[name] = float(raw)
            elif name in ("lr_decay_every", "batch_size", "max_minibatches", "seed"):
                kw[name] = int(raw)
            else:
                raise ValueError(f"unknown training key {key!r}")
        return cls(**kw)


def lr_at(t: int, config: TrainConfig) -> float:
    """Step decay: lr0 / factor^(number of completed decay intervals)."""
    if t < 0:
        raise ValueError(f"minibatch index must be nonnegative, got {t}")
    return config.lr0 * config.lr_decay_factor ** (-(t // config.lr_decay_every))


def init_params(graph: GraphSpec, config: TrainConfig) -> ParamStore:
    """Fresh store: weights N(0, init_std^2), biases and batchnorm shifts
    zero, batchnorm scales one, velocities zero, everything trainable."""
    store = ParamStore()
    for name, shape in sorted(param_shapes(graph).items()):
        kind = name.rpartition("/")[2]
        if kind == "w":
            rng = derive_rng(config.seed, "init", name)
            arr = rng.normal(0.0, config.init_std, size=shape).astype(np.float32) \
                if config.init_std > 0 else np.zeros(shape, dtype=np.float32)
        elif kind == "gamma":
            arr = np.ones(shape, dtype=np.float32)
        else:  # b, beta
            arr = np.zeros(shape, dtype=np.float32)
        store.arrays[name] = arr
        store.momentum[name] = np.zeros(shape, dtype=np.float32)
        store.trainable[name] = True
    for bn in batchnorm_nodes(graph):
        ch = graph.node(bn).attrs["ch"]
        store.running[bn] = ops.RunningStats(np.zeros(ch, dtype=np.float32),
                                             np.ones(ch, dtype=np.float32), 0)
    return store


def sgd_momentum_step(store: ParamStore, grads: dict, rate: float,
                      momentum_coeff: float):
    """v <- mu*v - rate*g; w <- w + v, applied to trainable arrays only.

    Frozen arrays and their velocities are left untouched even when a
    gradient is supplied for them.
    """
    for name, flag in store.trainable.items():
        if not flag:
            continue
        if name not in grads:
            raise ValueError(f"missing gradient for trainable array {name!r}")
        v = store.momentum[name]
        v *= momentum_coeff
        v -= (rate * grads[name]).astype(v.dtype)
        store.arrays[name] += v


@dataclass
class TrainLog:
    header: dict
    rows: list = field(default_factory=list)  # (index, rate, loss, accuracy)

    def to_text(self) -> str:
        lines = [f"# {k}={v}" for k, v in self.header.items()]
        lines.append("index\trate\tloss\taccuracy")
        for t, rate, loss, acc in self.rows:
            lines.append(f"{t}\t{rate!r}\t{loss!r}\t{acc!r}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())


@dataclass
class Dataset:
    """In-memory labeled samples for one task."""

    inputs: np.ndarray   # (n, c, h, w) float32
    labels: np.ndarray   # (n,) int labels, or (n, m) binary for multilabel

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be (n, c, h, w), got {self.inputs.shape}")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.inputs)


def _batch_indices(n, t, config):
    rng = derive_rng(config.seed, "batch", t)
    return rng.choice(n, size=config.batch_size, replace=n < config.batch_size)


def _loss_and_grad(logits, labels, loss):
    if loss == "softmax":
        value, probs, grad = ops.softmax_cross_entropy(logits, labels)
        acc = float((probs.argmax(axis=1) == np.asarray(labels)).mean())
    elif loss == "sigmoid-multilabel":
        value, scores, grad = ops.sigmoid_multilabel_loss(logits, labels)
        acc = float(((scores >= 0.5) == (np.asarray(labels) >= 0.5)).mean())
    else:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_KINDS}")
    return value, grad, acc


def train(graph: GraphSpec, store: ParamStore, dataset: Dataset,
          config: TrainConfig, loss: str = "softmax",
          train_from: int = 0) -> TrainLog:
    """Minibatch SGD over the dataset; mutates store, returns the log.

    train_from freezes execution semantics, not flags: batchnorm nodes below
    it run in inference mode and no gradients are produced below it. The
    store's trainable flags decide what the optimizer updates; both must
    agree for a correct freeze (make_branch sets them together).
    """
    log = TrainLog(header={**config.to_mapping(prefix=""),
                           "loss": loss, "train_from": train_from})
    n = len(dataset)
    if n == 0 and config.max_minibatches > 0:
        raise ValueError("cannot train on an empty dataset")
    logits_node = "fc"
    for t in range(config.max_minibatches):
        rate = lr_at(t, config)
        idx = _batch_indices(n, t, config)
        xb = dataset.inputs[idx]
        yb = dataset.labels[idx]
        acts, bn_updates = forward_pass(graph, store, xb, mode="train",
                                        train_from=train_from)
        store.running.update(bn_updates)
        value, logit_grad, acc = _loss_and_grad(acts[logits_node], yb, loss)
        if not np.isfinite(value):
            raise ValueError(f"non-finite loss at minibatch {t}; training aborted")
        grads, _ = backward_pass(graph, store, acts, {logits_node: logit_grad},
                                 stop=train_from)
        sgd_momentum_step(store, grads, rate, config.momentum_coeff)
        log.rows.append((t, rate, value, acc))
    return log


def evaluate_accuracy(graph: GraphSpec, store: ParamStore, dataset: Dataset,
                      loss: str = "softmax", batch_size: int = 256) -> float:
    """Inference-mode accuracy: exact-match for softmax heads, element-wise
    agreement for multilabel heads."""
    correct, total = 0.0, 0
    for lo in range(0, len(dataset), batch_size):
        xb = dataset.inputs[lo:lo + batch_size]
        yb = np.asarray(dataset.labels[lo:lo + batch_size])
        acts, _ = forward_pass(graph, store, xb, mode="infer")
        logits = acts["fc"]
        if loss == "softmax":
            hits = (logits.argmax(axis=1) == yb)
        elif loss == "sigmoid-multilabel":
            hits = ((ops.sigmoid(logits) >= 0.5) == (yb >= 0.5))
        else:
            raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_KINDS}")
        correct += float(hits.sum())
        total += hits.size
    if total == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return correct / total


@dataclass
class Branch:
    """A task head sharing the frozen trunk prefix by reference."""

    graph: GraphSpec
    store: ParamStore
    branch_layer: str
    num_classes: int
    loss: str
    trunk_store: ParamStore

    @property
    def branch_index(self):
        return self.graph.index(self.branch_layer)


def _head_graph(trunk: GraphSpec, num_classes: int, loss: str) -> GraphSpec:
    head_kind = "softmax-head" if loss == "softmax" else "sigmoid-head"
    nodes = []
    for node in trunk.nodes:
        if node.kind in ("softmax-head", "sigmoid-head"):
            continue
        if node.kind == "fc":
            nodes.append(LayerNode(node.name, "fc",
                                   {"in": node.attrs["in"], "out": num_classes},
                                   node.inputs))
        else:
            nodes.append(node)
    nodes.append(LayerNode("head", head_kind, {}, (nodes[-1].name,)))
    return GraphSpec(tuple(nodes), trunk.input_shape, trunk.branch_points)


def make_branch(trunk_graph: GraphSpec, trunk_store: ParamStore,
                branch_layer: str, num_classes: int, loss: str = "softmax",
                warm: bool = False, init_std: float = 0.1,
                seed: int = 0) -> Branch:
    """Build a fine-tuning head branching at branch_layer.

    Parameters owned by nodes before the branch layer are shared with the
    trunk store by reference and marked frozen. Layers from the branch on
    are re-initialized (warm=False) or copied (warm=True); the final fc is
    always fresh at the task's width. Running statistics of frozen
    batchnorm nodes are shared; retrained ones restart empty when cold.
    """
    if loss not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_KINDS}")
    if branch_layer not in trunk_graph.branch_points:
        raise ValueError(f"unknown branch layer {branch_layer!r}; valid points: "
                         + ", ".join(trunk_graph.branch_points))
    graph = _head_graph(trunk_graph, num_classes, loss)
    bidx = graph.index(branch_layer)
    store = ParamStore()
    for name, shape in param_shapes(graph).items():
        owner = param_owner(name)
        if graph.index(owner) < bidx:
            store.arrays[name] = trunk_store.arrays[name]
            store.momentum[name] = trunk_store.momentum[name]
            store.trainable[name] = False
            continue
        store.trainable[name] = True
        store.momentum[name] = np.zeros(shape, dtype=np.float32)
        kind = name.rpartition("/")[2]
        if warm and owner != "fc":
            store.arrays[name] = trunk_store.arrays[name].copy()
        elif kind == "w":
            rng = derive_rng(seed, "branch", branch_layer, name)
            store.arrays[name] = rng.normal(0.0, init_std, size=shape) \
                .astype(np.float32) if init_std > 0 \
                else np.zeros(shape, dtype=np.float32)
        elif kind == "gamma":
            store.arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            store.arrays[name] = np.zeros(shape, dtype=np.float32)
    for bn in batchnorm_nodes(graph):
        if graph.index(bn) < bidx:
            store.running[bn] = trunk_store.running[bn]
        elif warm:
            rs = trunk_store.running[bn]
            store.running[bn] = ops.RunningStats(rs.mean.copy(), rs.var.copy(),
                                                 rs.count)
        else:
            ch = graph.node(bn).attrs["ch"]
            store.running[bn] = ops.RunningStats(np.zeros(ch, dtype=np.float32),
                                                 np.ones(ch, dtype=np.float32), 0)
    return Branch(graph, store, branch_layer, num_classes, loss, trunk_store)


def finetune(branch: Branch, dataset: Dataset, config: TrainConfig) -> TrainLog:
    """Train the branch's retrained suffix; the frozen prefix stays bitwise
    intact (batchnorm inference mode, no gradients, no optimizer updates)."""
    return train(branch.graph, branch.store, dataset, config,
                 loss=branch.loss, train_from=branch.branch_index)
