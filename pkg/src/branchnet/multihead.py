"""Shared-trunk multi-head inference.

The trunk runs exactly once per input batch; each task head resumes from
the cached activation at its branch point. Because a head's frozen prefix
holds the very same arrays as the trunk and both run in inference mode,
the cached resume is bitwise identical to running the head standalone.

Bundle layout on disk: a directory with trunk.ckpt, one <task>.ckpt per
head, and heads.txt carrying one line per head:
    task branch_layer num_classes loss
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .accounting import count_flops, suffix_macs
from .engine import forward_pass
from .graph import GraphSpec
from .params import ParamStore, load_checkpoint, save_checkpoint

HEADS_FILE = "heads.txt"
TRUNK_FILE = "trunk.ckpt"


@dataclass(frozen=True)
class HeadSpec:
    task: str
    branch_layer: str
    num_classes: int
    loss: str


@dataclass
class Head:
    spec: HeadSpec
    graph: GraphSpec
    store: ParamStore


@dataclass
class MultiHeadModel:
    trunk_graph: GraphSpec
    trunk_store: ParamStore
    heads: list = field(default_factory=list)

    def add_head(self, spec: HeadSpec, graph: GraphSpec, store: ParamStore):
        if spec.branch_layer not in self.trunk_graph:
            raise ValueError(f"head {spec.task!r} branches at "
                             f"{spec.branch_layer!r}, which the trunk lacks")
        if graph.input_shape != self.trunk_graph.input_shape:
            raise ValueError(f"head {spec.task!r} input shape {graph.input_shape} "
                             f"does not match trunk {self.trunk_graph.input_shape}")
        for i in range(graph.index(spec.branch_layer)):
            if graph.nodes[i] != self.trunk_graph.nodes[i]:
                raise ValueError(f"head {spec.task!r} prefix diverges from the "
                                 f"trunk at node {graph.nodes[i].name!r}")
        self.heads.append(Head(spec, graph, store))


@dataclass
class TaskOutput:
    scores: np.ndarray  # (n, num_classes) probabilities
    labels: np.ndarray  # (n,) argmax class indices


@dataclass
class Prediction:
    identity_logits: np.ndarray
    identity_probs: np.ndarray
    tasks: dict  # task name -> TaskOutput


def predict_all(model: MultiHeadModel, x, stats=None) -> Prediction:
    """Evaluate the trunk once and every head from its cached branch point.

    stats, when given, is a mutable dict whose "trunk_forwards" counter is
    incremented once per call; tests use it to certify the sharing contract.
    """
    if x.ndim != 4 or x.shape[1:] != tuple(model.trunk_graph.input_shape):
        raise ValueError(f"input shape {x.shape} does not match trunk input "
                         f"{model.trunk_graph.input_shape}")
    trunk_acts, _ = forward_pass(model.trunk_graph, model.trunk_store, x,
                                 mode="infer")
    if stats is not None:
        stats["trunk_forwards"] = stats.get("trunk_forwards", 0) + 1

    tasks = {}
    for head in model.heads:
        bidx = head.graph.index(head.spec.branch_layer)
        acts, _ = forward_pass(head.graph, head.store, None, mode="infer",
                               start=bidx, cache=trunk_acts)
        scores = acts[head.graph.nodes[-1].name]
        tasks[head.spec.task] = TaskOutput(scores, scores.argmax(axis=1))
    logits = trunk_acts["fc"]
    return Prediction(logits, ops.softmax(logits), tasks)


def run_head_standalone(head: Head, x) -> np.ndarray:
    """Full end-to-end forward of one head; the bitwise oracle for the
    cached path in predict_all."""
    acts, _ = forward_pass(head.graph, head.store, x, mode="infer")
    return acts[head.graph.nodes[-1].name]


def combined_flops(model: MultiHeadModel):
    """(total, per_head): trunk cost plus each head's suffix beyond it."""
    trunk = count_flops(model.trunk_graph).total_macs
    per_head = {}
    for head in model.heads:
        per_head[head.spec.task] = suffix_macs(
            model.trunk_graph, head.spec.branch_layer, head.spec.num_classes)
    return trunk + sum(per_head.values()), per_head


def save_bundle(dirpath, model: MultiHeadModel):
    os.makedirs(dirpath, exist_ok=True)
    save_checkpoint(os.path.join(dirpath, TRUNK_FILE),
                    model.trunk_graph, model.trunk_store)
    lines = []
    for head in sorted(model.heads, key=lambda h: h.spec.task):
        save_checkpoint(os.path.join(dirpath, f"{head.spec.task}.ckpt"),
                        head.graph, head.store)
        s = head.spec
        lines.append(f"{s.task} {s.branch_layer} {s.num_classes} {s.loss}")
    with open(os.path.join(dirpath, HEADS_FILE), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_bundle(dirpath) -> MultiHeadModel:
    trunk_graph, trunk_store = load_checkpoint(os.path.join(dirpath, TRUNK_FILE))
    model = MultiHeadModel(trunk_graph, trunk_store)
    heads_path = os.path.join(dirpath, HEADS_FILE)
    if not os.path.exists(heads_path):
        raise ValueError(f"bundle {dirpath!r} lacks {HEADS_FILE}")
    with open(heads_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"malformed head line: {line!r}")
            spec = HeadSpec(parts[0], parts[1], int(parts[2]), parts[3])
            graph, store = load_checkpoint(os.path.join(dirpath,
                                                        f"{spec.task}.ckpt"))
            model.add_head(spec, graph, store)
    return model


def format_prediction_lines(ids, prediction: Prediction, heads) -> list:
    """One line per input: id, identity and per-task `task=label:prob`
    fields, then a `<task>_scores=[...]` vector per multilabel head."""
    id_labels = prediction.identity_probs.argmax(axis=1)
    lines = []
    specs = sorted((h.spec for h in heads), key=lambda s: s.task)
    for i, sample_id in enumerate(ids):
        parts = [str(sample_id)]
        parts.append(f"identity={id_labels[i]}:"
                     f"{prediction.identity_probs[i, id_labels[i]]:.6f}")
        for spec in specs:
            out = prediction.tasks[spec.task]
            label = out.labels[i]
            parts.append(f"{spec.task}={label}:{out.scores[i, label]:.6f}")
        for spec in specs:
            if spec.loss == "sigmoid-multilabel":
                vec = ",".join(f"{v:.6f}" for v in prediction.tasks[spec.task].scores[i])
                parts.append(f"{spec.task}_scores=[{vec}]")
        lines.append(" ".join(parts))
    return lines
