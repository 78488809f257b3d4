"""Exact cost accounting: shapes, parameter counts, multiply-accumulates.

Costs are reported per sample (batch size one). The headline number is the
multiply-accumulate count of convolutions and fully connected layers; the
doubled convention (one multiply plus one add counted separately) is exposed
alongside as flops2x. Element-wise work (batchnorm, relu, residual adds,
pooling, bias additions) involves no multiply-accumulate chains and is
tallied separately as output-element counts.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import INPUT_NAME, GraphSpec
from .params import param_owner, param_shapes


def compute_shapes(graph: GraphSpec) -> dict:
    """Per-sample output shape of every node, keyed by name.

    Convolutional shapes are (c, h, w); fully connected and head outputs
    are (m,). Includes "input" -> graph.input_shape.
    """
    shapes = {INPUT_NAME: tuple(graph.input_shape)}
    for node in graph.nodes:
        ins = [shapes[src] for src in node.inputs]
        a = node.attrs
        if node.kind == "conv":
            c, h, w = ins[0]
            oh = ops.conv_output_size(h, a["k"], a["stride"], a["pad"])
            ow = ops.conv_output_size(w, a["k"], a["stride"], a["pad"])
            if oh < 1 or ow < 1:
                raise ValueError(f"node {node.name!r} produces empty output "
                                 f"{oh}x{ow} from input {h}x{w}")
            shapes[node.name] = (a["out"], oh, ow)
        elif node.kind in ("batchnorm", "relu"):
            shapes[node.name] = ins[0]
        elif node.kind == "maxpool":
            c, h, w = ins[0]
            if h % 2 or w % 2:
                raise ValueError(f"node {node.name!r} pools odd extents {h}x{w}")
            shapes[node.name] = (c, h // 2, w // 2)
        elif node.kind == "avgpool":
            c, h, w = ins[0]
            shapes[node.name] = (c, 1, 1)
        elif node.kind == "add":
            if ins[0] != ins[1]:
                raise ValueError(f"node {node.name!r} adds mismatched shapes "
                                 f"{ins[0]} and {ins[1]}")
            shapes[node.name] = ins[0]
        elif node.kind == "fc":
            shapes[node.name] = (a["out"],)
        elif node.kind in ("softmax-head", "sigmoid-head"):
            shapes[node.name] = ins[0]
        else:
            raise ValueError(f"cannot size node kind {node.kind!r}")
    return shapes


def count_params(graph: GraphSpec):
    """Returns (per_node, total): learnable element counts by node name."""
    per_node = {}
    for pname, shape in param_shapes(graph).items():
        owner = param_owner(pname)
        per_node[owner] = per_node.get(owner, 0) + int(np.prod(shape))
    return per_node, sum(per_node.values())


@dataclass(frozen=True)
class CostReport:
    per_node_macs: dict
    total_macs: int
    aux_elements: dict

    @property
    def total_flops2x(self):
        return 2 * self.total_macs

    @property
    def total_aux(self):
        return sum(self.aux_elements.values())


def count_flops(graph: GraphSpec) -> CostReport:
    """Per-sample multiply-accumulates plus element-wise side work."""
    shapes = compute_shapes(graph)
    per_node = {}
    aux = {}

    def bump(kind, n):
        aux[kind] = aux.get(kind, 0) + int(n)

    for node in graph.nodes:
        a = node.attrs
        out = shapes[node.name]
        if node.kind == "conv":
            c_out, oh, ow = out
            per_node[node.name] = a["k"] * a["k"] * a["in"] * c_out * oh * ow
            if a.get("bias"):
                bump("bias", c_out * oh * ow)
        elif node.kind == "fc":
            per_node[node.name] = a["in"] * a["out"]
            bump("bias", a["out"])
        elif node.kind == "batchnorm":
            bump("batchnorm", np.prod(out))
        elif node.kind == "relu":
            bump("relu", np.prod(out))
        elif node.kind == "add":
            bump("add", np.prod(out))
        elif node.kind == "maxpool":
            bump("maxpool", np.prod(out))
        elif node.kind == "avgpool":
            c, h, w = shapes[node.inputs[0]]
            bump("avgpool", c * h * w)
        elif node.kind in ("softmax-head", "sigmoid-head"):
            bump("head", np.prod(out))
    return CostReport(per_node, sum(per_node.values()), aux)


def trunk_macs(graph: GraphSpec) -> int:
    return count_flops(graph).total_macs


def branch_trainable_params(graph: GraphSpec, branch_layer: str,
                            num_classes: int) -> int:
    """Learnable elements retrained when a task branch starts at branch_layer.

    The retrained region is every parameter whose owning node has topological
    index >= the branch node's index; the identity head is replaced by a
    num_classes-way head of the same input width.
    """
    if branch_layer not in graph.branch_points:
        raise ValueError(f"{branch_layer!r} is not a branch point; valid points: "
                         + ", ".join(graph.branch_points))
    if num_classes < 2:
        raise ValueError(f"a branch head needs at least 2 classes, got {num_classes}")
    bidx = graph.index(branch_layer)
    total = 0
    for pname, shape in param_shapes(graph).items():
        owner = param_owner(pname)
        if graph.index(owner) < bidx:
            continue
        if owner == "fc":
            emb = graph.node("fc").attrs["in"]
            total += emb * num_classes if pname.endswith("/w") else num_classes
        else:
            total += int(np.prod(shape))
    return total


def suffix_macs(graph: GraphSpec, branch_layer: str, num_classes: int) -> int:
    """Per-sample multiply-accumulates of the nodes from branch_layer on,
    with the identity head replaced by a num_classes-way head."""
    if branch_layer not in graph.branch_points:
        raise ValueError(f"{branch_layer!r} is not a branch point; valid points: "
                         + ", ".join(graph.branch_points))
    bidx = graph.index(branch_layer)
    report = count_flops(graph)
    total = 0
    for name, macs in report.per_node_macs.items():
        if graph.index(name) < bidx:
            continue
        if name == "fc":
            macs = graph.node("fc").attrs["in"] * num_classes
        total += macs
    return total


def format_cost_table(graph: GraphSpec) -> str:
    """Human-readable per-node accounting table with exact totals."""
    shapes = compute_shapes(graph)
    per_node_params, total_params = count_params(graph)
    cost = count_flops(graph)
    lines = []
    header = f"{'node':<12} {'kind':<13} {'output':<16} {'params':>12} {'macs':>14}"
    lines.append(header)
    lines.append("-" * len(header))
    for node in graph.nodes:
        shape = "x".join(str(d) for d in shapes[node.name])
        p = per_node_params.get(node.name, 0)
        m = cost.per_node_macs.get(node.name, 0)
        lines.append(f"{node.name:<12} {node.kind:<13} {shape:<16} {p:>12,} {m:>14,}")
    lines.append("-" * len(header))
    lines.append(f"{'total':<12} {'':<13} {'':<16} {total_params:>12,} "
                 f"{cost.total_macs:>14,}")
    lines.append("")
    lines.append(f"flops (2x convention): {cost.total_flops2x:,}")
    aux = ", ".join(f"{k}={v:,}" for k, v in sorted(cost.aux_elements.items()))
    lines.append(f"element-wise work (not in mac total): {aux}")
    return "\n".join(lines) + "\n"
