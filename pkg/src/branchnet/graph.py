"""Network structure: architecture configs, the trunk builder, serialization.

A GraphSpec is an ordered list of LayerNodes wired by name. The reserved
upstream name "input" refers to the network input; no node may use it.
Node evaluation order is the list order, which is a topological order by
construction.

Canonical trunk naming: the stem convolution is conv1, block i contributes
conv{2i} (the 1x1) and conv{2i+1} (the 3x3), shortcut projections are
shortcut{i} and excluded from the numbering, and the post-pool bottleneck
is conv-bn320 (the 24th convolution at the canonical depth). Branch points
are the intersection of {conv17, conv19, conv21, conv22, conv-bn320, fc}
with the nodes present.
"""

from dataclasses import dataclass, field, replace

from . import ops

NODE_KINDS = ("conv", "batchnorm", "relu", "maxpool", "avgpool", "add",
              "fc", "softmax-head", "sigmoid-head")
BRANCH_POINT_NAMES = ("conv17", "conv19", "conv21", "conv22", "conv-bn320", "fc")
INPUT_NAME = "input"

# Committed resolver output (see reports/arch_resolution.txt): the unique
# top-ranked stage composition under the hard constraints, tie-broken by
# lexicographic order per the deterministic ranking rule.
CANONICAL_STAGE_REPEATS = (1, 1, 5, 4)
CANONICAL_STAGE_CHANNELS = ((32, 64), (64, 128), (128, 256), (256, 512))


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: tuple = ()

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r} for {self.name!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class ArchConfig:
    """Constructive description of the trunk family.

    scale_factor shrinks channel widths, the embedding, and the input size
    together; stage repeats are never scaled.
    """

    stem_channels: int = 32
    stage_repeats: tuple = CANONICAL_STAGE_REPEATS
    stage_channels: tuple = CANONICAL_STAGE_CHANNELS
    embedding_dim: int = 320
    num_identities: int = 10_000
    in_channels: int = 3
    input_size: int = 224
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.scale_factor <= 0:
            raise ValueError(f"scale_factor must be positive, got {self.scale_factor}")
        if len(self.stage_repeats) != len(self.stage_channels):
            raise ValueError("stage_repeats and stage_channels lengths differ: "
                             f"{len(self.stage_repeats)} vs {len(self.stage_channels)}")
        if any(r < 1 for r in self.stage_repeats):
            raise ValueError(f"stage repeats must be >= 1, got {self.stage_repeats}")
        if self.num_identities < 2:
            raise ValueError(f"need at least 2 identities, got {self.num_identities}")

    def _scaled(self, width):
        return max(1, round(width * self.scale_factor))

    @property
    def eff_stem_channels(self):
        return self._scaled(self.stem_channels)

    @property
    def eff_stage_channels(self):
        return tuple((self._scaled(b), self._scaled(e)) for b, e in self.stage_channels)

    @property
    def eff_embedding_dim(self):
        return self._scaled(self.embedding_dim)

    @property
    def eff_input_size(self):
        return max(1, round(self.input_size * self.scale_factor))

    @property
    def total_blocks(self):
        return sum(self.stage_repeats)

    @property
    def conv_count(self):
        """Non-shortcut convolutions: stem + two per block + the bottleneck."""
        return 1 + 2 * self.total_blocks + 1

    @classmethod
    def canonical(cls):
        return cls()

    @classmethod
    def desk(cls, num_identities=20, in_channels=1):
        """Quarter-scale configuration for CPU-sized experiments."""
        return cls(num_identities=num_identities, in_channels=in_channels,
                   scale_factor=0.25)

    def to_mapping(self, prefix="arch."):
        m = {
            "stem_channels": self.stem_channels,
            "stage_repeats": ",".join(str(r) for r in self.stage_repeats),
            "stage_channels": ";".join(f"{b},{e}" for b, e in self.stage_channels),
            "embedding_dim": self.embedding_dim,
            "num_identities": self.num_identities,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "scale_factor": self.scale_factor,
        }
        return {prefix + k: str(v) for k, v in m.items()}

    @classmethod
    def from_mapping(cls, mapping, prefix="arch."):
        cfg = cls()
        kwargs = {}
        for key, raw in mapping.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name == "stage_repeats":
                kwargs[name] = tuple(int(p) for p in raw.split(","))
            elif name == "stage_channels":
                kwargs[name] = tuple(tuple(int(x) for x in pair.split(","))
                                     for pair in raw.split(";"))
            elif name == "scale_factor":
                kwargs[name] = float(raw)
            elif name in ("stem_channels", "embedding_dim", "num_identities",
                          "in_channels", "input_size"):
                kwargs[name] = int(raw)
            else:
                raise ValueError(f"unknown architecture key {key!r}")
        return replace(cfg, **kwargs)


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple
    input_shape: tuple  # (c, h, w)
    branch_points: tuple = ()

    def __post_init__(self):
        seen = {}
        for i, node in enumerate(self.nodes):
            if node.name == INPUT_NAME:
                raise ValueError(f"node name {INPUT_NAME!r} is reserved")
            if node.name in seen:
                raise ValueError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src != INPUT_NAME and src not in seen:
                    raise ValueError(
                        f"node {node.name!r} references {src!r} which is not "
                        f"defined earlier in the graph")
            seen[node.name] = i
        object.__setattr__(self, "_index", seen)

    def node(self, name):
        try:
            return self.nodes[self._index[name]]
        except KeyError:
            raise KeyError(f"no node named {name!r}") from None

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"no node named {name!r}") from None

    def __contains__(self, name):
        return name in self._index

    @property
    def conv_layer_names(self):
        """Non-shortcut convolutions in topological order."""
        return tuple(n.name for n in self.nodes
                     if n.kind == "conv" and not n.name.startswith("shortcut"))

    def serialize(self):
        """Line-oriented text form; parse() restores it bit-exactly."""
        lines = [
            "graph input_shape=%s branch_points=%s" % (
                ",".join(str(d) for d in self.input_shape),
                ",".join(self.branch_points))
        ]
        for node in self.nodes:
            parts = [node.name, node.kind]
            for key in sorted(node.attrs):
                parts.append(f"{key}={_format_attr(node.attrs[key])}")
            parts.append("inputs=" + ",".join(node.inputs))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("graph "):
            raise ValueError("graph text must start with a 'graph' header line")
        header = dict(part.split("=", 1) for part in lines[0].split()[1:])
        input_shape = tuple(int(d) for d in header["input_shape"].split(","))
        bp_raw = header.get("branch_points", "")
        branch_points = tuple(p for p in bp_raw.split(",") if p)
        nodes = []
        for line in lines[1:]:
            parts = line.split()
            if len(parts) < 3:
                raise ValueError(f"malformed node line: {line!r}")
            name, kind = parts[0], parts[1]
            attrs = {}
            inputs = ()
            for part in parts[2:]:
                key, _, raw = part.partition("=")
                if key == "inputs":
                    inputs = tuple(p for p in raw.split(",") if p)
                else:
                    attrs[key] = _parse_attr(raw)
            nodes.append(LayerNode(name, kind, attrs, inputs))
        return cls(tuple(nodes), input_shape, branch_points)


def _format_attr(value):
    if isinstance(value, bool):
        return str(int(value))
    return repr(value) if isinstance(value, float) else str(value)


def _parse_attr(raw):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def build_trunk(config: ArchConfig) -> GraphSpec:
    """Materialize the residual identity trunk for a configuration.

    Shapes are tracked while building; any inconsistency (including a
    resolution driven to zero by too many stride-2 stages) is rejected with
    the offending stage named.
    """
    nodes = []
    size = config.eff_input_size
    stem = config.eff_stem_channels

    def check_size(s, where):
        if s < 1:
            raise ValueError(f"non-positive spatial size at {where} "
                             f"(input {config.eff_input_size}, scale {config.scale_factor})")

    nodes.append(LayerNode("conv1", "conv",
                           {"in": config.in_channels, "out": stem, "k": 7,
                            "stride": 2, "pad": 3, "bias": 0},
                           (INPUT_NAME,)))
    size = ops.conv_output_size(size, 7, 2, 3)
    check_size(size, "conv1")
    nodes.append(LayerNode("bn1", "batchnorm", {"ch": stem, "eps": ops.BN_EPS}, ("conv1",)))
    nodes.append(LayerNode("relu1", "relu", {}, ("bn1",)))
    if size % 2 != 0:
        raise ValueError(f"stem output size {size} is odd; maxpool2x2 needs even extents")
    nodes.append(LayerNode("pool1", "maxpool", {"k": 2, "stride": 2}, ("relu1",)))
    size //= 2
    check_size(size, "pool1")

    prev_name = "pool1"
    prev_ch = stem
    block = 0
    for stage, ((bott, expa), repeats) in enumerate(
            zip(config.eff_stage_channels, config.stage_repeats)):
        for j in range(repeats):
            block += 1
            down = stage > 0 and j == 0
            stride = 2 if down else 1
            ca, cb = f"conv{2 * block}", f"conv{2 * block + 1}"
            block_in = prev_name
            nodes.append(LayerNode(ca, "conv",
                                   {"in": prev_ch, "out": bott, "k": 1,
                                    "stride": 1, "pad": 0, "bias": 0},
                                   (block_in,)))
            nodes.append(LayerNode(f"bn{2 * block}", "batchnorm",
                                   {"ch": bott, "eps": ops.BN_EPS}, (ca,)))
            nodes.append(LayerNode(f"relu{2 * block}", "relu", {},
                                   (f"bn{2 * block}",)))
            nodes.append(LayerNode(cb, "conv",
                                   {"in": bott, "out": expa, "k": 3,
                                    "stride": stride, "pad": 1, "bias": 0},
                                   (f"relu{2 * block}",)))
            out_size = ops.conv_output_size(size, 3, stride, 1)
            check_size(out_size, f"stage {stage} block {j} ({cb})")
            nodes.append(LayerNode(f"bn{2 * block + 1}", "batchnorm",
                                   {"ch": expa, "eps": ops.BN_EPS}, (cb,)))
            skip_name = block_in
            if down or prev_ch != expa:
                skip_name = f"shortcut{block}"
                nodes.append(LayerNode(skip_name, "conv",
                                       {"in": prev_ch, "out": expa, "k": 1,
                                        "stride": stride, "pad": 0, "bias": 0},
                                       (block_in,)))
                proj_size = ops.conv_output_size(size, 1, stride, 0)
                if proj_size != out_size:
                    raise ValueError(
                        f"shape mismatch at stage {stage} block {j}: main path "
                        f"{out_size}x{out_size}, shortcut {proj_size}x{proj_size}")
            elif stride != 1:
                raise ValueError(
                    f"shape mismatch at stage {stage} block {j}: stride-2 main "
                    f"path cannot add to an unprojected input")
            nodes.append(LayerNode(f"add{block}", "add", {},
                                   (f"bn{2 * block + 1}", skip_name)))
            nodes.append(LayerNode(f"relu{2 * block + 1}", "relu", {},
                                   (f"add{block}",)))
            prev_name = f"relu{2 * block + 1}"
            prev_ch = expa
            size = out_size

    nodes.append(LayerNode("avgpool", "avgpool", {"global": 1}, (prev_name,)))
    emb = config.eff_embedding_dim
    nodes.append(LayerNode("conv-bn320", "conv",
                           {"in": prev_ch, "out": emb, "k": 1,
                            "stride": 1, "pad": 0, "bias": 1},
                           ("avgpool",)))
    nodes.append(LayerNode("bn320", "batchnorm", {"ch": emb, "eps": ops.BN_EPS},
                           ("conv-bn320",)))
    nodes.append(LayerNode("relu320", "relu", {}, ("bn320",)))
    nodes.append(LayerNode("fc", "fc", {"in": emb, "out": config.num_identities},
                           ("relu320",)))
    nodes.append(LayerNode("softmax", "softmax-head", {}, ("fc",)))

    present = [name for name in BRANCH_POINT_NAMES
               if any(n.name == name for n in nodes)]
    spec = GraphSpec(tuple(nodes), (config.in_channels, config.eff_input_size,
                                    config.eff_input_size), tuple(present))
    return spec


def resolution_trace(graph: GraphSpec):
    """Spatial extents after the stem conv, the pool, and each stride-2 conv."""
    from .accounting import compute_shapes
    shapes = compute_shapes(graph)
    trace = [shapes["conv1"][1], shapes["pool1"][1]]
    for node in graph.nodes:
        if (node.kind == "conv" and node.attrs.get("stride") == 2
                and not node.name.startswith("shortcut") and node.name != "conv1"):
            trace.append(shapes[node.name][1])
    return trace
