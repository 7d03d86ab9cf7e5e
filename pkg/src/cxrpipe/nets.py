"""Network graphs: a declarative layer DAG evaluated by the engine, builders
for the U-Net segmenter and the four reduced-scale classifier families, and a
binary checkpoint format with bit-exact round trips.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor

CHECKPOINT_MAGIC = b"CXGM"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("conv2d", "conv_transpose2d", "maxpool2d", "avgpool2d", "global_avgpool",
               "batchnorm2d", "relu", "concat", "add", "linear", "softmax")

CLASSIFIER_FAMILIES = ("fire", "residual", "inception", "dense")


@dataclass
class LayerNode:
    """One layer in the graph: a unique tap name, a kind, the names of its
    input nodes, and kind-specific attributes."""

    name: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)   # name -> Tensor (trainable)
    buffers: dict = field(default_factory=dict)  # name -> ndarray (running stats)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ModelGraph:
    """Ordered set of parameterized layers with named activation taps.

    Nodes are listed in evaluation order; the implicit node "input" is the
    network input. `logits_name` identifies the pre-softmax node used for
    saliency and head replacement.
    """

    def __init__(self, nodes: list[LayerNode], in_channels: int,
                 logits_name: str | None = None, meta: dict | None = None):
        self.nodes = nodes
        self.in_channels = in_channels
        self.logits_name = logits_name
        self.meta = dict(meta or {})
        names = set(["input"])
        for node in self.nodes:
            if node.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {node.kind!r}")
            if node.name in names:
                raise ValueError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in names:
                    raise ValueError(f"node {node.name!r} references undefined input {src!r}")
            names.add(node.name)
        self._names = names

    # ------------------------------------------------------------- structure

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def last_conv_name(self) -> str:
        """Default saliency tap: the last layer of kind conv2d. Normalization
        and activation are separate layers here, so this is the raw
        convolution output; pass an explicit tap name for anything else."""
        for n in reversed(self.nodes):
            if n.kind == "conv2d":
                return n.name
        raise ValueError("graph has no convolutional layer")

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for node in self.nodes:
            for pname, t in node.params.items():
                out.append((f"{node.name}.{pname}", t))
        return out

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Parameters and buffers, in declared topological order."""
        out = []
        for node in self.nodes:
            for pname, t in node.params.items():
                out.append((f"{node.name}.{pname}", t.data))
            for bname, arr in node.buffers.items():
                out.append((f"{node.name}.{bname}", arr))
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [arr.copy() for _, arr in self.state_items()]

    def restore(self, arrays: list[np.ndarray]):
        items = self.state_items()
        if len(arrays) != len(items):
            raise ValueError("snapshot length mismatch")
        for (_, dst), src in zip(items, arrays):
            dst[...] = src

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_params())

    # ------------------------------------------------------------- evaluation

    def forward(self, x, train: bool = False, taps=(), inject: dict | None = None):
        """Evaluate the graph. Returns the output tensor, or (output, taps
        dict) when tap names are requested. `inject` overrides named node
        outputs with given activations (used by diagnostics)."""
        if not isinstance(x, Tensor):
            arr = np.asarray(x)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float32)
            x = engine.tensor(arr)
        if x.data.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        div = self.meta.get("spatial_divisor", 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"input spatial dims {x.shape[2:]} must be divisible by {div}")
        acts: dict[str, Tensor] = {"input": x}
        for node in self.nodes:
            if inject is not None and node.name in inject:
                val = inject[node.name]
                acts[node.name] = val if isinstance(val, Tensor) else engine.tensor(np.asarray(val))
                continue
            acts[node.name] = self._eval(node, acts, train)
        out = acts[self.output_name]
        if taps:
            missing = [t for t in taps if t not in acts]
            if missing:
                raise KeyError(f"unknown tap layer(s): {missing}")
            return out, {t: acts[t] for t in taps}
        return out

    def _eval(self, node: LayerNode, acts: dict, train: bool) -> Tensor:
        kind = node.kind
        a = node.attrs
        src = [acts[s] for s in node.inputs]
        if kind == "conv2d":
            return engine.conv2d(src[0], node.params["w"], node.params["b"],
                                 stride=a["stride"], padding=a["padding"])
        if kind == "conv_transpose2d":
            return engine.conv_transpose2d(src[0], node.params["w"], node.params["b"],
                                           stride=a["stride"], padding=a.get("padding", 0))
        if kind == "batchnorm2d":
            return engine.batchnorm2d(src[0], node.params["gamma"], node.params["beta"],
                                      node.buffers["running_mean"], node.buffers["running_var"],
                                      train=train, momentum=a["momentum"], eps=a["eps"])
        if kind == "relu":
            return engine.relu(src[0])
        if kind == "maxpool2d":
            return engine.maxpool2d(src[0], a["k"], a["stride"])
        if kind == "avgpool2d":
            return engine.avgpool2d(src[0], a["k"], a["stride"])
        if kind == "global_avgpool":
            return engine.global_avgpool(src[0])
        if kind == "concat":
            return engine.concat(src, axis=1)
        if kind == "add":
            return engine.add(src[0], src[1])
        if kind == "linear":
            return engine.linear(src[0], node.params["w"], node.params["b"])
        if kind == "softmax":
            return engine.softmax(src[0], axis=a["axis"])
        raise ValueError(f"unknown layer kind {kind!r}")

    # ---------------------------------------------------------- serialization

    def to_config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "logits_name": self.logits_name,
            "meta": self.meta,
            "nodes": [{"name": n.name, "kind": n.kind, "inputs": list(n.inputs),
                       "attrs": n.attrs} for n in self.nodes],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelGraph":
        nodes = [LayerNode(name=n["name"], kind=n["kind"], inputs=list(n["inputs"]),
                           attrs=dict(n["attrs"])) for n in cfg["nodes"]]
        graph = cls(nodes, in_channels=cfg["in_channels"],
                    logits_name=cfg.get("logits_name"), meta=cfg.get("meta"))
        graph._allocate(np.random.default_rng(0), init=False)
        return graph

    def _allocate(self, rng: np.random.Generator, init: bool = True):
        """Create parameter/buffer arrays; He-uniform init when init=True."""
        for node in self.nodes:
            a = node.attrs
            if node.kind == "conv2d":
                shape = (a["out_ch"], a["in_ch"], a["k"], a["k"])
                fan_in = a["in_ch"] * a["k"] * a["k"]
            elif node.kind == "conv_transpose2d":
                shape = (a["in_ch"], a["out_ch"], a["k"], a["k"])
                fan_in = a["in_ch"] * a["k"] * a["k"]
            elif node.kind == "linear":
                shape = (a["out_features"], a["in_features"])
                fan_in = a["in_features"]
            elif node.kind == "batchnorm2d":
                c = a["ch"]
                node.params = {"gamma": Tensor(np.ones(c, dtype=np.float32), requires_grad=True),
                               "beta": Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)}
                node.buffers = {"running_mean": np.zeros(c, dtype=np.float32),
                                "running_var": np.ones(c, dtype=np.float32)}
                continue
            else:
                continue
            w = _he_uniform(rng, shape, fan_in) if init else np.zeros(shape, dtype=np.float32)
            bias_len = shape[0] if node.kind != "conv_transpose2d" else a["out_ch"]
            node.params = {"w": Tensor(w, requires_grad=True),
                           "b": Tensor(np.zeros(bias_len, dtype=np.float32), requires_grad=True)}

    def init_params(self, seed: int = 0):
        self._allocate(np.random.default_rng([abs(int(seed)), 0x6E65]), init=True)
        return self


# ------------------------------------------------------------------ builders

class _GraphBuilder:
    def __init__(self, in_channels: int):
        self.nodes: list[LayerNode] = []
        self.in_channels = in_channels
        self.prev = "input"

    def _push(self, name, kind, inputs, **attrs):
        self.nodes.append(LayerNode(name=name, kind=kind, inputs=list(inputs), attrs=attrs))
        self.prev = name
        return name

    def conv(self, name, in_ch, out_ch, k, stride=1, padding=0, src=None):
        return self._push(name, "conv2d", [src or self.prev],
                          in_ch=in_ch, out_ch=out_ch, k=k, stride=stride, padding=padding)

    def tconv(self, name, in_ch, out_ch, k, stride, src=None):
        return self._push(name, "conv_transpose2d", [src or self.prev],
                          in_ch=in_ch, out_ch=out_ch, k=k, stride=stride, padding=0)

    def bn(self, name, ch, src=None):
        return self._push(name, "batchnorm2d", [src or self.prev], ch=ch, momentum=0.1, eps=1e-5)

    def relu(self, name, src=None):
        return self._push(name, "relu", [src or self.prev])

    def maxpool(self, name, k=2, stride=2, src=None):
        return self._push(name, "maxpool2d", [src or self.prev], k=k, stride=stride)

    def avgpool(self, name, k=2, stride=2, src=None):
        return self._push(name, "avgpool2d", [src or self.prev], k=k, stride=stride)

    def gap(self, name, src=None):
        return self._push(name, "global_avgpool", [src or self.prev])

    def concat(self, name, srcs):
        return self._push(name, "concat", srcs)

    def add(self, name, a, b):
        return self._push(name, "add", [a, b])

    def linear(self, name, in_features, out_features, src=None):
        return self._push(name, "linear", [src or self.prev],
                          in_features=in_features, out_features=out_features)

    def softmax(self, name, axis, src=None):
        return self._push(name, "softmax", [src or self.prev], axis=axis)

    def conv_bn_relu(self, stem, in_ch, out_ch, k=3, padding=1, src=None):
        self.conv(f"{stem}_conv", in_ch, out_ch, k, padding=padding, src=src)
        self.bn(f"{stem}_bn", out_ch)
        return self.relu(f"{stem}_relu")


@dataclass
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    out_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")


def build_unet(cfg: UNetConfig) -> ModelGraph:
    """Encoder-decoder segmenter: `depth` encoding blocks of two 3x3 convs
    (BN+ReLU) and a max-pool, mirrored decoding blocks with transposed-conv
    upsampling and skip concatenation, 1x1 head, pixel-wise softmax. Feature
    channels double going down and halve coming up."""
    g = _GraphBuilder(cfg.in_channels)
    ch_prev = cfg.in_channels
    skips = []
    for i in range(cfg.depth):
        ch = cfg.base_channels * (2 ** i)
        g.conv_bn_relu(f"enc{i}a", ch_prev, ch)
        tap = g.conv_bn_relu(f"enc{i}b", ch, ch)
        skips.append((tap, ch))
        g.maxpool(f"enc{i}_pool")
        ch_prev = ch
    ch_bott = cfg.base_channels * (2 ** cfg.depth)
    g.conv_bn_relu("botta", ch_prev, ch_bott)
    g.conv_bn_relu("bottb", ch_bott, ch_bott)
    ch_prev = ch_bott
    for i in reversed(range(cfg.depth)):
        ch = cfg.base_channels * (2 ** i)
        g.tconv(f"dec{i}_up", ch_prev, ch, k=2, stride=2)
        g.concat(f"dec{i}_cat", [g.prev, skips[i][0]])
        g.conv_bn_relu(f"dec{i}a", 2 * ch, ch)
        g.conv_bn_relu(f"dec{i}b", ch, ch)
        ch_prev = ch
    g.conv("head_conv", ch_prev, cfg.out_classes, k=1)
    g.softmax("probs", axis=1)
    graph = ModelGraph(g.nodes, cfg.in_channels, logits_name="head_conv",
                       meta={"arch": "unet", "base_channels": cfg.base_channels,
                             "depth": cfg.depth, "out_classes": cfg.out_classes,
                             "spatial_divisor": 2 ** cfg.depth})
    return graph.init_params(cfg.seed)


@dataclass
class ClassifierConfig:
    family: str = "fire"
    in_channels: int = 1
    n_classes: int = 3
    width: int = 16
    blocks: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.family not in CLASSIFIER_FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {CLASSIFIER_FAMILIES}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.blocks < 1 or self.width < 4:
            raise ValueError("blocks must be >= 1 and width >= 4")


def _fire_block(g: _GraphBuilder, stem: str, in_ch: int, squeeze: int, expand: int) -> int:
    """Squeeze 1x1 conv feeding parallel 1x1 and 3x3 expand convs, concatenated."""
    g.conv(f"{stem}_squeeze", in_ch, squeeze, k=1)
    g.bn(f"{stem}_sq_bn", squeeze)
    sq = g.relu(f"{stem}_sq_relu")
    e1 = g.conv(f"{stem}_expand1", squeeze, expand, k=1, src=sq)
    e3 = g.conv(f"{stem}_expand3", squeeze, expand, k=3, padding=1, src=sq)
    g.concat(f"{stem}_cat", [e1, e3])
    g.bn(f"{stem}_bn", 2 * expand)
    g.relu(f"{stem}_relu")
    return 2 * expand


def _residual_block(g: _GraphBuilder, stem: str, ch: int) -> int:
    """Two 3x3 convs on the branch, identity skip, ReLU after the sum."""
    entry = g.prev
    g.conv(f"{stem}_conv1", ch, ch, k=3, padding=1, src=entry)
    g.bn(f"{stem}_bn1", ch)
    g.relu(f"{stem}_relu1")
    g.conv(f"{stem}_conv2", ch, ch, k=3, padding=1)
    branch = g.bn(f"{stem}_bn2", ch)
    g.add(f"{stem}_add", entry, branch)
    g.relu(f"{stem}_relu")
    return ch


def _inception_block(g: _GraphBuilder, stem: str, in_ch: int, width: int) -> int:
    """Parallel 1x1, 1x1->3x3 and 1x1->5x5 branches concatenated in one layer."""
    entry = g.prev
    c1, c3, c5 = width // 2, width, width // 2
    b1 = g.conv(f"{stem}_b1", in_ch, c1, k=1, src=entry)
    g.conv(f"{stem}_b3r", in_ch, max(width // 2, 4), k=1, src=entry)
    g.relu(f"{stem}_b3r_relu")
    b3 = g.conv(f"{stem}_b3", max(width // 2, 4), c3, k=3, padding=1)
    g.conv(f"{stem}_b5r", in_ch, max(width // 4, 4), k=1, src=entry)
    g.relu(f"{stem}_b5r_relu")
    b5 = g.conv(f"{stem}_b5", max(width // 4, 4), c5, k=5, padding=2)
    g.concat(f"{stem}_cat", [b1, b3, b5])
    g.bn(f"{stem}_bn", c1 + c3 + c5)
    g.relu(f"{stem}_relu")
    return c1 + c3 + c5


def _dense_block(g: _GraphBuilder, stem: str, in_ch: int, growth: int, layers: int) -> int:
    """Each layer's 3x3 conv output is concatenated onto all previous maps."""
    ch = in_ch
    for j in range(layers):
        feat = g.prev
        g.bn(f"{stem}_l{j}_bn", ch, src=feat)
        g.relu(f"{stem}_l{j}_relu")
        new = g.conv(f"{stem}_l{j}_conv", ch, growth, k=3, padding=1)
        g.concat(f"{stem}_l{j}_cat", [feat, new])
        ch += growth
    return ch


def build_classifier(cfg: ClassifierConfig) -> ModelGraph:
    """Reduced-scale instance of one of the four block families, ending in
    global average pooling, a linear head and softmax over the classes."""
    g = _GraphBuilder(cfg.in_channels)
    w = cfg.width
    ch = w
    g.conv_bn_relu("stem", cfg.in_channels, w)
    g.maxpool("stem_pool")

    if cfg.family == "fire":
        # one spatial reduction mid-stack (plus the stem pool), mirroring the
        # squeeze-net placement; the global pool absorbs the final reduction
        for i in range(cfg.blocks):
            squeeze = max(4, w // 2) if i == 0 else w
            expand = w if i == 0 else 2 * w
            ch = _fire_block(g, f"fire{i}", ch, squeeze, expand)
            if i == 0 and cfg.blocks > 1:
                g.maxpool(f"fire{i}_pool")
    elif cfg.family == "residual":
        for i in range(cfg.blocks):
            ch = _residual_block(g, f"res{i}", ch)
            if i < cfg.blocks - 1:
                g.conv(f"trans{i}_conv", ch, 2 * ch, k=1)
                g.bn(f"trans{i}_bn", 2 * ch)
                g.relu(f"trans{i}_relu")
                g.maxpool(f"trans{i}_pool")
                ch = 2 * ch
    elif cfg.family == "inception":
        for i in range(cfg.blocks):
            ch = _inception_block(g, f"incep{i}", ch, w * (2 ** min(i, 1)))
            if i < cfg.blocks - 1:
                g.maxpool(f"incep{i}_pool")
    elif cfg.family == "dense":
        growth = max(4, w // 2)
        for i in range(cfg.blocks):
            ch = _dense_block(g, f"dense{i}", ch, growth, layers=3)
            if i < cfg.blocks - 1:
                g.conv(f"trans{i}_conv", ch, max(ch // 2, w), k=1)
                g.bn(f"trans{i}_bn", max(ch // 2, w))
                g.relu(f"trans{i}_relu")
                g.avgpool(f"trans{i}_pool")
                ch = max(ch // 2, w)

    g.gap("gap")
    g.linear("head", ch, cfg.n_classes)
    g.softmax("probs", axis=-1)
    graph = ModelGraph(g.nodes, cfg.in_channels, logits_name="head",
                       meta={"arch": "classifier", "family": cfg.family,
                             "n_classes": cfg.n_classes, "width": cfg.width,
                             "blocks": cfg.blocks, "spatial_divisor": 1})
    return graph.init_params(cfg.seed)


def replace_head(model: ModelGraph, n_classes: int, seed: int = 0) -> ModelGraph:
    """Swap the linear head for a freshly initialized one with `n_classes`
    outputs; every other parameter is preserved bit-exactly."""
    head = None
    for node in model.nodes:
        if node.kind == "linear":
            head = node
    if head is None:
        raise ValueError("model has no linear head to replace")
    cfg = model.to_config()
    for n in cfg["nodes"]:
        if n["name"] == head.name:
            n["attrs"]["out_features"] = int(n_classes)
    if "n_classes" in cfg["meta"]:
        cfg["meta"]["n_classes"] = int(n_classes)
    out = ModelGraph.from_config(cfg)
    rng = np.random.default_rng([abs(int(seed)), 0x68EAD])
    for node in out.nodes:
        if node.name == head.name:
            fan_in = node.attrs["in_features"]
            node.params["w"].data[...] = _he_uniform(rng, node.params["w"].shape, fan_in)
            node.params["b"].data[...] = 0.0
        else:
            src = model.node(node.name)
            for pname in node.params:
                node.params[pname].data[...] = src.params[pname].data
            for bname in node.buffers:
                node.buffers[bname][...] = src.buffers[bname]
    return out


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or inconsistent."""


def save_checkpoint(model: ModelGraph, path, meta: dict | None = None):
    """Write magic+version, a JSON header (architecture, array manifest,
    training metadata), then raw little-endian float32 arrays in topological
    order. Round trips are bit-exact."""
    items = model.state_items()
    header = {
        "config": model.to_config(),
        "meta": dict(meta or {}),
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelGraph, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    model = ModelGraph.from_config(header["config"])
    items = model.state_items()
    listed = header.get("arrays", [])
    if [(n, list(a.shape)) for n, a in items] != [(e["name"], list(e["shape"])) for e in listed]:
        raise CheckpointError(f"{path}: checkpoint arrays do not match the architecture config")
    pos = 12 + hlen
    expected = pos + sum(int(np.prod(e["shape"])) * 4 for e in listed)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes, expected {expected})")
    for _, arr in items:
        n = arr.size * 4
        arr[...] = np.frombuffer(raw[pos:pos + n], dtype="<f4").reshape(arr.shape)
        pos += n
    return model, header.get("meta", {})
