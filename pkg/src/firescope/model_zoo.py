"""Network families: the mask-predicting encoder/decoder FCN and the
image-level classifier used for the band-sensitivity comparison.

A :class:`ModelGraph` is a pure description (layer specs + wiring).
:class:`Network` instantiates one with seeded parameters and runs it.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_autonet as ta

MODEL_MAGIC = b"FPG1"
INPUT = "input"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | convT | bn | relu | maxpool | concat | dropout | flatten | dense | sigmoid
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    input_channels: int
    layers: list[LayerSpec]
    head: str  # "mask" or "classifier"
    input_hw: tuple[int, int] | None = None
    skips: list[tuple[str, str]] = field(default_factory=list)

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def l2_layers(self) -> list[str]:
        return [s.name for s in self.layers if s.attrs.get("l2", 0.0) > 0.0]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelGraph":
        d = json.loads(text)
        layers = [LayerSpec(s["name"], s["kind"], tuple(s["inputs"]), s["attrs"])
                  for s in d["layers"]]
        hw = tuple(d["input_hw"]) if d["input_hw"] is not None else None
        return cls(d["input_channels"], layers, d["head"], hw,
                   [tuple(p) for p in d["skips"]])


@dataclass(frozen=True)
class FcnConfig:
    base_width: int = 8
    depth: int = 3
    input_channels: int = 3
    convs_per_block: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1:
            raise ConfigError("depth and base_width must be >= 1")
        if self.input_channels < 1 or self.convs_per_block < 1:
            raise ConfigError("input_channels and convs_per_block must be >= 1")


@dataclass(frozen=True)
class CnnConfig:
    input_channels: int = 3
    input_hw: tuple[int, int] = (128, 128)
    conv_widths: tuple[int, ...] = (8, 32, 64, 256, 256)
    dense_widths: tuple[int, ...] = (256, 64, 8)
    l2: float = 3e-3
    # indices into conv_widths that carry the L2 term; must be the last two
    l2_convs: tuple[int, ...] | None = None
    conv_dropout: float = 0.3
    dense_dropout: tuple[float, ...] = (0.3, 0.2, 0.1)
    kernel_size: int = 3

    def __post_init__(self):
        if self.input_channels not in (2, 3):
            raise ConfigError(f"classifier input_channels must be 2 or 3, got {self.input_channels}")
        if len(self.conv_widths) < 2:
            raise ConfigError("classifier needs at least two conv layers")
        if len(self.dense_dropout) != len(self.dense_widths):
            raise ConfigError("dense_dropout needs one probability per dense layer")
        if any(b > a for a, b in zip(self.dense_dropout, self.dense_dropout[1:])):
            raise ConfigError("dense dropout probabilities must be non-increasing")
        h, w = self.input_hw
        if h % 2 ** len(self.conv_widths) or w % 2 ** len(self.conv_widths):
            raise ConfigError("input size must be divisible by 2**len(conv_widths)")


def build_fcn(cfg: FcnConfig) -> ModelGraph:
    """Encoder (conv-bn-relu, maxpool) x depth, bottleneck, decoder
    (convT, concat skip, conv-bn-relu) x depth, 1x1 conv + sigmoid head."""
    k = cfg.kernel_size
    layers: list[LayerSpec] = []
    skips: list[tuple[str, str]] = []
    prev = INPUT

    def conv_block(prefix, width, src):
        for r in range(cfg.convs_per_block):
            tag = f"{prefix}_conv{r + 1}" if cfg.convs_per_block > 1 else f"{prefix}_conv"
            layers.append(LayerSpec(tag, "conv", (src,), {"filters": width, "kernel": k}))
            layers.append(LayerSpec(tag + "_bn", "bn", (tag,)))
            layers.append(LayerSpec(tag + "_relu", "relu", (tag + "_bn",)))
            src = tag + "_relu"
        return src

    enc_out = []
    for i in range(cfg.depth):
        width = cfg.base_width * 2 ** i
        out = conv_block(f"enc{i + 1}", width, prev)
        enc_out.append((out, width))
        layers.append(LayerSpec(f"enc{i + 1}_pool", "maxpool", (out,)))
        prev = f"enc{i + 1}_pool"

    prev = conv_block("bottleneck", cfg.base_width * 2 ** cfg.depth, prev)

    for i in reversed(range(cfg.depth)):
        skip, width = enc_out[i]
        up = f"dec{i + 1}_up"
        layers.append(LayerSpec(up, "convT", (prev,), {"filters": width, "kernel": 2, "stride": 2}))
        cat = f"dec{i + 1}_concat"
        layers.append(LayerSpec(cat, "concat", (up, skip)))
        skips.append((skip, cat))
        prev = conv_block(f"dec{i + 1}", width, cat)

    layers.append(LayerSpec("head_conv", "conv", (prev,), {"filters": 1, "kernel": 1}))
    layers.append(LayerSpec("head_sigmoid", "sigmoid", ("head_conv",)))
    graph = ModelGraph(cfg.input_channels, layers, "mask", None, skips)
    validate_graph(graph)
    return graph


def build_sensitivity_cnn(cfg: CnnConfig) -> ModelGraph:
    """Conv-relu-maxpool stack, dropout, flatten, dropout-regularized dense
    stack and a single sigmoid unit.  L2 sits on the final two convs only."""
    n_conv = len(cfg.conv_widths)
    last_two = (n_conv - 2, n_conv - 1)
    l2_convs = last_two if cfg.l2_convs is None else tuple(sorted(cfg.l2_convs))
    if cfg.l2 > 0 and l2_convs != last_two:
        raise ConfigError(
            f"L2 must be attached to exactly the final two convs {last_two}, got {l2_convs}")
    layers: list[LayerSpec] = []
    prev = INPUT
    for i, width in enumerate(cfg.conv_widths):
        name = f"conv{i + 1}"
        attrs = {"filters": width, "kernel": cfg.kernel_size}
        if i in l2_convs and cfg.l2 > 0:
            attrs["l2"] = cfg.l2
        layers.append(LayerSpec(name, "conv", (prev,), attrs))
        layers.append(LayerSpec(name + "_relu", "relu", (name,)))
        layers.append(LayerSpec(name + "_pool", "maxpool", (name + "_relu",)))
        prev = name + "_pool"
    layers.append(LayerSpec("conv_dropout", "dropout", (prev,), {"p": cfg.conv_dropout}))
    layers.append(LayerSpec("flatten", "flatten", ("conv_dropout",)))
    prev = "flatten"
    for i, (units, p) in enumerate(zip(cfg.dense_widths, cfg.dense_dropout)):
        name = f"dense{i + 1}"
        layers.append(LayerSpec(name, "dense", (prev,), {"units": units}))
        layers.append(LayerSpec(name + "_relu", "relu", (name,)))
        layers.append(LayerSpec(name + "_dropout", "dropout", (name + "_relu",), {"p": p}))
        prev = name + "_dropout"
    layers.append(LayerSpec("head_dense", "dense", (prev,), {"units": 1}))
    layers.append(LayerSpec("head_sigmoid", "sigmoid", ("head_dense",)))
    graph = ModelGraph(cfg.input_channels, layers, "classifier", tuple(cfg.input_hw))
    validate_graph(graph)
    return graph


def infer_shapes(graph: ModelGraph) -> dict[str, tuple]:
    """Per-node output signature: ("spatial", channels, hw-or-None) or
    ("flat", features)."""
    shapes: dict[str, tuple] = {INPUT: ("spatial", graph.input_channels, graph.input_hw)}
    for s in graph.layers:
        missing = [i for i in s.inputs if i not in shapes]
        if missing:
            raise ConfigError(f"layer {s.name!r} reads undefined node(s) {missing}")
        src = shapes[s.inputs[0]]
        if s.kind in ("conv", "convT", "maxpool"):
            if src[0] != "spatial":
                raise ConfigError(f"layer {s.name!r} needs a spatial input")
            hw = src[2]
            if s.kind == "conv":
                stride = s.attrs.get("stride", 1)
                if hw is not None:
                    hw = (-(-hw[0] // stride), -(-hw[1] // stride))
                shapes[s.name] = ("spatial", s.attrs["filters"], hw)
            elif s.kind == "convT":
                stride, k = s.attrs.get("stride", 2), s.attrs.get("kernel", 2)
                if hw is not None:
                    hw = ((hw[0] - 1) * stride + k, (hw[1] - 1) * stride + k)
                shapes[s.name] = ("spatial", s.attrs["filters"], hw)
            else:
                if hw is not None:
                    if hw[0] % 2 or hw[1] % 2:
                        raise ConfigError(f"maxpool {s.name!r} on odd size {hw}")
                    hw = (hw[0] // 2, hw[1] // 2)
                shapes[s.name] = ("spatial", src[1], hw)
        elif s.kind == "concat":
            other = shapes[s.inputs[1]]
            if src[0] != "spatial" or other[0] != "spatial":
                raise ConfigError(f"concat {s.name!r} needs spatial inputs")
            if src[2] is not None and other[2] is not None and src[2] != other[2]:
                raise ConfigError(f"concat {s.name!r} size mismatch {src[2]} vs {other[2]}")
            shapes[s.name] = ("spatial", src[1] + other[1], src[2])
        elif s.kind == "flatten":
            if src[2] is None:
                raise ConfigError("flatten needs a known input_hw on the graph")
            shapes[s.name] = ("flat", src[1] * src[2][0] * src[2][1])
        elif s.kind == "dense":
            if src[0] != "flat":
                raise ConfigError(f"dense {s.name!r} needs a flat input")
            shapes[s.name] = ("flat", s.attrs["units"])
        elif s.kind in ("bn", "relu", "sigmoid", "dropout"):
            shapes[s.name] = src
        else:
            raise ConfigError(f"unknown layer kind {s.kind!r}")
    return shapes


def validate_graph(graph: ModelGraph) -> None:
    names = [INPUT] + [s.name for s in graph.layers]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate layer names")
    # every input must come from an earlier node, which rules out cycles
    infer_shapes(graph)
    if graph.layers[-1].kind != "sigmoid":
        raise ConfigError("graph must end in a sigmoid head")
    if sum(s.kind == "sigmoid" for s in graph.layers) != 1:
        raise ConfigError("graph must have exactly one output head")
    if graph.head not in ("mask", "classifier"):
        raise ConfigError(f"unknown head type {graph.head!r}")


def _layer_param_shapes(spec: LayerSpec, in_sig: tuple) -> dict[str, tuple]:
    if spec.kind == "conv":
        k = spec.attrs.get("kernel", 3)
        return {"kernel": (k, k, in_sig[1], spec.attrs["filters"]),
                "bias": (spec.attrs["filters"],)}
    if spec.kind == "convT":
        k = spec.attrs.get("kernel", 2)
        return {"kernel": (k, k, in_sig[1], spec.attrs["filters"]),
                "bias": (spec.attrs["filters"],)}
    if spec.kind == "bn":
        return {"gamma": (in_sig[1],), "beta": (in_sig[1],)}
    if spec.kind == "dense":
        return {"kernel": (in_sig[1], spec.attrs["units"]), "bias": (spec.attrs["units"],)}
    return {}


def param_count(graph: ModelGraph) -> int:
    """Trainable parameters: kernels, biases, batchnorm gain/shift."""
    shapes = infer_shapes(graph)
    total = 0
    for s in graph.layers:
        for shp in _layer_param_shapes(s, shapes[s.inputs[0]]).values():
            total += int(np.prod(shp))
    return total


# Presets.  The "full" sizes target roughly 2.1M (FCN) and 1.8M (classifier)
# parameters: FULL_FCN has 2,133,745 and FULL_CNN with 3 input channels has
# 1,824,657, most of them in the last two convs and the first dense layer.
DESK_FCN = FcnConfig(base_width=8, depth=3, input_channels=2)
FULL_FCN = FcnConfig(base_width=48, depth=3, input_channels=3)
DESK_CNN = CnnConfig(input_hw=(32, 32), conv_widths=(4, 8), dense_widths=(16, 8),
                     dense_dropout=(0.3, 0.1))
FULL_CNN = CnnConfig()


def fcn_preset(name: str, input_channels: int | None = None) -> FcnConfig:
    cfg = {"desk": DESK_FCN, "full": FULL_FCN}[name]
    if input_channels is not None:
        cfg = FcnConfig(cfg.base_width, cfg.depth, input_channels,
                        cfg.convs_per_block, cfg.kernel_size)
    return cfg


def cnn_preset(name: str, input_channels: int = 3,
               input_hw: tuple[int, int] | None = None) -> CnnConfig:
    cfg = {"desk": DESK_CNN, "full": FULL_CNN}[name]
    d = asdict(cfg)
    d["input_channels"] = input_channels
    if input_hw is not None:
        d["input_hw"] = tuple(input_hw)
    for key in ("conv_widths", "dense_widths", "dense_dropout", "input_hw"):
        d[key] = tuple(d[key])
    return CnnConfig(**d)


# ---------------------------------------------------------------------------
# runtime


class Network:
    """Executable instance of a :class:`ModelGraph`.

    Parameters are He-normal initialised from ``seed``; biases and batchnorm
    shifts start at zero.
    """

    def __init__(self, graph: ModelGraph, seed: int = 0):
        validate_graph(graph)
        self.graph = graph
        self.seed = seed
        self.meta: dict = {}
        shapes = infer_shapes(graph)
        rng = np.random.default_rng(seed)
        self.layers: dict[str, ta.Layer] = {}
        for idx, s in enumerate(graph.layers):
            in_sig = shapes[s.inputs[0]]
            pshapes = _layer_param_shapes(s, in_sig)
            if s.kind in ("conv", "convT", "dense"):
                kshape = pshapes["kernel"]
                fan_in = int(np.prod(kshape[:-1]))
                kernel = rng.standard_normal(kshape) * np.sqrt(2.0 / fan_in)
                bias = np.zeros(pshapes["bias"])
                if s.kind == "conv":
                    layer = ta.Conv2D(kernel, bias, s.attrs.get("stride", 1),
                                      s.attrs.get("padding", "same"))
                elif s.kind == "convT":
                    layer = ta.Conv2DTranspose(kernel, bias, s.attrs.get("stride", 2))
                else:
                    layer = ta.Dense(kernel, bias)
            elif s.kind == "bn":
                layer = ta.BatchNorm(in_sig[1])
            elif s.kind == "relu":
                layer = ta.ReLU()
            elif s.kind == "sigmoid":
                layer = ta.Sigmoid()
            elif s.kind == "maxpool":
                layer = ta.MaxPool2()
            elif s.kind == "concat":
                layer = ta.Concat()
            elif s.kind == "flatten":
                layer = ta.Flatten()
            elif s.kind == "dropout":
                layer = ta.Dropout(s.attrs["p"], seed=[seed, idx])
            else:
                raise ConfigError(f"unknown layer kind {s.kind!r}")
            self.layers[s.name] = layer
        # how many consumers read each node, for gradient accumulation
        self._consumers: dict[str, int] = {}
        for s in graph.layers:
            for i in s.inputs:
                self._consumers[i] = self._consumers.get(i, 0) + 1

    @property
    def head(self) -> str:
        return self.graph.head

    def forward(self, x, training=False):
        x = ta.as_tensor(x)
        if x.shape[-1] != self.graph.input_channels:
            raise ta.ShapeError(
                f"model expects {self.graph.input_channels} input channels, got {x.shape[-1]}")
        acts = {INPUT: x}
        for s in self.graph.layers:
            acts[s.name] = self.layers[s.name].forward(*(acts[i] for i in s.inputs),
                                                       training=training)
        return acts[self.graph.output]

    def backward(self, dout):
        """Backpropagate ``dout`` (gradient w.r.t. the head output); fills every
        layer's ``grads`` and returns the gradient w.r.t. the network input."""
        grads = {self.graph.output: dout}
        for s in reversed(self.graph.layers):
            g = grads.pop(s.name)
            for src, gi in zip(s.inputs, self.layers[s.name].backward(g)):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return grads[INPUT]

    def predict(self, x, batch_size=32):
        x = ta.as_tensor(x)
        outs = [self.forward(x[i:i + batch_size], training=False)
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed ``layer.param`` (live references)."""
        return {f"{n}.{k}": v for n, layer in self.layers.items()
                for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": layer.grads[k] for n, layer in self.layers.items()
                for k in layer.params}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers.items()
                for k, v in layer.state.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n, layer in self.layers.items():
            for k, v in layer.params.items():
                out[f"{n}.{k}"] = v
            for k, v in layer.state.items():
                out[f"{n}.{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ValueError(f"checkpoint keys do not match model: "
                             f"missing {sorted(set(own) - set(state))}, "
                             f"unexpected {sorted(set(state) - set(own))}")
        for key, value in state.items():
            if own[key].shape != value.shape:
                raise ValueError(f"{key}: shape {value.shape} != {own[key].shape}")
            own[key][...] = value

    def l2_terms(self) -> dict[str, float]:
        """Maps kernel parameter keys to their L2 coefficient."""
        return {f"{s.name}.kernel": s.attrs["l2"] for s in self.graph.layers
                if s.attrs.get("l2", 0.0) > 0.0}


def save_model(net: Network, path, meta: dict | None = None) -> None:
    """Write magic, u32 preamble length, JSON preamble (graph + ``meta``),
    then an FPW1 checkpoint of every parameter and buffer."""
    preamble = json.dumps({"graph": json.loads(net.graph.to_json()), "meta": meta or {},
                           "seed": net.seed}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(preamble)))
    buf.write(preamble)
    ta.write_checkpoint(net.state_dict(), buf)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> Network:
    """Inverse of :func:`save_model`; the preamble ``meta`` lands on ``net.meta``."""
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic)")
        (n,) = struct.unpack("<I", f.read(4))
        pre = json.loads(f.read(n).decode("utf-8"))
        state = ta.read_checkpoint(f)
    net = Network(ModelGraph.from_json(json.dumps(pre["graph"])), seed=pre["seed"])
    net.load_state_dict(state)
    net.meta = pre["meta"]
    return net
