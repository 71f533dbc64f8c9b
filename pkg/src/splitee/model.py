"""Residual base network at configurable scale, split into client/server parts.

The base network is a stack of L "main layers": a stem (conv + norm + relu,
optionally followed by a max pool for large inputs) and L-1 residual stages
of two basic blocks each.  A split at end layer ``l`` hands layers 1..l to
the client and l+1..L to the server; each side attaches its own output head
(global average pool -> flatten -> linear).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .optim import AdamState, ParameterSet
from .tensor import Tensor

# Channel widths / strides of the 6-layer reference stack; desk-scale
# networks use a prefix of it, optionally width-scaled.
_TABLE_CHANNELS = (64, 64, 64, 128, 256, 512)
_TABLE_STRIDES = (1, 1, 1, 2, 2, 2)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "stem" | "stage"
    channels: int
    stride: int
    blocks: int = 2
    kernel: int = 3  # stem only
    pool: bool = False  # stem only: 3x3/2 max pool after the relu


@dataclass(frozen=True)
class BaseNetworkSpec:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]  # C, H, W
    channel_scale: float = 1.0

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ConfigError("BaseNetworkSpec: need at least 2 layers")
        if self.layers[0].kind != "stem":
            raise ConfigError("BaseNetworkSpec: layer 1 must be the stem")
        if self.num_classes < 2:
            raise ConfigError("BaseNetworkSpec: num_classes must be >= 2")
        if self.channel_scale <= 0:
            raise ConfigError("BaseNetworkSpec: channel_scale must be positive")
        for i, ls in enumerate(self.layers):
            if ls.stride not in (1, 2):
                raise ConfigError(f"BaseNetworkSpec: layer {i + 1} stride must be 1 or 2")
            if self.scaled_channels(i + 1) < 1:
                raise ConfigError(f"BaseNetworkSpec: layer {i + 1} scales to 0 channels")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def scaled_channels(self, layer: int) -> int:
        return max(1, round(self.layers[layer - 1].channels * self.channel_scale))

    def to_dict(self) -> dict:
        return {
            "layers": [vars(ls).copy() for ls in self.layers],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "channel_scale": self.channel_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaseNetworkSpec":
        return cls(
            layers=tuple(LayerSpec(**ls) for ls in d["layers"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(int(v) for v in d["input_shape"]),
            channel_scale=float(d["channel_scale"]),
        )


def table_spec(
    depth: int = 6,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    channel_scale: float = 1.0,
) -> BaseNetworkSpec:
    """Reference architecture truncated to ``depth`` main layers.

    Inputs up to 64 px use a 3x3 stride-1 stem with no pooling; larger
    inputs use the 7x7 stride-2 stem followed by a 3x3/2 max pool.
    """
    if not 2 <= depth <= 6:
        raise ConfigError("table_spec: depth must be in [2, 6]")
    small = input_shape[1] <= 64
    layers = [
        LayerSpec(
            kind="stem",
            channels=_TABLE_CHANNELS[0],
            stride=1 if small else 2,
            kernel=3 if small else 7,
            pool=not small,
        )
    ]
    for i in range(1, depth):
        layers.append(
            LayerSpec(kind="stage", channels=_TABLE_CHANNELS[i], stride=_TABLE_STRIDES[i])
        )
    return BaseNetworkSpec(
        layers=tuple(layers),
        num_classes=num_classes,
        input_shape=input_shape,
        channel_scale=channel_scale,
    )


# ---------------------------------------------------------------------------
# Initialization

def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(ps: ParameterSet, rng, path: str, cout: int, cin: int, k: int) -> None:
    ps[f"{path}.weight"] = Tensor(_uniform(rng, (cout, cin, k, k), cin * k * k), True)


def _add_bn(ps: ParameterSet, path: str, c: int) -> None:
    ps[f"{path}.gamma"] = Tensor(np.ones(c), True)
    ps[f"{path}.beta"] = Tensor(np.zeros(c), True)
    ps[f"{path}.running_mean"] = Tensor(np.zeros(c))
    ps[f"{path}.running_var"] = Tensor(np.ones(c))


def _add_linear(ps: ParameterSet, rng, path: str, din: int, dout: int) -> None:
    ps[f"{path}.weight"] = Tensor(_uniform(rng, (din, dout), din), True)
    ps[f"{path}.bias"] = Tensor(_uniform(rng, (dout,), din), True)


def init_head(in_channels: int, num_classes: int, seed: int, prefix: str) -> ParameterSet:
    """Output head parameters: linear layer fed by global average pooling."""
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    _add_linear(ps, rng, f"{prefix}.linear", in_channels, num_classes)
    return ps


def build_base(spec: BaseNetworkSpec, seed: int) -> ParameterSet:
    """Full main-layer parameter set plus the server head.

    Draw order is fixed (layer 1..L, then the head), so two specs differing
    only in num_classes share identical main-layer parameters for one seed.
    """
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    cin = spec.input_shape[0]
    for idx in range(1, spec.depth + 1):
        ls = spec.layers[idx - 1]
        ch = spec.scaled_channels(idx)
        if ls.kind == "stem":
            _add_conv(ps, rng, f"layer{idx}.conv", ch, cin, ls.kernel)
            _add_bn(ps, f"layer{idx}.bn", ch)
        else:
            for b in range(1, ls.blocks + 1):
                s = ls.stride if b == 1 else 1
                bin_ch = cin if b == 1 else ch
                base = f"layer{idx}.block{b}"
                _add_conv(ps, rng, f"{base}.conv1", ch, bin_ch, 3)
                _add_bn(ps, f"{base}.bn1", ch)
                _add_conv(ps, rng, f"{base}.conv2", ch, ch, 3)
                _add_bn(ps, f"{base}.bn2", ch)
                if s != 1 or bin_ch != ch:
                    _add_conv(ps, rng, f"{base}.down.conv", ch, bin_ch, 1)
                    _add_bn(ps, f"{base}.down.bn", ch)
        cin = ch
    _add_linear(ps, rng, "head.server.linear", cin, spec.num_classes)
    return ps


# ---------------------------------------------------------------------------
# Forward passes

def _bn(ps: ParameterSet, path: str, x: Tensor, training: bool) -> Tensor:
    return ops.batchnorm2d(
        x,
        ps[f"{path}.gamma"],
        ps[f"{path}.beta"],
        ps[f"{path}.running_mean"].values,
        ps[f"{path}.running_var"].values,
        training,
    )


def _basic_block(ps: ParameterSet, base: str, x: Tensor, stride: int, training: bool) -> Tensor:
    out = ops.conv2d(x, ps[f"{base}.conv1.weight"], stride=stride, padding=1)
    out = ops.relu(_bn(ps, f"{base}.bn1", out, training))
    out = ops.conv2d(out, ps[f"{base}.conv2.weight"], stride=1, padding=1)
    out = _bn(ps, f"{base}.bn2", out, training)
    if f"{base}.down.conv.weight" in ps:
        shortcut = ops.conv2d(x, ps[f"{base}.down.conv.weight"], stride=stride, padding=0)
        shortcut = _bn(ps, f"{base}.down.bn", shortcut, training)
    else:
        shortcut = x
    return ops.relu(ops.add(out, shortcut))


def forward_layers(
    ps: ParameterSet, spec: BaseNetworkSpec, x: Tensor, start: int, end: int, training: bool
) -> Tensor:
    """Run main layers start..end inclusive (1-based layer indices)."""
    for idx in range(start, end + 1):
        ls = spec.layers[idx - 1]
        if ls.kind == "stem":
            x = ops.conv2d(
                x, ps[f"layer{idx}.conv.weight"], stride=ls.stride, padding=ls.kernel // 2
            )
            x = ops.relu(_bn(ps, f"layer{idx}.bn", x, training))
            if ls.pool:
                x = ops.max_pool(x, k=3, stride=2, padding=1)
        else:
            for b in range(1, ls.blocks + 1):
                x = _basic_block(
                    ps, f"layer{idx}.block{b}", x, ls.stride if b == 1 else 1, training
                )
    return x


def head_forward(ps: ParameterSet, prefix: str, h: Tensor) -> Tensor:
    pooled = ops.flatten(ops.global_avg_pool(h))
    return ops.linear(pooled, ps[f"{prefix}.linear.weight"], ps[f"{prefix}.linear.bias"])


# ---------------------------------------------------------------------------
# Split models

@dataclass
class ClientModel:
    """Layers 1..end_layer plus the early-exit head, with optimizer state."""

    spec: BaseNetworkSpec
    end_layer: int
    params: ParameterSet  # layer1..end_layer and head.client.*
    adam: AdamState = field(default=None)

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.for_params(self.params)

    @property
    def cut_channels(self) -> int:
        return self.spec.scaled_channels(self.end_layer)

    def forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """Returns (cut-layer features, early-exit logits)."""
        cin, hh, ww = self.spec.input_shape
        if x.values.ndim != 4 or x.shape[1:] != (cin, hh, ww):
            raise ShapeError(f"client input {x.shape} != expected (B, {cin}, {hh}, {ww})")
        h = forward_layers(self.params, self.spec, x, 1, self.end_layer, training)
        logits = head_forward(self.params, "head.client", h)
        return h, logits


@dataclass
class ServerModel:
    """Layers entry_layer+1..L plus the server head, with optimizer state.

    ``entry_layer`` is the shallowest cut this server accepts.  Features
    from a deeper cut l enter at layer l+1 (skip-entry), which keeps one
    shared server well-defined under heterogeneous cuts.
    """

    spec: BaseNetworkSpec
    entry_layer: int
    params: ParameterSet  # layer{entry+1}..L and head.server.*
    adam: AdamState = field(default=None)

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.for_params(self.params)

    def forward(self, h: Tensor, training: bool = False, entry: int | None = None) -> Tensor:
        entry = self.entry_layer if entry is None else entry
        if not self.entry_layer <= entry <= self.spec.depth:
            raise ShapeError(
                f"server accepts entries in [{self.entry_layer}, {self.spec.depth}], got {entry}"
            )
        expected = self.spec.scaled_channels(entry)
        if h.values.ndim != 4 or h.shape[1] != expected:
            raise ShapeError(
                f"feature width {h.shape[1] if h.values.ndim == 4 else h.shape} does not "
                f"match layer-{entry} width {expected}"
            )
        if entry < self.spec.depth:
            h = forward_layers(self.params, self.spec, h, entry + 1, self.spec.depth, training)
        return head_forward(self.params, "head.server", h)


def split(
    base: ParameterSet,
    end_layer: int,
    spec: BaseNetworkSpec,
    client_head_seed: int,
) -> tuple[ClientModel, ServerModel]:
    """Partition a built base into an owned client/server model pair.

    Main-layer parameters are copied disjointly: layers 1..end_layer to the
    client, end_layer+1..L and the server head to the server.  The client
    head is freshly initialized per owner.
    """
    if not 1 <= end_layer <= spec.depth:
        raise ConfigError(f"end_layer {end_layer} out of range [1, {spec.depth}]")
    entry = end_layer
    client_ps = ParameterSet()
    server_ps = ParameterSet()
    for path, t in base.items():
        layer_idx = _layer_of(path)
        if layer_idx is not None:
            if layer_idx <= end_layer:
                client_ps[path] = Tensor(t.values.copy(), t.requires_grad)
            if layer_idx > entry:
                server_ps[path] = Tensor(t.values.copy(), t.requires_grad)
        elif path.startswith("head.server."):
            server_ps[path] = Tensor(t.values.copy(), t.requires_grad)
    head = init_head(spec.scaled_channels(end_layer), spec.num_classes, client_head_seed,
                     "head.client")
    client_ps.update(head)
    return (
        ClientModel(spec=spec, end_layer=end_layer, params=client_ps),
        ServerModel(spec=spec, entry_layer=entry, params=server_ps),
    )


def _layer_of(path: str) -> int | None:
    """Main-layer index encoded in a parameter path, or None for heads."""
    if not path.startswith("layer"):
        return None
    return int(path[5 : path.index(".")])
