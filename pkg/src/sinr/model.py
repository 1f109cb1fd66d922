"""
Block-structured conv nets and horizontal splitting.

A model is a stack of conv blocks followed by an FC block.  Each conv block
is ``[Conv2D, ReLU] * convs``, an optional 2x2 max-pool, and a dropout layer.
Splitting after block ``i`` drops that block's trailing dropout layer and
cuts the layer list in two: the input sub-model runs on the device, the
output sub-model on the server.  The intermediate representation is the
input sub-model's output, flattened row-major (channel, row, column).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from . import checkpoint
from .checkpoint import ROLE_INPUT, ROLE_NAMES, ROLE_OUTPUT, Container
from .errors import ConfigError, RoleMismatchError
from .nn import Conv2D, Dense, Dropout, Flatten, MaxPool2x2, Mode, Network, ReLU, check_rate


@dataclass
class BlockSpec:
    convs: int = 2
    channels: int = 16
    pool: bool = True
    dropout: float = 0.0


@dataclass
class ModelSpec:
    """Architecture description.

    The default is the desk-scale network: three conv blocks of two convs each
    (16/32/64 channels) and an FC block of 64 hidden units plus 10 logits, on
    3x32x32 inputs.
    """

    blocks: list[BlockSpec] = field(default_factory=lambda: [BlockSpec(2, 16), BlockSpec(2, 32), BlockSpec(2, 64)])
    fc_units: tuple[int, ...] = (64, 10)
    fc_dropout: tuple[float, ...] | None = None
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        self.fc_units = tuple(int(u) for u in self.fc_units)
        if self.fc_dropout is None:
            self.fc_dropout = (0.0,) * (len(self.fc_units) - 1)
        self.fc_dropout = tuple(float(r) for r in self.fc_dropout)
        self.input_shape = tuple(int(d) for d in self.input_shape)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("model needs at least one conv block before the FC block")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if not self.fc_units or min(self.fc_units) < 1:
            raise ConfigError(f"fc_units must be positive, got {self.fc_units}")
        if len(self.fc_dropout) != len(self.fc_units) - 1:
            raise ConfigError("fc_dropout needs one rate per hidden FC layer")
        h, w = self.input_shape[1:]
        for k, b in enumerate(self.blocks, 1):
            if b.convs < 1 or b.channels < 1:
                raise ConfigError(f"block {k}: convs and channels must be positive")
            check_rate(b.dropout, f"block {k} dropout rate")
            if b.pool:
                if h % 2 or w % 2:
                    raise ConfigError(f"block {k}: cannot 2x2-pool a {h}x{w} feature map")
                h, w = h // 2, w // 2
        for r in self.fc_dropout:
            check_rate(r, "fc dropout rate")

    def with_dropout(self, rate: float) -> "ModelSpec":
        """Copy of this spec with every dropout layer at ``rate``."""
        blocks = [BlockSpec(b.convs, b.channels, b.pool, rate) for b in self.blocks]
        return ModelSpec(blocks, self.fc_units, (rate,) * (len(self.fc_units) - 1), self.input_shape)


def build_model(spec: ModelSpec, seed: int = 0) -> Network:
    spec.validate()
    rng = np.random.default_rng(seed)
    layers, blocks = [], []

    def add(layer, block):
        layers.append(layer)
        blocks.append(block)

    ch = spec.input_shape[0]
    for k, b in enumerate(spec.blocks, 1):
        for _ in range(b.convs):
            add(Conv2D(ch, b.channels, rng), k)
            add(ReLU(), k)
            ch = b.channels
        if b.pool:
            add(MaxPool2x2(), k)
        add(Dropout(b.dropout), k)

    fc = spec.n_blocks + 1
    fan_in = int(np.prod(Network(list(layers), list(blocks), spec.input_shape).output_shape()))
    add(Flatten(), fc)
    for units, rate in zip(spec.fc_units[:-1], spec.fc_dropout):
        add(Dense(fan_in, units, rng), fc)
        add(ReLU(), fc)
        add(Dropout(rate), fc)
        fan_in = units
    add(Dense(fan_in, spec.fc_units[-1], rng), fc)
    return Network(layers, blocks, spec.input_shape)


def conv_block_count(model: Network) -> int:
    return max(model.blocks) - 1


def _check_point(model: Network, point: int) -> int:
    n = conv_block_count(model)
    if not isinstance(point, (int, np.integer)) or not 1 <= point <= n:
        raise ConfigError(f"division point must be a conv block index in [1, {n}], got {point!r}")
    return int(point)


def division_dropout(model: Network, point: int) -> tuple[int, Dropout]:
    """Index and layer of the dropout that ends block ``point``."""
    point = _check_point(model, point)
    last = max(k for k, b in enumerate(model.blocks) if b == point)
    layer = model.layers[last]
    if not isinstance(layer, Dropout):
        raise ConfigError(f"block {point} does not end in a dropout layer")
    return last, layer


def set_division_dropout(model: Network, point: int, rate: float) -> Network:
    rate = check_rate(rate)
    _, layer = division_dropout(model, point)
    layer.rate = rate
    return model


def set_all_dropout(model: Network, rate: float) -> Network:
    rate = check_rate(rate)
    for _, layer in model.dropout_layers():
        layer.rate = rate
    return model


@dataclass
class SubModel:
    network: Network
    role: str
    division: int
    intermediate_shape: tuple[int, ...]

    @property
    def n_elem(self) -> int:
        return int(np.prod(self.intermediate_shape))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode forward. The output half accepts flat or shaped input."""
        x = np.asarray(x, dtype=np.float64)
        if self.role == "output":
            x = x.reshape((x.shape[0], *self.intermediate_shape))
        return self.network.forward(x, Mode.EVAL)

    __call__ = forward


@dataclass
class SubModelPair:
    input_sub: SubModel
    output_sub: SubModel

    @property
    def division(self) -> int:
        return self.input_sub.division

    @property
    def intermediate_shape(self) -> tuple[int, ...]:
        return self.input_sub.intermediate_shape

    @property
    def n_elem(self) -> int:
        return self.input_sub.n_elem

    def intermediate(self, x: np.ndarray) -> np.ndarray:
        """Flattened intermediate representation, shape (N, n_elem)."""
        y = self.input_sub(x)
        return y.reshape(y.shape[0], -1)

    def compose(self, x: np.ndarray) -> np.ndarray:
        return self.output_sub(self.input_sub(x))

    __call__ = compose


def split_at(model: Network, point: int) -> SubModelPair:
    """Split after conv block ``point``, dropping that block's dropout layer.

    The halves get deep copies of the parameters, so later training of
    ``model`` does not leak into them.
    """
    cut, _ = division_dropout(model, point)
    layers = copy.deepcopy(model.layers)
    for layer in layers:
        layer.clear()
    head = Network(layers[:cut], model.blocks[:cut], model.input_shape)
    mid = head.output_shape()
    tail = Network(layers[cut + 1:], model.blocks[cut + 1:], mid)
    return SubModelPair(SubModel(head, "input", point, mid), SubModel(tail, "output", point, mid))


_ROLE_TAGS = {"input": ROLE_INPUT, "output": ROLE_OUTPUT}


def save_submodel(path: str | PathLike, sub: SubModel) -> None:
    checkpoint.save(path, Container(sub.network, _ROLE_TAGS[sub.role], sub.division, sub.intermediate_shape))


def load_submodel(path: str | PathLike, role: str | None = None) -> SubModel:
    """Load a sub-model file; pass ``role`` to insist on "input" or "output"."""
    c = checkpoint.load(path)
    if c.role not in (ROLE_INPUT, ROLE_OUTPUT):
        raise RoleMismatchError(f"{path}: holds a {ROLE_NAMES[c.role]} model, not a sub-model")
    found = ROLE_NAMES[c.role]
    if role is not None and role != found:
        raise RoleMismatchError(f"{path}: expected a {role} sub-model, file holds the {found} half")
    return SubModel(c.network, found, c.division, tuple(c.intermediate_shape))


def load_pair(input_path: str | PathLike, output_path: str | PathLike) -> SubModelPair:
    a = load_submodel(input_path, "input")
    b = load_submodel(output_path, "output")
    if (a.division, a.intermediate_shape) != (b.division, b.intermediate_shape):
        raise ConfigError(
            f"sub-models disagree: input split at block {a.division} {a.intermediate_shape}, "
            f"output at block {b.division} {b.intermediate_shape}")
    return SubModelPair(a, b)


def describe(model: Network, blocks: Sequence[int] | None = None) -> list[tuple[int, tuple[int, ...], int]]:
    """(block, intermediate shape, n_elem) for each division point."""
    out = []
    for point in blocks or range(1, conv_block_count(model) + 1):
        cut, _ = division_dropout(model, point)
        shape = Network(model.layers[:cut], model.blocks[:cut], model.input_shape).output_shape()
        out.append((point, shape, int(np.prod(shape))))
    return out
