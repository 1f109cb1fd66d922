"""
Minimal reverse-mode differentiation for sequential conv nets.

Activations flow through the layers as batched float64 numpy arrays
(``N x C x H x W`` for image tensors, ``N x F`` for flat ones).  Trainable
parameters are wrapped in :class:`Tensor`, which pairs the value with its
gradient buffer.  Each layer records what it needs during a training-mode
forward pass and replays it in ``backward``; :class:`Network` chains the
layers and runs the tape in reverse.

Layer kinds:

    Dense        y = x @ W + b           W: (fan_in, fan_out)
    Conv2D       3x3, stride 1, pad 1    W: (out_ch, in_ch, 3, 3)
    MaxPool2x2   stride 2, H and W even
    ReLU
    Flatten
    Dropout      inverted: y = x * m / (1 - r),  m ~ Bernoulli(1 - r)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import ClassVar, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

DTYPE = np.float64


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Tensor:
    """A parameter array plus its gradient buffer."""

    def __init__(self, data, requires_grad: bool = True):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def check_rate(rate: float, name: str = "dropout rate") -> float:
    rate = float(rate)
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
    return rate


def _expect(cond: bool, layer: str, expected: str, actual: tuple) -> None:
    if not cond:
        raise ShapeError(f"{layer}: expected input shape {expected}, got {tuple(actual)}")


class Layer:
    kind: ClassVar[str] = ""
    tag: ClassVar[int] = 0

    def __init__(self):
        self._cache = None

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (no batch axis)."""
        return tuple(input_shape)

    def _recorded(self):
        if self._cache is None:
            raise UsageError(f"{self.kind}.backward called without a recorded training-mode forward pass")
        return self._cache

    def clear(self) -> None:
        self._cache = None

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "Dense"
    tag = 1

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        if fan_in < 1 or fan_out < 1:
            raise ConfigError(f"Dense sizes must be positive, got ({fan_in}, {fan_out})")
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = np.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self.bias = Tensor(np.zeros(fan_out))

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, mode=Mode.EVAL, rng=None):
        _expect(x.ndim == 2 and x.shape[1] == self.fan_in, self.kind, f"(N, {self.fan_in})", x.shape)
        if mode is Mode.TRAIN:
            self._cache = x
        return x @ self.weight.data + self.bias.data

    def backward(self, grad):
        x = self._recorded()
        self.weight.grad[...] = x.T @ grad
        self.bias.grad[...] = grad.sum(axis=0)
        return grad @ self.weight.data.T

    def output_shape(self, input_shape):
        _expect(tuple(input_shape) == (self.fan_in,), self.kind, f"({self.fan_in},)", input_shape)
        return (self.fan_out,)

    def __repr__(self):
        return f"Dense({self.fan_in}, {self.fan_out})"


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "Conv2D"
    tag = 2

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None):
        super().__init__()
        if in_ch < 1 or out_ch < 1:
            raise ConfigError(f"Conv2D channels must be positive, got ({in_ch}, {out_ch})")
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = np.sqrt(6.0 / (in_ch * 9))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(out_ch, in_ch, 3, 3)))
        self.bias = Tensor(np.zeros(out_ch))

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, mode=Mode.EVAL, rng=None):
        _expect(x.ndim == 4 and x.shape[1] == self.in_ch, self.kind, f"(N, {self.in_ch}, H, W)", x.shape)
        n, c, h, w = x.shape
        # channel-major padded copy (C, N, H+2, W+2); cols rows are (c, ki, kj) like the weights
        padded = np.zeros((c, n, h + 2, w + 2), dtype=DTYPE)
        padded[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
        cols = np.empty((c, 3, 3, n, h, w), dtype=DTYPE)
        for i in range(3):
            for j in range(3):
                cols[:, i, j] = padded[:, :, i:i + h, j:j + w]
        cols = cols.reshape(c * 9, n * h * w)
        out = self.weight.data.reshape(self.out_ch, -1) @ cols + self.bias.data[:, None]
        if mode is Mode.TRAIN:
            self._cache = (cols, x.shape)
        return out.reshape(self.out_ch, n, h, w).transpose(1, 0, 2, 3)

    def backward(self, grad):
        cols, (n, c, h, w) = self._recorded()
        g = grad.transpose(1, 0, 2, 3).reshape(self.out_ch, n * h * w)
        self.weight.grad[...] = (g @ cols.T).reshape(self.weight.shape)
        self.bias.grad[...] = g.sum(axis=1)
        dcols = (self.weight.data.reshape(self.out_ch, -1).T @ g).reshape(c, 3, 3, n, h, w)
        dpad = np.zeros((c, n, h + 2, w + 2), dtype=DTYPE)
        for i in range(3):
            for j in range(3):
                dpad[:, :, i:i + h, j:j + w] += dcols[:, i, j]
        return dpad[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)

    def output_shape(self, input_shape):
        _expect(len(input_shape) == 3 and input_shape[0] == self.in_ch, self.kind,
                f"({self.in_ch}, H, W)", input_shape)
        return (self.out_ch, *input_shape[1:])

    def __repr__(self):
        return f"Conv2D({self.in_ch}, {self.out_ch})"


class MaxPool2x2(Layer):
    kind = "MaxPool2x2"
    tag = 3

    def forward(self, x, mode=Mode.EVAL, rng=None):
        _expect(x.ndim == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0, self.kind,
                "(N, C, H, W) with even H and W", x.shape)
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        if mode is Mode.TRAIN:
            self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        idx, (n, c, h, w) = self._recorded()
        win = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
        return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def output_shape(self, input_shape):
        _expect(len(input_shape) == 3 and input_shape[1] % 2 == 0 and input_shape[2] % 2 == 0,
                self.kind, "(C, H, W) with even H and W", input_shape)
        c, h, w = input_shape
        return (c, h // 2, w // 2)


class ReLU(Layer):
    kind = "ReLU"
    tag = 4

    def forward(self, x, mode=Mode.EVAL, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._recorded()


class Flatten(Layer):
    kind = "Flatten"
    tag = 5

    def forward(self, x, mode=Mode.EVAL, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._recorded())

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Dropout(Layer):
    """Inverted dropout.

    In ``Mode.EVAL`` the layer is the identity unless ``forced`` is set, in
    which case it drops at its rate exactly as in training.  That override is
    how packet loss is emulated at evaluation time.  ``fixed_mask`` pins the
    keep-mask (boolean, same per-sample shape as the input, or full batch
    shape) so forward/backward become deterministic.
    """

    kind = "Dropout"
    tag = 6

    def __init__(self, rate: float = 0.0, forced: bool = False):
        super().__init__()
        self.rate = check_rate(rate)
        self.forced = forced
        self.fixed_mask: np.ndarray | None = None
        self._identity = False

    @property
    def rate(self) -> float:
        return self._rate

    @rate.setter
    def rate(self, value: float) -> None:
        self._rate = check_rate(value)

    def forward(self, x, mode=Mode.EVAL, rng=None):
        active = mode is Mode.TRAIN or self.forced
        if not active:
            return x
        if self.fixed_mask is not None:
            mask = np.broadcast_to(self.fixed_mask, x.shape)
        elif self.rate == 0.0:
            if mode is Mode.TRAIN:
                self._identity = True
            return x
        else:
            if rng is None:
                raise UsageError("Dropout needs an rng when active")
            mask = rng.random(x.shape) >= self.rate
        scale = 1.0 / (1.0 - self.rate)
        if mode is Mode.TRAIN:
            self._cache = (mask, scale)
            self._identity = False
        return x * mask * scale

    def backward(self, grad):
        if self._identity:
            return grad
        mask, scale = self._recorded()
        return grad * mask * scale

    def clear(self):
        self._cache = None
        self._identity = False

    def __repr__(self):
        return f"Dropout({self.rate}{', forced' if self.forced else ''})"


LAYER_TYPES: dict[int, type[Layer]] = {cls.tag: cls for cls in (Dense, Conv2D, MaxPool2x2, ReLU, Flatten, Dropout)}


@dataclass
class Network:
    """A chain of layers.

    ``blocks[k]`` is the 1-based block index that layer ``k`` belongs to; the
    FC block gets index ``n_conv_blocks + 1``.  ``input_shape`` is the
    per-sample input shape.
    """

    layers: list[Layer]
    blocks: list[int] = field(default_factory=list)
    input_shape: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.blocks:
            self.blocks = [1] * len(self.layers)
        if len(self.blocks) != len(self.layers):
            raise ConfigError("blocks must have one entry per layer")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._recorded = False

    def __len__(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def output_shape(self, input_shape: Sequence[int] | None = None) -> tuple[int, ...]:
        shape = tuple(self.input_shape if input_shape is None else input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x: np.ndarray, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if self.input_shape:
            _expect(x.shape[1:] == self.input_shape, "Network", f"(N, {', '.join(map(str, self.input_shape))})", x.shape)
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        self._recorded = mode is Mode.TRAIN
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Fill every parameter's ``grad`` (overwriting) and return d(loss)/d(input)."""
        if not self._recorded:
            raise UsageError("backward called without a recorded training-mode forward pass")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def dropout_layers(self) -> list[tuple[int, Dropout]]:
        return [(b, layer) for b, layer in zip(self.blocks, self.layers) if isinstance(layer, Dropout)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``logits`` may be rank 1 (one sample, integer label) or rank 2 (batch).
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"expected logits (N, K) with N labels, got logits {logits.shape} and labels {labels.shape}")
    k = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    return loss, grad[0] if single else grad


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Update ``params`` in place with one bias-corrected Adam step."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeError("params, grads and optimizer state disagree in length")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)
