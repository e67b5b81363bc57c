"""Tape-based reverse-mode differentiation and the layer abstraction built on it.

A :class:`Var` wraps an ndarray. Operations in this module take ``Var``
inputs and an optional :class:`Tape`; when a tape is given and any input
requires a gradient, the op appends a record holding what its backward rule
needs. :meth:`Tape.backward` replays the records in exact reverse order.

Gradients of leaves (parameters and any user-created ``Var`` with
``requires_grad=True``) are *accumulated* into ``leaf.grad``; intermediate
gradients live only for the duration of one backward call. Fan-out is handled
by summing contributions, so a value feeding two consumers receives the sum
of both path gradients.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .errors import InvalidArgumentError
from .ops import ConvSpec


class Var:
    """A node in the computation: a value plus (for leaves) a gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Var{tag} shape={self.shape} dtype={self.dtype}>"


class Parameter(Var):
    """A learnable leaf with a same-shaped, persistent gradient accumulator."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops."""

    def __init__(self):
        self._records: list[tuple[Var, tuple[Var, ...], BackwardFn, str]] = []

    def __len__(self):
        return len(self._records)

    @property
    def op_names(self) -> list[str]:
        return [rec[3] for rec in self._records]

    def record(self, out: Var, inputs: tuple[Var, ...], backward: BackwardFn, op: str):
        out.is_leaf = False
        self._records.append((out, inputs, backward, op))

    def backward(self, output: Var, grad=None):
        """Propagate ``grad`` (dLoss/d``output``) to every leaf reachable on the tape."""
        if not self._records:
            raise InvalidArgumentError("backward called on an empty tape")
        if grad is None:
            if output.value.size != 1:
                raise InvalidArgumentError("implicit gradient only for scalar outputs")
            grad = np.ones_like(output.value)
        grad = np.asarray(grad, dtype=output.dtype)
        if grad.shape != output.shape:
            raise InvalidArgumentError(f"gradient shape {grad.shape} != output shape {output.shape}")
        pending = {id(output): grad}
        if output.is_leaf:
            _accumulate_leaf(output, grad)
        for out, inputs, fn, _ in reversed(self._records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            needs = [inp.requires_grad for inp in inputs]
            for inp, gi in zip(inputs, fn(g, needs)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi


def _accumulate_leaf(leaf: Var, g):
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.dtype, copy=True)
    else:
        leaf.grad += g


def _emit(value, inputs, tape, backward, op) -> Var:
    out = Var(value, requires_grad=any(i.requires_grad for i in inputs))
    if tape is not None and out.requires_grad:
        tape.record(out, tuple(inputs), backward, op)
    return out


def zero_grads(params: Iterable[Var]):
    for p in params:
        if p.grad is not None:
            p.grad.fill(0)


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------


def conv2d(x: Var, w: Var, b: Var | None, spec: ConvSpec, tape: Tape | None = None) -> Var:
    out, cols = ops.conv2d_with_cols(x.value, w.value, None if b is None else b.value, spec)
    x_shape = x.shape
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        gx, gw, gb = ops.conv2d_backward_from_cols(g, cols, x_shape, w.value, spec,
                                                   need_input=needs[0])
        return (gx, gw) if b is None else (gx, gw, gb)

    kind = "atrous-conv" if spec.dilation > 1 else "conv"
    return _emit(out, inputs, tape, backward, kind)


def deconv2d(x: Var, w: Var, b: Var | None, spec: ConvSpec, tape: Tape | None = None) -> Var:
    out = ops.deconv2d(x.value, w.value, None if b is None else b.value, spec)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        gx, gw, gb = ops.deconv2d_backward(g, x.value, w.value, spec, need_input=needs[0])
        return (gx, gw) if b is None else (gx, gw, gb)

    return _emit(out, inputs, tape, backward, "deconv")


def max_pool2d(x: Var, window: int, stride: int, tape: Tape | None = None) -> Var:
    out, argmax = ops.max_pool2d(x.value, window, stride)
    x_shape = x.shape
    return _emit(out, (x,), tape,
                 lambda g, needs: (ops.max_pool2d_backward(g, argmax, x_shape),), "maxpool")


def concat_channels(xs: Sequence[Var], tape: Tape | None = None) -> Var:
    out = ops.concat_channels([x.value for x in xs])
    sizes = [x.shape[1] for x in xs]
    return _emit(out, tuple(xs), tape, lambda g, needs: ops.split_channels(g, sizes), "concat")


def matmul(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = ops.matmul(a.value, b.value)

    def backward(g, needs):
        return (g @ b.value.T if needs[0] else None, a.value.T @ g if needs[1] else None)

    return _emit(out, (a, b), tape, backward, "matmul")


def add(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = ops.add(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), tape, lambda g, needs: ops.add_backward(g, sa, sb), "add")


def mul(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = ops.mul(a.value, b.value)
    return _emit(out, (a, b), tape, lambda g, needs: ops.mul_backward(g, a.value, b.value), "mul")


def sigmoid(x: Var, tape: Tape | None = None) -> Var:
    out = ops.sigmoid(x.value)
    return _emit(out, (x,), tape, lambda g, needs: (ops.sigmoid_backward(g, out),), "sigmoid")


def tanh(x: Var, tape: Tape | None = None) -> Var:
    out = ops.tanh(x.value)
    return _emit(out, (x,), tape, lambda g, needs: (ops.tanh_backward(g, out),), "tanh")


def relu(x: Var, tape: Tape | None = None) -> Var:
    out = ops.relu(x.value)
    return _emit(out, (x,), tape, lambda g, needs: (ops.relu_backward(g, x.value),), "relu")


def reshape(x: Var, shape, tape: Tape | None = None) -> Var:
    out = ops.reshape(x.value, shape)
    in_shape = x.shape
    return _emit(out, (x,), tape,
                 lambda g, needs: (ops.reshape_backward(g, in_shape),), "reshape")


def sum_per_sample(x: Var, tape: Tape | None = None) -> Var:
    """Sum all axes but the first: ``[N, ...] -> [N, 1]``."""
    n = x.shape[0]
    out = x.value.reshape(n, -1).sum(axis=1, keepdims=True)
    in_shape = x.shape

    def backward(g, needs):
        return (np.broadcast_to(g.reshape((n,) + (1,) * (len(in_shape) - 1)), in_shape).copy(),)

    return _emit(out, (x,), tape, backward, "sum")


def slice_rows(x: Var, start: int, stop: int, tape: Tape | None = None) -> Var:
    """Rows ``start:stop`` along the first axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise InvalidArgumentError(f"row slice {start}:{stop} out of range for {x.shape}")
    out = x.value[start:stop].copy()
    in_shape = x.shape

    def backward(g, needs):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _emit(out, (x,), tape, backward, "slice")


def sum_pool2d(x: Var, factor: int, tape: Tape | None = None) -> Var:
    """Non-overlapping ``factor x factor`` sums; preserves total mass."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise InvalidArgumentError(f"{h}x{w} not divisible by pool factor {factor}")
    out = x.value.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))

    def backward(g, needs):
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3),)

    return _emit(out, (x,), tape, backward, "sumpool")


def scale(x: Var, factor: float, tape: Tape | None = None) -> Var:
    out = x.value * x.dtype.type(factor)
    return _emit(out, (x,), tape, lambda g, needs: (g * x.dtype.type(factor),), "scale")


def squared_error_sum(pred: Var, target, tape: Tape | None = None) -> Var:
    """``sum((pred - target)^2)`` as a 0-d Var; ``target`` is a constant array."""
    diff = pred.value - target
    out = np.asarray(np.sum(diff * diff), dtype=pred.dtype)
    return _emit(out, (pred,), tape, lambda g, needs: (2 * g * diff,), "sqerr")


def add_scalars(parts: Sequence[Var], weights: Sequence[float], tape: Tape | None = None) -> Var:
    """Weighted sum of 0-d Vars."""
    total = sum(float(w) * float(p.value) for p, w in zip(parts, weights))
    dtype = parts[0].dtype
    out = np.asarray(total, dtype=dtype)

    def backward(g, needs):
        return [g * dtype.type(w) for w in weights]

    return _emit(out, tuple(parts), tape, backward, "weighted-sum")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def init_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0, dtype=np.float32):
    """Centered uniform on ``[-gain/sqrt(fan_in), gain/sqrt(fan_in)]``."""
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


RELU_GAIN = float(np.sqrt(6.0))


class Layer:
    """Named parameters plus a forward rule; differentiated through the tape."""

    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add_param(self, key: str, value) -> Parameter:
        p = Parameter(value, name=f"{self.name}.{key}" if self.name else key)
        self.params[key] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __call__(self, x, tape: Tape | None = None):
        return self.forward(x, tape)

    def forward(self, x, tape: Tape | None = None):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, dilation=1, name="", rng=None, gain=RELU_GAIN,
                 dtype=np.float32):
        super().__init__(name)
        self.kind = "atrous-conv" if dilation > 1 else "conv"
        self.spec = ConvSpec.same(kernel, dilation)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param("weight", init_uniform(rng, (out_ch, in_ch, kernel, kernel),
                                                            fan_in, gain, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def forward(self, x, tape=None):
        if x.shape[1] != self.weight.shape[1]:
            raise InvalidArgumentError(
                f"{self.name}: expected {self.weight.shape[1]} channels, got {x.shape[1]}")
        return conv2d(x, self.weight, self.bias, self.spec, tape)


class Deconv2d(Layer):
    kind = "deconv"

    def __init__(self, in_ch, out_ch, kernel=4, stride=2, padding=1, name="", rng=None,
                 gain=RELU_GAIN, dtype=np.float32):
        super().__init__(name)
        self.spec = ConvSpec(kernel, kernel, stride, 1, padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        # each output pixel receives in_ch * (kernel/stride)^2 taps
        fan_in = max(1, in_ch * (kernel // stride) ** 2)
        self.weight = self.add_param("weight", init_uniform(rng, (in_ch, out_ch, kernel, kernel),
                                                            fan_in, gain, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def forward(self, x, tape=None):
        if x.shape[1] != self.weight.shape[0]:
            raise InvalidArgumentError(
                f"{self.name}: expected {self.weight.shape[0]} channels, got {x.shape[1]}")
        return deconv2d(x, self.weight, self.bias, self.spec, tape)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, window=2, stride=2, name=""):
        super().__init__(name)
        self.window, self.stride = window, stride

    def forward(self, x, tape=None):
        return max_pool2d(x, self.window, self.stride, tape)


class Concat(Layer):
    kind = "concat"

    def forward(self, xs, tape=None):
        return concat_channels(list(xs), tape)


class Dense(Layer):
    """``y = x @ W + b`` with ``W`` stored ``[in, out]``."""

    kind = "dense"

    def __init__(self, in_dim, out_dim, name="", rng=None, gain=1.0, dtype=np.float32,
                 zero_init=False):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = init_uniform(rng, (in_dim, out_dim), in_dim, gain, dtype)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros((1, out_dim), dtype=dtype))

    def forward(self, x, tape=None):
        if x.value.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise InvalidArgumentError(
                f"{self.name}: expected [N, {self.weight.shape[0]}] input, got {x.shape}")
        return add(matmul(x, self.weight, tape), self.bias, tape)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str, name=""):
        super().__init__(name)
        if fn not in _ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, tape=None):
        return _ACTIVATIONS[self.fn](x, tape)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape, name=""):
        super().__init__(name)
        self.shape = tuple(shape)  # per-sample shape; the batch axis is kept

    def forward(self, x, tape=None):
        return reshape(x, (x.shape[0],) + self.shape, tape)


def forward(layer: Layer, x, tape: Tape | None = None):
    return layer(x, tape)


def backward(tape: Tape, output: Var, grad_of_loss=None):
    tape.backward(output, grad_of_loss)


def collect_params(model) -> list[tuple[str, Parameter]]:
    """Flatten a model into ``(name, Parameter)`` pairs in its declared order.

    Accepts a :class:`Layer`, an object with ``named_parameters()``, or an
    iterable of either. Order is the order of declaration and never depends
    on dict hashing, so checkpoints written from it are stable.
    """
    if hasattr(model, "named_parameters"):
        return list(model.named_parameters())
    if isinstance(model, Layer):
        return [(p.name, p) for p in model.params.values()]
    out = []
    for item in model:
        out.extend(collect_params(item))
    return out
