"""Stacked peephole LSTM over density-map sequences and the residual count head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Dense, Layer, Tape, Var, init_uniform
from .errors import InvalidArgumentError

GATE_WEIGHTS = ("W_xi", "W_xf", "W_xc", "W_xo", "W_hi", "W_hf", "W_hc", "W_ho")
PEEPHOLES = ("w_ci", "w_cf", "w_co")
BIASES = ("b_i", "b_f", "b_c", "b_o")


@dataclass
class LSTMState:
    """Per-layer cell and hidden vectors, each ``[N, hidden]``."""

    c: list[Var]
    h: list[Var]

    @classmethod
    def zeros(cls, layers: int, batch: int, hidden: int, dtype=np.float32) -> "LSTMState":
        return cls([Var(np.zeros((batch, hidden), dtype=dtype)) for _ in range(layers)],
                   [Var(np.zeros((batch, hidden), dtype=dtype)) for _ in range(layers)])


class LSTMLayer(Layer):
    kind = "lstm"

    def __init__(self, input_dim: int, hidden: int, name="", rng=None, dtype=np.float32,
                 forget_bias: float = 1.0):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.hidden = input_dim, hidden
        for key in GATE_WEIGHTS:
            rows = input_dim if key.startswith("W_x") else hidden
            self.add_param(key, init_uniform(rng, (rows, hidden), rows, 1.0, dtype))
        for key in PEEPHOLES:
            self.add_param(key, init_uniform(rng, (hidden,), hidden, 1.0, dtype))
        for key in BIASES:
            self.add_param(key, np.full(hidden, forget_bias if key == "b_f" else 0.0, dtype=dtype))

    def __getattr__(self, key):
        params = self.__dict__.get("params")
        if params is not None and key in params:
            return params[key]
        raise AttributeError(key)

    def forward(self, x, tape=None):  # pragma: no cover - use lstm_cell_step
        raise NotImplementedError("use lstm_cell_step")


def _affine(x, h, w_x, w_h, b, tape):
    return ad.add(ad.add(ad.matmul(x, w_x, tape), ad.matmul(h, w_h, tape), tape), b, tape)


def lstm_cell_step(x_t: Var, c_prev: Var, h_prev: Var, layer: LSTMLayer,
                   tape: Tape | None = None) -> tuple[Var, Var]:
    """One peephole-LSTM update; returns ``(c_t, h_t)``.

    i = sig(x W_xi + h W_hi + w_ci*c_prev + b_i)
    f = sig(x W_xf + h W_hf + w_cf*c_prev + b_f)
    c = f*c_prev + i*tanh(x W_xc + h W_hc + b_c)
    o = sig(x W_xo + h W_ho + w_co*c + b_o)
    h = o*tanh(c)
    """
    if x_t.value.ndim != 2 or x_t.shape[1] != layer.input_dim:
        raise InvalidArgumentError(f"{layer.name}: expected [N, {layer.input_dim}] input, got {x_t.shape}")
    if c_prev.shape != (x_t.shape[0], layer.hidden) or h_prev.shape != c_prev.shape:
        raise InvalidArgumentError(f"{layer.name}: state shape {c_prev.shape} does not match batch")
    p = layer.params
    i = ad.sigmoid(ad.add(_affine(x_t, h_prev, p["W_xi"], p["W_hi"], p["b_i"], tape),
                          ad.mul(p["w_ci"], c_prev, tape), tape), tape)
    f = ad.sigmoid(ad.add(_affine(x_t, h_prev, p["W_xf"], p["W_hf"], p["b_f"], tape),
                          ad.mul(p["w_cf"], c_prev, tape), tape), tape)
    g = ad.tanh(_affine(x_t, h_prev, p["W_xc"], p["W_hc"], p["b_c"], tape), tape)
    c = ad.add(ad.mul(f, c_prev, tape), ad.mul(i, g, tape), tape)
    o = ad.sigmoid(ad.add(_affine(x_t, h_prev, p["W_xo"], p["W_ho"], p["b_o"], tape),
                          ad.mul(p["w_co"], c, tape), tape), tape)
    h = ad.mul(o, ad.tanh(c, tape), tape)
    return c, h


class StackedLSTM:
    def __init__(self, input_dim: int, hidden: int = 100, layers: int = 3, rng=None,
                 dtype=np.float32, forget_bias: float = 1.0):
        if layers < 1 or hidden < 1:
            raise InvalidArgumentError("need at least one layer and one hidden unit")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.hidden = input_dim, hidden
        self.layers = [LSTMLayer(input_dim if k == 0 else hidden, hidden, name=f"lstm{k + 1}",
                                 rng=rng, dtype=dtype, forget_bias=forget_bias)
                       for k in range(layers)]

    def named_parameters(self):
        for layer in self.layers:
            for p in layer.params.values():
                yield p.name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def lstm_window_forward(density_vectors: Sequence[Var], lstm: StackedLSTM, tape: Tape | None = None,
                        unroll: int | None = None, return_sequence: bool = False):
    """Run the stack over ``m`` time steps from a zero state.

    ``density_vectors[t]`` is ``[N, D]``. Returns the top layer's final hidden
    vector, or the list of top-layer hidden vectors for every step when
    ``return_sequence`` is set.
    """
    m = len(density_vectors)
    if m == 0 or (unroll is not None and m != unroll):
        raise InvalidArgumentError(f"window has {m} frames, expected {unroll}")
    batch = density_vectors[0].shape[0]
    dtype = density_vectors[0].dtype
    state = LSTMState.zeros(len(lstm.layers), batch, lstm.hidden, dtype)
    tops = []
    for x in density_vectors:
        inp = x
        for k, layer in enumerate(lstm.layers):
            c, h = lstm_cell_step(inp, state.c[k], state.h[k], layer, tape)
            state.c[k], state.h[k] = c, h
            inp = h
        tops.append(inp)
    return tops if return_sequence else tops[-1]


class ResidualHead(Dense):
    """Fully connected layer mapping the top hidden vector to one residual count."""

    def __init__(self, hidden: int = 100, rng=None, dtype=np.float32, zero_init: bool = True):
        super().__init__(hidden, 1, name="fc", rng=rng, dtype=dtype, zero_init=zero_init)


def residual_count(h_t: Var, fc: ResidualHead, density_map: Var, tape: Tape | None = None,
                   residual: bool = True, base_count: Var | None = None) -> Var:
    """Per-frame count ``[N, 1]``: learned correction plus (when residual) the density sum.

    ``base_count`` may carry an already computed ``sum_per_sample(density_map)``
    so the residual variant adds exactly one edge to the direct one.
    """
    if density_map.shape[0] != h_t.shape[0]:
        raise InvalidArgumentError(
            f"batch mismatch: hidden {h_t.shape[0]} vs density {density_map.shape[0]}")
    g = fc(h_t, tape)
    if not residual:
        return g
    base = base_count if base_count is not None else ad.sum_per_sample(density_map, tape)
    return ad.add(g, base, tape)
