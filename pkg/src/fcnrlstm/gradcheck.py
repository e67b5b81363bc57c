"""Central finite-difference checks of every backward rule, in float64.

Each suite builds a small random instance, contracts the op output with a
fixed random tensor ``R`` to get a scalar ``L = <out, R>``, and compares the
tape gradient of ``L`` against ``(L(v+h) - L(v-h)) / 2h`` entry by entry.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

H_STEP = 1e-5
DEFAULT_TOL = 1e-3


def rel_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(loss: Callable[[], float], arr: np.ndarray, indices, h: float = H_STEP) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. ``arr.flat[i]`` for ``i`` in ``indices`` (in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        up = loss()
        flat[i] = old - h
        down = loss()
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def _sample(rng, size, n):
    return np.arange(size) if size <= n else np.sort(rng.choice(size, n, replace=False))


def check_leaves(build: Callable[[Tape | None], Var], leaves: list[Var], rng: np.random.Generator,
                 samples: int = 20, h: float = H_STEP) -> float:
    """Max relative error over sampled entries of every leaf.

    ``build(tape)`` must recompute the graph from the current leaf values and
    return its output ``Var``.
    """
    probe = build(None)
    weights = rng.standard_normal(probe.shape)

    def loss():
        return float(np.sum(build(None).value * weights))

    for leaf in leaves:
        leaf.grad = None if not isinstance(leaf, ad.Parameter) else np.zeros_like(leaf.value)
    tape = Tape()
    out = build(tape)
    tape.backward(out, weights.astype(out.dtype))
    worst = 0.0
    for leaf in leaves:
        idx = _sample(rng, leaf.value.size, samples)
        analytic = (np.zeros(leaf.value.size) if leaf.grad is None else leaf.grad.reshape(-1))[idx]
        numeric = numeric_grad(loss, leaf.value, idx, h)
        worst = max(worst, float(rel_error(analytic, numeric).max()))
    return worst


def _leaf(rng, *shape):
    return Var(rng.standard_normal(shape), requires_grad=True)


def suite_conv(rng, dilation=1):
    from .ops import ConvSpec
    x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    spec = ConvSpec(3, 3, stride=1 if dilation > 1 else 2, dilation=dilation, padding=dilation)
    return check_leaves(lambda t: ad.conv2d(x, w, b, spec, t), [x, w, b], rng)


def suite_deconv(rng):
    from .ops import ConvSpec
    x, w, b = _leaf(rng, 2, 3, 4, 5), _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2)
    spec = ConvSpec(4, 4, stride=2, padding=1)
    return check_leaves(lambda t: ad.deconv2d(x, w, b, spec, t), [x, w, b], rng)


def suite_maxpool(rng):
    # distinct, well separated values keep every window away from a tie
    x = Var(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1 + rng.uniform(0, 0.01, (2, 3, 6, 6)),
            requires_grad=True)
    return check_leaves(lambda t: ad.max_pool2d(x, 2, 2, t), [x], rng)


def suite_concat(rng):
    a, b = _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 3, 3, 3)
    return check_leaves(lambda t: ad.concat_channels([a, b], t), [a, b], rng)


def suite_dense(rng):
    layer = ad.Dense(5, 3, name="dense", rng=rng, dtype=np.float64)
    x = _leaf(rng, 4, 5)
    return check_leaves(lambda t: layer(x, t), [x, *layer.parameters()], rng)


def suite_activation(rng):
    x = _leaf(rng, 3, 4)
    worst = 0.0
    for fn in (ad.sigmoid, ad.tanh):
        worst = max(worst, check_leaves(lambda t, fn=fn: fn(x, t), [x], rng))
    # keep relu inputs away from the kink
    xr = Var(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True)
    worst = max(worst, check_leaves(lambda t: ad.relu(xr, t), [xr], rng))
    a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4)
    worst = max(worst, check_leaves(lambda t: ad.mul(a, b, t), [a, b], rng))
    worst = max(worst, check_leaves(lambda t: ad.add(a, b, t), [a, b], rng))
    m1, m2 = _leaf(rng, 3, 5), _leaf(rng, 5, 2)
    worst = max(worst, check_leaves(lambda t: ad.matmul(m1, m2, t), [m1, m2], rng))
    return worst


def suite_reshape(rng):
    x = _leaf(rng, 2, 1, 4, 4)
    return check_leaves(lambda t: ad.reshape(ad.sum_pool2d(x, 2, t), (2, 4), t), [x], rng)


def suite_reduce(rng):
    x = _leaf(rng, 4, 1, 3, 3)
    target = rng.standard_normal((2, 1, 3, 3))

    def build(t):
        top = ad.slice_rows(x, 0, 2, t)
        bottom = ad.slice_rows(x, 2, 4, t)
        sums = ad.sum_per_sample(bottom, t)
        err = ad.scale(ad.squared_error_sum(top, target, t), 0.25, t)
        return ad.add_scalars([err, ad.squared_error_sum(sums, np.ones((2, 1)), t)], [1.0, 0.3], t)

    return check_leaves(build, [x], rng)


def suite_lstm(rng, steps=5):
    from .lstm import StackedLSTM, lstm_window_forward
    lstm = StackedLSTM(6, 4, 3, rng=rng, dtype=np.float64)
    xs = [_leaf(rng, 2, 6) for _ in range(steps)]
    return check_leaves(lambda t: lstm_window_forward(xs, lstm, t, return_sequence=False),
                        [*xs, *lstm.parameters()], rng, samples=8)


def tiny_model(variant="FCN-rLSTM", seed=0):
    from .fcn import FCNConfig
    from .model import CountingModel, ModelConfig
    cfg = ModelConfig(variant=variant, height=8, width=8,
                      fcn=FCNConfig(base_channels=2, atrous_layers=2), hidden=4, lstm_layers=3,
                      unroll=3, seed=seed)
    model = CountingModel(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # non-zero head so the LSTM path carries gradient; non-zero biases keep
    # rectifier inputs off the kink at exactly 0
    for p in model.fc.parameters():
        p.value[...] = rng.uniform(-0.5, 0.5, p.shape)
    for name, p in model.named_parameters():
        if name.endswith(".bias") and not name.startswith("fc"):
            p.value[...] = rng.uniform(-0.1, 0.1, p.shape)
    return model


def model_loss_graph(model, frames, target_density, target_counts, lam=0.01):
    """Returns ``build(tape)`` computing the total multi-task loss of one batch."""
    from .training import batch_loss

    def build(tape):
        return batch_loss(model, frames, target_density, target_counts, lam, tape)[0]

    return build


def suite_network(rng, variant="FCN-rLSTM", samples=20):
    """Whole-model gradient of the total loss, sampled from each parameter group."""
    model = tiny_model(variant, seed=int(rng.integers(1 << 30)))
    n, m = 2, model.cfg.unroll
    frames = rng.uniform(0, 1, (n, m, 1, 8, 8))
    dens = rng.uniform(0, 0.05, (n, m, 1, 8, 8))
    counts = rng.uniform(0, 3, (n, m))
    build = model_loss_graph(model, frames, dens, counts)
    worst = 0.0
    out = build(None)
    del out
    ad.zero_grads(model.parameters())
    tape = Tape()
    loss = build(tape)
    tape.backward(loss)
    loss_fn = lambda: float(build(None).value)  # noqa: E731
    groups = model.parameter_groups()
    if not model.cfg.uses_lstm:
        groups = {"theta": groups["theta"]}
    for params in groups.values():
        sizes = np.array([p.value.size for p in params])
        picks = rng.choice(len(params), size=samples, p=sizes / sizes.sum())
        for k in picks:
            p = params[k]
            i = int(rng.integers(p.value.size))
            analytic = p.grad.reshape(-1)[i]
            numeric = numeric_grad(loss_fn, p.value, [i])[0]
            worst = max(worst, float(rel_error(analytic, numeric, floor=1e-6)))
    return worst


SUITES: dict[str, Callable[[np.random.Generator], float]] = {
    "conv": lambda rng: suite_conv(rng, 1),
    "atrous-conv": lambda rng: suite_conv(rng, 2),
    "deconv": suite_deconv,
    "maxpool": suite_maxpool,
    "concat": suite_concat,
    "dense": suite_dense,
    "activation": suite_activation,
    "reshape": suite_reshape,
    "reduce": suite_reduce,
    "lstm-bptt": suite_lstm,
    "network": suite_network,
}


def run_all(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {kind: fn(rng) for kind, fn in SUITES.items()}
