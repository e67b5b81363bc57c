"""Multi-task loss, Adam, augmentation and the windowed training loop.

One iteration takes ``N`` windows of ``m`` consecutive frames, runs the FCN
on all ``N*m`` frames, the LSTM over each window, and minimises

    L = L_D + lam * sum_j L_C(j)

with ``L_D = 1/(2N) * sum over the N*m frames of ||F - F0||^2`` and
``L_C(j) = 1/(2N) * sum_n (C_nj - C0_nj)^2``. All parameter groups take one
joint Adam step; only the LSTM gradients are clipped.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .data import COUNT_TARGETS, CountingSequence
from .errors import InvalidArgumentError
from .metrics import mae, mse
from .model import VARIANTS, CountingModel, WindowOutput
from .supervision import GroundTruth

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "L_D", "L_C", "L", "train_mae", "val_mae")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "FCN-rLSTM"
    lam: float = 0.01
    learning_rate: float = 1e-4
    batch: int = 8
    unroll: int = 5
    epochs: int = 50
    max_iterations: int = 0            # 0 = no limit
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0             # LSTM parameters only; 0 disables
    use_density_loss: bool = True
    count_target: str = "labels"
    patience: int = 10
    restore_best: bool = True
    augment: bool = True
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    crop_min: float = 0.9              # smallest crop side, as a fraction of the frame side
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.8, 1.25)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.lam < 0:
            raise InvalidArgumentError(f"lam must be >= 0, got {self.lam}")
        if self.unroll < 1 or self.batch < 1:
            raise InvalidArgumentError("unroll and batch must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.count_target not in COUNT_TARGETS:
            raise InvalidArgumentError(f"count_target must be one of {COUNT_TARGETS}")
        if not 0 < self.crop_min <= 1:
            raise InvalidArgumentError("crop_min must lie in (0, 1]")
        if not (0 <= self.flip_prob <= 1 and 0 <= self.crop_prob <= 1):
            raise InvalidArgumentError("flip_prob and crop_prob must lie in [0, 1]")
        if self.patience < 1 or self.epochs < 0 or self.max_iterations < 0:
            raise InvalidArgumentError("patience must be >= 1; epochs and max_iterations >= 0")
        lo, hi = self.contrast
        if not 0 < lo <= hi:
            raise InvalidArgumentError("contrast range must satisfy 0 < low <= high")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "contrast" in d:
            d["contrast"] = tuple(d["contrast"])
        return cls(**d)


@dataclass
class LossBreakdown:
    L_D: float
    L_C: float
    L: float


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def density_loss(pred, target, n: int | None = None, tape: Tape | None = None) -> Var:
    """``1/(2n) * sum (pred - target)^2``; ``n`` defaults to ``pred.shape[0]``."""
    pred = _as_var(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"density shapes differ: {pred.shape} vs {target.shape}")
    n = pred.shape[0] if n is None else n
    return ad.scale(ad.squared_error_sum(pred, target.astype(pred.dtype, copy=False), tape), 1.0 / (2 * n), tape)


def count_loss(pred, target, n: int | None = None, tape: Tape | None = None) -> Var:
    """``1/(2n) * sum (C - C0)^2`` over one set of per-frame counts."""
    pred = _as_var(pred)
    target = np.asarray(target)
    if pred.value.size != target.size:
        raise InvalidArgumentError(f"{pred.value.size} predicted counts vs {target.size} targets")
    target = target.reshape(pred.shape).astype(pred.dtype, copy=False)
    n = pred.shape[0] if n is None else n
    return ad.scale(ad.squared_error_sum(pred, target, tape), 1.0 / (2 * n), tape)


def total_loss(l_d, l_c, lam: float, tape: Tape | None = None) -> Var:
    if lam < 0:
        raise InvalidArgumentError(f"lam must be >= 0, got {lam}")
    return ad.add_scalars([_as_var(l_d), _as_var(l_c)], [1.0, lam], tape)


def batch_loss(model: CountingModel, frames, target_density, target_counts, lam: float,
               tape: Tape | None = None, use_density_loss: bool = True
               ) -> tuple[Var, LossBreakdown, WindowOutput]:
    """Loss of ``N`` windows: frames/density ``[N, m, 1, H, W]``, counts ``[N, m]``."""
    frames = np.asarray(frames)
    n, m = frames.shape[:2]
    target_density = np.asarray(target_density)
    target_counts = np.asarray(target_counts, dtype=np.float64).reshape(n, m)
    if target_density.shape != frames.shape[:2] + (1,) + frames.shape[3:]:
        raise InvalidArgumentError(f"density targets {target_density.shape} vs frames {frames.shape}")
    out = model.forward_window(frames, tape)
    td = np.ascontiguousarray(target_density.transpose(1, 0, 2, 3, 4)).reshape(out.density.shape)
    l_d = density_loss(out.density, td, n, tape)
    parts = [count_loss(out.counts[j], target_counts[:, j], n, tape) for j in range(m)]
    l_c = ad.add_scalars(parts, [1.0] * m, tape)
    loss = total_loss(l_d, l_c, lam, tape) if use_density_loss else ad.add_scalars([l_c], [lam], tape)
    return loss, LossBreakdown(float(l_d.value), float(l_c.value), float(loss.value)), out


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def adam_step(param, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(param, m, v)``."""
    if t < 1:
        raise InvalidArgumentError("Adam step counter starts at 1")
    if not (np.shape(param) == np.shape(grad) == np.shape(m) == np.shape(v)):
        raise InvalidArgumentError("parameter, gradient and moment shapes differ")
    dt = np.asarray(param).dtype.type
    m = dt(beta1) * m + dt(1 - beta1) * grad
    v = dt(beta2) * v + dt(1 - beta2) * grad * grad
    m_hat = m / dt(1 - beta1 ** t)
    v_hat = v / dt(1 - beta2 ** t)
    return param - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps)), m, v


class Adam:
    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for k, p in enumerate(self.params):
            new, self.m[k], self.v[k] = adam_step(p.value, p.grad, self.m[k], self.v[k], self.t,
                                                 self.lr, *self.betas, self.eps)
            p.value[...] = new

    def load_state(self, t: int, m, v):
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise InvalidArgumentError("optimizer state does not match the parameter list")
        for k, p in enumerate(self.params):
            if m[k].shape != p.shape or v[k].shape != p.shape:
                raise InvalidArgumentError(f"optimizer state shape mismatch for {p.name}")
        self.t = int(t)
        self.m = [np.array(a, dtype=p.dtype) for a, p in zip(m, self.params)]
        self.v = [np.array(a, dtype=p.dtype) for a, p in zip(v, self.params)]


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the old norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= g.dtype.type(s)
    return norm


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugParams:
    flip: bool = False
    crop: tuple[int, int, int, int] | None = None   # top, left, height, width
    brightness: float = 0.0
    contrast: float = 1.0


def sample_augmentation(rng: np.random.Generator, cfg: TrainConfig, height: int, width: int) -> AugParams:
    # a fixed number of draws per call keeps the stream aligned whatever is enabled
    u = rng.random(8)
    if not cfg.augment:
        return AugParams()
    crop = None
    if u[1] < cfg.crop_prob and cfg.crop_min < 1:
        ch = max(1, int(round(height * (cfg.crop_min + (1 - cfg.crop_min) * u[2]))))
        cw = max(1, int(round(width * (cfg.crop_min + (1 - cfg.crop_min) * u[3]))))
        crop = (int(u[4] * (height - ch + 1)), int(u[5] * (width - cw + 1)), ch, cw)
    lo, hi = cfg.contrast
    contrast = math.exp(math.log(lo) + (math.log(hi) - math.log(lo)) * u[6])
    brightness = cfg.brightness * (2 * u[7] - 1)
    return AugParams(bool(u[0] < cfg.flip_prob), crop, brightness, contrast)


def apply_augmentation(frames: np.ndarray, density: np.ndarray, counts: np.ndarray, p: AugParams):
    """Apply one set of parameters to ``[..., H, W]`` frames and density maps.

    Flip and crop act on both; the crop keeps native scale, zero-fills outside
    the window and lowers each count by the density mass it removes.
    Brightness and contrast touch the frames only.
    """
    frames = np.array(frames, copy=True)
    density = np.array(density, copy=True)
    counts = np.array(counts, dtype=np.float64, copy=True)
    h, w = frames.shape[-2:]
    if p.contrast != 1.0 or p.brightness != 0.0:
        mean = frames.mean(axis=(-2, -1), keepdims=True)
        frames = ((frames - mean) * frames.dtype.type(p.contrast) + mean + frames.dtype.type(p.brightness)) \
            .astype(frames.dtype, copy=False)
    if p.flip:
        frames, density = frames[..., ::-1].copy(), density[..., ::-1].copy()
    if p.crop is not None:
        top, left, ch, cw = p.crop
        if ch > h or cw > w or top < 0 or left < 0 or top + ch > h or left + cw > w:
            raise InvalidArgumentError(f"crop {p.crop} does not fit a {h}x{w} frame")
        mask = np.zeros((h, w), dtype=bool)
        mask[top:top + ch, left:left + cw] = True
        before = density.reshape(density.shape[:-2] + (-1,)).sum(axis=-1, dtype=np.float64)
        frames = np.where(mask, frames, 0).astype(frames.dtype, copy=False)
        density = np.where(mask, density, 0).astype(density.dtype, copy=False)
        after = density.reshape(density.shape[:-2] + (-1,)).sum(axis=-1, dtype=np.float64)
        counts = counts - (before - after).reshape(counts.shape)
    return frames, density, counts


def augment(frame: np.ndarray, gt: GroundTruth, rng: np.random.Generator,
            cfg: TrainConfig = TrainConfig(), params: AugParams | None = None):
    """Single-frame form: returns ``(frame', GroundTruth')``."""
    h, w = frame.shape[-2:]
    p = params if params is not None else sample_augmentation(rng, cfg, h, w)
    f, d, c = apply_augmentation(frame, gt.density, np.array([gt.count]), p)
    return f, GroundTruth(d, float(c[0]))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def make_windows(sequences: list[CountingSequence], m: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping ``m``-frame windows ``(sequence index, start)`` of every sequence, shuffled."""
    out = [(k, s) for k, seq in enumerate(sequences) for s in range(0, len(seq) - m + 1, m)]
    return [out[i] for i in rng.permutation(len(out))]


def _assemble(sequences, windows, m, rng, cfg):
    frames, dens, counts = [], [], []
    for k, s in windows:
        seq = sequences[k]
        p = sample_augmentation(rng, cfg, *seq.size)
        f, d, c = apply_augmentation(seq.frames[s:s + m], seq.density[s:s + m], seq.counts[s:s + m], p)
        frames.append(f)
        dens.append(d)
        counts.append(c)
    return np.stack(frames), np.stack(dens), np.stack(counts)


def evaluate(model: CountingModel, sequences: list[CountingSequence]) -> dict:
    """Per-frame count MAE/MSE over whole sequences, frames taken in stored order."""
    preds = [model.predict_sequence(seq.frames)[1] for seq in sequences]
    pred = np.concatenate(preds) if preds else np.zeros(0)
    true = np.concatenate([seq.counts for seq in sequences]) if sequences else np.zeros(0)
    return {"mae": mae(pred, true), "mse": mse(pred, true), "pred": pred, "true": true}


def _check_sizes(model: CountingModel, sequences):
    want = (model.cfg.height, model.cfg.width)
    for seq in sequences:
        if seq.size != want:
            raise InvalidArgumentError(f"sequence {seq.name} is {seq.size}, model expects {want}")


def write_curve(path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[c]:.10g}" for c in CURVE_COLUMNS[1:]])


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


@dataclass
class TrainResult:
    model: CountingModel
    history: list[dict]
    best_epoch: int
    best_val_mae: float | None
    iterations: int
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def train(model: CountingModel, train_seqs: list[CountingSequence], val_seqs: list[CountingSequence] = (),
          cfg: TrainConfig = TrainConfig(), out_dir=None, resume=None, callback=None) -> TrainResult:
    """Train ``model`` in place.

    With ``out_dir`` set, ``last.ckpt`` (everything needed to resume) and
    ``curve.csv`` are rewritten after every epoch and ``model.ckpt`` holds the
    final weights. ``resume`` is a checkpoint path written by an earlier call
    with the same data and config.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    train_seqs, val_seqs = list(train_seqs), list(val_seqs)
    if model.variant != cfg.variant:
        raise InvalidArgumentError(f"model is {model.variant}, config trains {cfg.variant}")
    if model.cfg.uses_lstm and model.cfg.unroll != cfg.unroll:
        raise InvalidArgumentError(f"model unrolls {model.cfg.unroll}, config uses windows of {cfg.unroll}")
    if not train_seqs:
        raise InvalidArgumentError("no training sequences")
    _check_sizes(model, train_seqs + val_seqs)

    params = model.parameters()
    lstm_params = model.lstm.parameters()
    opt = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    state = {"epoch": 0, "iteration": 0, "best_val": None, "best_epoch": 0, "bad_epochs": 0,
             "stopped": False, "history": []}
    best = None
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model.cfg != model.cfg:
            raise InvalidArgumentError("checkpoint model config differs from the model being trained")
        for p, q in zip(params, ck.model.parameters()):
            p.value[...] = q.value
        if ck.adam_m is not None:
            opt.load_state(ck.adam_t, ck.adam_m, ck.adam_v)
        best = [b.copy() for b in ck.best] if ck.best is not None else None
        state = dict(ck.state)
        rng.bit_generator.state = state.pop("rng")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = state["history"]
    for epoch in range(state["epoch"], cfg.epochs):
        if state["stopped"]:
            break
        windows = make_windows(train_seqs, cfg.unroll, rng)
        if not windows:
            raise InvalidArgumentError(f"no sequence has {cfg.unroll} frames")
        totals, batches, abs_err, n_counts = np.zeros(3), 0, 0.0, 0
        for s in range(0, len(windows), cfg.batch):
            if cfg.max_iterations and state["iteration"] >= cfg.max_iterations:
                state["stopped"] = True
                break
            frames, dens, counts = _assemble(train_seqs, windows[s:s + cfg.batch], cfg.unroll, rng, cfg)
            ad.zero_grads(params)
            tape = Tape()
            loss, br, out = batch_loss(model, frames, dens, counts, cfg.lam, tape, cfg.use_density_loss)
            tape.backward(loss)
            if cfg.clip_norm > 0:
                clip_global_norm([p.grad for p in lstm_params], cfg.clip_norm)
            opt.step()
            state["iteration"] += 1
            totals += (br.L_D, br.L_C, br.L)
            batches += 1
            pred = np.stack([c.value[:, 0] for c in out.counts], axis=1)
            abs_err += float(np.abs(pred - counts).sum())
            n_counts += counts.size
        if batches == 0:
            break
        val_mae = evaluate(model, val_seqs)["mae"] if val_seqs else float("nan")
        means = totals / batches
        row = {"epoch": epoch + 1, "L_D": float(means[0]), "L_C": float(means[1]), "L": float(means[2]),
               "train_mae": abs_err / n_counts, "val_mae": val_mae}
        history.append(row)
        if val_seqs:
            if state["best_val"] is None or val_mae < state["best_val"]:
                state["best_val"], state["best_epoch"], state["bad_epochs"] = val_mae, epoch + 1, 0
                best = [p.value.copy() for p in params]
            else:
                state["bad_epochs"] += 1
                if state["bad_epochs"] >= cfg.patience:
                    state["stopped"] = True
        state["epoch"] = epoch + 1
        log.info("%s epoch %d  L=%.5g  L_D=%.5g  L_C=%.5g  train MAE %.4f  val MAE %.4f", cfg.variant,
                 epoch + 1, row["L"], row["L_D"], row["L_C"], row["train_mae"], val_mae)
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", model, opt, cfg.to_dict(),
                            {**state, "rng": rng.bit_generator.state}, best)
            write_curve(out_dir / "curve.csv", history)
        if callback is not None:
            callback(row)

    if cfg.restore_best and best is not None:
        for p, b in zip(params, best):
            p.value[...] = b
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model, None, cfg.to_dict(),
                        {"best_epoch": state["best_epoch"], "best_val": state["best_val"]})
    return TrainResult(model, history, state["best_epoch"], state["best_val"], state["iteration"],
                       state["stopped"])
