"""The five network configurations (FCN-A, FCN-H, FCN-HA, FCN-dLSTM, FCN-rLSTM).

All variants carry the same three parameter groups so checkpoints share one
layout: FCN weights (``theta``), the LSTM stack (``gamma``) and the residual
head (``phi``). FCN-only variants simply never touch the last two.

Parameter order, which the checkpoint format relies on:
FCN layers in forward order (weight then bias), then LSTM layers 1..L with
``W_xi W_xf W_xc W_xo W_hi W_hf W_hc W_ho w_ci w_cf w_co b_i b_f b_c b_o``,
then ``fc.weight``, ``fc.bias``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import InvalidArgumentError
from .fcn import FCN, FCNConfig
from .lstm import ResidualHead, StackedLSTM, lstm_window_forward, residual_count

VARIANTS = ("FCN-A", "FCN-H", "FCN-HA", "FCN-dLSTM", "FCN-rLSTM")

_FLAGS = {
    # variant: (atrous, hyper, lstm, residual)
    "FCN-A": (True, False, False, False),
    "FCN-H": (False, True, False, False),
    "FCN-HA": (True, True, False, False),
    "FCN-dLSTM": (True, True, True, False),
    "FCN-rLSTM": (True, True, True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "FCN-rLSTM"
    height: int = 64
    width: int = 64
    fcn: FCNConfig = field(default_factory=FCNConfig)
    hidden: int = 100
    lstm_layers: int = 3
    unroll: int = 5
    lstm_input_downsample: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in _FLAGS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.height % 4 or self.width % 4:
            raise InvalidArgumentError("frame height and width must be divisible by 4")
        k = self.lstm_input_downsample
        if k < 1 or self.height % k or self.width % k:
            raise InvalidArgumentError(f"lstm_input_downsample {k} must divide the frame size")
        if self.unroll < 1:
            raise InvalidArgumentError("unroll must be >= 1")

    @property
    def uses_lstm(self) -> bool:
        return _FLAGS[self.variant][2]

    @property
    def residual(self) -> bool:
        return _FLAGS[self.variant][3]

    @property
    def effective_fcn(self) -> FCNConfig:
        atrous, hyper = _FLAGS[self.variant][:2]
        return replace(self.fcn, use_atrous=atrous, use_hyper=hyper)

    @property
    def lstm_input_dim(self) -> int:
        k = self.lstm_input_downsample
        return (self.height // k) * (self.width // k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fcn"] = self.fcn.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["fcn"] = FCNConfig(**d["fcn"])
        return cls(**d)


@dataclass
class WindowOutput:
    """Outputs for a batch of ``N`` windows of ``m`` frames, stored time-major.

    ``density`` is ``[m*N, 1, H, W]`` with frame ``j`` of window ``n`` at row
    ``j*N + n``; ``counts[j]`` is ``[N, 1]``.
    """

    density: Var
    counts: list[Var]
    base_counts: list[Var]


class CountingModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.fcn = FCN(cfg.effective_fcn, rng=rng, dtype=dtype)
        self.lstm = StackedLSTM(cfg.lstm_input_dim, cfg.hidden, cfg.lstm_layers, rng=rng, dtype=dtype)
        self.fc = ResidualHead(cfg.hidden, rng=rng, dtype=dtype, zero_init=True)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def named_parameters(self):
        yield from self.fcn.named_parameters()
        yield from self.lstm.named_parameters()
        for p in self.fc.params.values():
            yield p.name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_groups(self) -> dict[str, list]:
        return {"theta": self.fcn.parameters(), "gamma": self.lstm.parameters(),
                "phi": self.fc.parameters()}

    def forward_window(self, frames, tape: Tape | None = None) -> WindowOutput:
        """Run a ``[N, m, C, H, W]`` batch of windows."""
        frames = np.asarray(frames)
        if frames.ndim != 5:
            raise InvalidArgumentError(f"expected [N, m, C, H, W] windows, got shape {frames.shape}")
        n, m, c, h, w = frames.shape
        if (h, w) != (self.cfg.height, self.cfg.width):
            raise InvalidArgumentError(
                f"frames are {h}x{w}, model was built for {self.cfg.height}x{self.cfg.width}")
        if self.cfg.uses_lstm and m != self.cfg.unroll:
            raise InvalidArgumentError(f"window of {m} frames, model unrolls {self.cfg.unroll}")
        x = Var(np.ascontiguousarray(frames.transpose(1, 0, 2, 3, 4)).reshape(m * n, c, h, w)
                .astype(self.dtype, copy=False))
        density = self.fcn(x, tape)
        per_step = [ad.slice_rows(density, j * n, (j + 1) * n, tape) for j in range(m)] if m > 1 \
            else [density]
        base = [ad.sum_per_sample(d, tape) for d in per_step]
        if not self.cfg.uses_lstm:
            return WindowOutput(density, base, base)
        k = self.cfg.lstm_input_downsample
        vectors = [ad.reshape(ad.sum_pool2d(d, k, tape), (n, self.cfg.lstm_input_dim), tape)
                   for d in per_step]
        tops = lstm_window_forward(vectors, self.lstm, tape, return_sequence=True)
        counts = [residual_count(hj, self.fc, dj, tape, residual=self.cfg.residual, base_count=bj)
                  for hj, dj, bj in zip(tops, per_step, base)]
        return WindowOutput(density, counts, base)

    def density_maps(self, frames, chunk: int = 32) -> np.ndarray:
        """FCN output for ``[T, C, H, W]`` frames, no tape."""
        frames = np.asarray(frames, dtype=self.dtype)
        out = [self.fcn(Var(frames[s:s + chunk])).value for s in range(0, len(frames), chunk)]
        return np.concatenate(out, axis=0)

    def predict_sequence(self, frames, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame density maps and counts for one ordered ``[T, C, H, W]`` sequence.

        Frame ``t`` is counted from the window ending at ``t`` (shorter at the
        start of the sequence), each window starting from a zero LSTM state.
        """
        dens = self.density_maps(frames, chunk)
        t_total = len(dens)
        base = dens.reshape(t_total, -1).sum(axis=1)
        if not self.cfg.uses_lstm:
            return dens, base.astype(np.float64)
        m, k = self.cfg.unroll, self.cfg.lstm_input_downsample
        hk, wk = self.cfg.height // k, self.cfg.width // k
        vec = dens.reshape(t_total, hk, k, wk, k).sum(axis=(2, 4)).reshape(t_total, -1)
        counts = np.empty(t_total, dtype=np.float64)
        for length in range(1, m + 1):
            ends = np.arange(length - 1, t_total) if length == m else np.array([length - 1])
            ends = ends[ends < t_total]
            if len(ends) == 0:
                continue
            for s in range(0, len(ends), 256):
                e = ends[s:s + 256]
                seq = [Var(vec[e - length + 1 + j]) for j in range(length)]
                top = lstm_window_forward(seq, self.lstm)
                g = self.fc(top).value[:, 0]
                counts[e] = g + (base[e] if self.cfg.residual else 0.0)
        return dens, counts
