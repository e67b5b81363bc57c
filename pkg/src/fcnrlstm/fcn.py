"""Fully convolutional density estimator with hyper-atrous feature combination.

Layout (defaults, ``b = base_channels = 16``)::

    conv1a b -> conv1b b -> pool /2 -> conv2a 2b -> conv2b 2b -> pool /2
      -> atrous_1..k 4b (dilation r)                        (all at H/4 x W/4)
      -> concat [pool2, atrous_1, ..., atrous_k]           (hyper combination)
      -> 1x1 re-weight 4b -> deconv x2 2b -> deconv x2 b -> 1x1 regressor 1

Every 3x3 conv, atrous conv, the re-weighting conv and both deconvolutions are
followed by a rectifier. The regressor is linear, so the raw density can dip
below zero; it is left that way for the loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Conv2d, Deconv2d, MaxPool2d, Tape, Var
from .errors import InvalidArgumentError
from .ops import ConvSpec

# Fixed multiplier on the regressor output. Per-pixel densities are ~1e-3, so
# without it one Adam step on the regressor bias moves a 64x64 frame's count
# by several vehicles and the count calibration jitters from step to step.
OUTPUT_SCALE = 0.01


@dataclass(frozen=True)
class FCNConfig:
    in_channels: int = 1
    base_channels: int = 16
    atrous_layers: int = 3
    atrous_rate: int = 2
    use_atrous: bool = True
    use_hyper: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.atrous_layers < 1:
            raise InvalidArgumentError(f"channel and layer counts must be >= 1: {self}")
        if self.atrous_rate < 1:
            raise InvalidArgumentError("atrous_rate must be >= 1")

    @property
    def dilation(self) -> int:
        return self.atrous_rate if self.use_atrous else 1

    @property
    def combined_channels(self) -> int:
        b = self.base_channels
        if self.use_hyper:
            return 2 * b + self.atrous_layers * 4 * b
        return 4 * b

    def to_dict(self) -> dict:
        return asdict(self)


def hyper_atrous_combine(pool2_features: Var, atrous_features: list[Var], tape: Tape | None = None,
                         use_hyper: bool = True) -> Var:
    """Stack ``[pool2, atrous_1, ..., atrous_k]`` along channels.

    With ``use_hyper=False`` only the last atrous output passes through.
    """
    if not atrous_features:
        raise InvalidArgumentError("need at least one atrous feature map")
    if not use_hyper:
        return atrous_features[-1]
    return ad.concat_channels([pool2_features, *atrous_features], tape)


def reweight_features(volume: Var, weights_1x1: Var, bias: Var | None, tape: Tape | None = None) -> Var:
    """Per-pixel linear recombination of channels by a 1x1 convolution."""
    if weights_1x1.value.ndim != 4 or weights_1x1.shape[2:] != (1, 1):
        raise InvalidArgumentError(f"re-weighting kernel must be 1x1, got {weights_1x1.shape}")
    return ad.conv2d(volume, weights_1x1, bias, ConvSpec(1, 1), tape)


class FCN:
    """Parameter container and forward rule for the density network."""

    def __init__(self, cfg: FCNConfig = FCNConfig(), rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        b, k = cfg.base_channels, dict(rng=rng, dtype=dtype)
        self.conv1a = Conv2d(cfg.in_channels, b, 3, name="conv1a", **k)
        self.conv1b = Conv2d(b, b, 3, name="conv1b", **k)
        self.pool1 = MaxPool2d(2, 2, name="pool1")
        self.conv2a = Conv2d(b, 2 * b, 3, name="conv2a", **k)
        self.conv2b = Conv2d(2 * b, 2 * b, 3, name="conv2b", **k)
        self.pool2 = MaxPool2d(2, 2, name="pool2")
        self.atrous = []
        in_ch = 2 * b
        for i in range(cfg.atrous_layers):
            self.atrous.append(Conv2d(in_ch, 4 * b, 3, dilation=cfg.dilation, name=f"atrous{i + 1}", **k))
            in_ch = 4 * b
        self.reweight = Conv2d(cfg.combined_channels, 4 * b, 1, name="reweight1x1", **k)
        self.deconv1 = Deconv2d(4 * b, 2 * b, 4, 2, 1, name="deconv1", **k)
        self.deconv2 = Deconv2d(2 * b, b, 4, 2, 1, name="deconv2", **k)
        self.regressor = Conv2d(b, 1, 1, name="regressor1x1", **k)

    def layers(self):
        return [self.conv1a, self.conv1b, self.pool1, self.conv2a, self.conv2b, self.pool2,
                *self.atrous, self.reweight, self.deconv1, self.deconv2, self.regressor]

    def named_parameters(self):
        for layer in self.layers():
            for p in layer.params.values():
                yield p.name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def forward(self, frames: Var, tape: Tape | None = None) -> Var:
        return fcn_forward(frames, self, tape)

    __call__ = forward


def fcn_forward(frame: Var, params: FCN, tape: Tape | None = None) -> Var:
    """Map ``[N, C, H, W]`` frames to ``[N, 1, H, W]`` density maps."""
    if not isinstance(frame, Var):
        frame = Var(frame)
    if frame.value.ndim != 4:
        raise InvalidArgumentError(f"frames must be NCHW, got {frame.shape}")
    _, c, h, w = frame.shape
    if h % 4 or w % 4:
        raise InvalidArgumentError(f"frame size {h}x{w} must be divisible by 4")
    if c != params.cfg.in_channels:
        raise InvalidArgumentError(f"frames have {c} channels, network expects {params.cfg.in_channels}")

    x = ad.relu(params.conv1a(frame, tape), tape)
    x = ad.relu(params.conv1b(x, tape), tape)
    x = params.pool1(x, tape)
    x = ad.relu(params.conv2a(x, tape), tape)
    x = ad.relu(params.conv2b(x, tape), tape)
    pooled = params.pool2(x, tape)

    atrous_out = []
    x = pooled
    for layer in params.atrous:
        x = ad.relu(layer(x, tape), tape)
        atrous_out.append(x)

    volume = hyper_atrous_combine(pooled, atrous_out, tape, use_hyper=params.cfg.use_hyper)
    x = ad.relu(reweight_features(volume, params.reweight.weight, params.reweight.bias, tape), tape)
    x = ad.relu(params.deconv1(x, tape), tape)
    x = ad.relu(params.deconv2(x, tape), tape)
    return ad.scale(params.regressor(x, tape), OUTPUT_SCALE, tape)
