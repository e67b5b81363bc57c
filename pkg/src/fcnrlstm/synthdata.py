"""Synthetic traffic-camera sequences with exact box labels.

Vehicles drive down vertical lanes from the top ("far") edge to the bottom
("near") edge. Apparent size and speed scale with a linear perspective
factor ``s(y) = a + b*y`` that runs from ``1/perspective_ratio`` at row 0 to 1
at the last row. A vehicle with ground speed ``v`` moves by ``dy/dt = v*s(y)``,
which integrates to ``s(t+1) = s(t) * exp(v*b)`` and is applied exactly once
per frame.

With ``occlusion`` on, every vehicle draws its own speed, so faster vehicles
drive through slower ones in the same lane and the nearer one is painted on
top. With it off, all vehicles in a lane share one speed and never overlap.

With ``degrade_prob`` > 0 single frames lose most of their contrast (haze,
glare, exposure glitches). Labels are unaffected, so such frames can only be
counted well with help from their neighbours.

A vehicle is annotated while at least two of its rows and columns are in the
frame; its box is the inclusive pixel extent of the painted rectangle after
clipping to the frame (occluded pixels included).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .supervision import AnnotationSet


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    frames: int = 100
    arrival_rate: float = 0.25          # Poisson mean of new vehicles per frame
    speed_range: tuple[float, float] = (2.0, 5.0)   # pixels/frame at the near edge
    perspective_ratio: float = 3.0      # near size / far size
    lanes: int = 4
    car_size: tuple[float, float] = (8.0, 12.0)     # (width, length) at the near edge
    oversize_size: tuple[float, float] = (8.0, 28.0)
    oversize_prob: float = 0.15
    occlusion: bool = True
    noise: float = 0.03
    background: float = 0.2
    intensity_range: tuple[float, float] = (0.55, 0.95)
    band: tuple[int, int] | None = None  # counting rows [top, bottom); None = whole frame
    degrade_prob: float = 0.0            # chance a frame is a low-visibility frame
    degrade_contrast: tuple[float, float] = (0.05, 0.3)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.frames < 1:
            raise InvalidArgumentError("frame size and sequence length must be >= 1")
        if self.arrival_rate < 0:
            raise InvalidArgumentError("arrival_rate must be >= 0")
        if self.perspective_ratio < 1:
            raise InvalidArgumentError("perspective_ratio must be >= 1")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise InvalidArgumentError("speed_range must satisfy 0 < low <= high")
        if not 0 <= self.oversize_prob <= 1:
            raise InvalidArgumentError("oversize_prob must lie in [0, 1]")
        if not 0 <= self.degrade_prob <= 1:
            raise InvalidArgumentError("degrade_prob must lie in [0, 1]")
        if not 0 <= self.degrade_contrast[0] <= self.degrade_contrast[1] <= 1:
            raise InvalidArgumentError("degrade_contrast must satisfy 0 <= low <= high <= 1")
        if self.lanes < 1:
            raise InvalidArgumentError("need at least one lane")
        if self.band is not None and not 0 <= self.band[0] < self.band[1] <= self.height:
            raise InvalidArgumentError(f"band {self.band} outside the frame")

    @property
    def far_scale(self) -> float:
        return 1.0 / self.perspective_ratio

    @property
    def scale_slope(self) -> float:
        return (1.0 - self.far_scale) / max(self.height - 1, 1)

    @property
    def counting_band(self) -> tuple[int, int]:
        return self.band if self.band is not None else (0, self.height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("speed_range", "car_size", "oversize_size", "intensity_range", "band", "degrade_contrast"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LabeledSequence:
    frames: np.ndarray                 # [T, 1, H, W] float32
    annotations: list[AnnotationSet]   # boxes per frame
    counts: np.ndarray                 # [T] boxes intersecting the counting band
    vehicle_ids: list[list[int]] = field(default_factory=list)
    order: np.ndarray | None = None    # original frame index of each position
    name: str = ""

    def __post_init__(self):
        if self.order is None:
            self.order = np.arange(len(self.frames))


@dataclass
class _Vehicle:
    ident: int
    lane: int
    scale: float       # perspective factor at the vehicle centre
    speed: float
    width: float
    length: float
    intensity: float


def entry_scale(cfg: SceneConfig, length: float) -> float:
    """Perspective factor at the moment the vehicle's second row enters the frame."""
    a, b = cfg.far_scale, cfg.scale_slope
    y = (0.5 - length * a / 2) / (1 + length * b / 2)
    return a + b * y


def _raster(lo: float, hi: float) -> tuple[int, int]:
    return math.floor(lo + 0.5), math.floor(hi + 0.5)


def generate(config: SceneConfig, seed: int) -> LabeledSequence:
    """Simulate one sequence; identical ``(config, seed)`` give identical output."""
    cfg = config
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    a, b = cfg.far_scale, cfg.scale_slope
    lane_w = w / cfg.lanes
    lane_speed = rng.uniform(*cfg.speed_range, size=cfg.lanes)

    background = np.full((h, w), cfg.background, dtype=np.float64)
    for k in range(1, cfg.lanes):
        background[:, int(round(k * lane_w))] += 0.08
    band_top, band_bottom = cfg.counting_band

    vehicles: list[_Vehicle] = []
    next_id = 0
    frames = np.empty((cfg.frames, 1, h, w), dtype=np.float32)
    annotations, counts, ids = [], np.zeros(cfg.frames, dtype=np.int64), []

    for t in range(cfg.frames):
        for _ in range(rng.poisson(cfg.arrival_rate)):
            oversize = rng.random() < cfg.oversize_prob
            vw, vl = cfg.oversize_size if oversize else cfg.car_size
            lane = int(rng.integers(cfg.lanes))
            speed = float(rng.uniform(*cfg.speed_range)) if cfg.occlusion else float(lane_speed[lane])
            phase = rng.random()
            scale = entry_scale(cfg, vl) * math.exp(-speed * b * phase)
            intensity = float(rng.uniform(*cfg.intensity_range))
            if not cfg.occlusion and _lane_blocked(vehicles, lane, scale, vl, a, b):
                continue
            vehicles.append(_Vehicle(next_id, lane, scale, speed, vw, vl, intensity))
            next_id += 1

        img = background.copy()
        boxes, frame_ids = [], []
        for v in sorted(vehicles, key=lambda v: v.scale):
            yc = (v.scale - a) / b
            half_l, half_w = v.length * v.scale / 2, v.width * v.scale / 2
            xc = (v.lane + 0.5) * lane_w
            r0, r1 = _raster(yc - half_l, yc + half_l)
            c0, c1 = _raster(xc - half_w, xc + half_w)
            r0, r1 = max(r0, 0), min(r1, h - 1)
            c0, c1 = max(c0, 0), min(c1, w - 1)
            if r1 - r0 < 1 or c1 - c0 < 1:
                continue
            img[r0:r1 + 1, c0:c1 + 1] = v.intensity
            boxes.append((c0, r0, c1, r1))
            frame_ids.append(v.ident)
        if cfg.degrade_prob > 0 and rng.random() < cfg.degrade_prob:
            # haze or glare: scene contrast collapses toward the mean level for this frame only
            img = img.mean() + rng.uniform(*cfg.degrade_contrast) * (img - img.mean())
        img += rng.normal(0.0, cfg.noise, size=img.shape) if cfg.noise > 0 else 0.0
        frames[t, 0] = img
        counted = [box for box in boxes if box[1] < band_bottom and box[3] >= band_top]
        annotations.append(AnnotationSet(t, boxes=counted))
        counts[t] = len(counted)
        ids.append(frame_ids)

        for v in vehicles:
            v.scale *= math.exp(v.speed * b)
        vehicles = [v for v in vehicles if _raster(*_extent(v, a, b))[0] <= h - 2]

    return LabeledSequence(frames, annotations, counts, ids)


def _extent(v: _Vehicle, a: float, b: float) -> tuple[float, float]:
    yc = (v.scale - a) / b
    return yc - v.length * v.scale / 2, yc + v.length * v.scale / 2


def _lane_blocked(vehicles, lane, scale, length, a, b) -> bool:
    probe = _Vehicle(-1, lane, scale, 0.0, 0.0, length, 0.0)
    bottom_new = _extent(probe, a, b)[1]
    return any(v.lane == lane and _extent(v, a, b)[0] - 1.0 < bottom_new for v in vehicles)


def mean_transit_frames(cfg: SceneConfig, speed: float, length: float) -> float:
    """Closed-form number of frames a vehicle stays annotated (whole-frame band)."""
    a, b, h = cfg.far_scale, cfg.scale_slope, cfg.height
    y_in = (0.5 - length * a / 2) / (1 + length * b / 2)
    y_out = (h - 1.5 + length * a / 2) / (1 - length * b / 2)
    return math.log((a + b * y_out) / (a + b * y_in)) / (speed * b)


def generate_dataset(config: SceneConfig, sequences: int, seed: int) -> list[LabeledSequence]:
    seeds = np.random.SeedSequence(seed).spawn(sequences)
    out = []
    for k, ss in enumerate(seeds):
        seq = generate(config, int(ss.generate_state(1)[0]))
        seq.name = f"seq_{k:04d}"
        out.append(seq)
    return out


def split(dataset: list, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[list, ...]:
    """Partition whole sequences; no sequence is shared between parts."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise InvalidArgumentError(f"ratios must be non-negative and sum to 1, got {ratios}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(ratios) * n).astype(int)
    parts, start = [], 0
    for r, stop in zip(ratios, bounds):
        idx = sorted(perm[start:stop])
        if r > 0 and not idx:
            raise InvalidArgumentError(f"ratio {r} leaves an empty partition for {n} sequences")
        parts.append([dataset[i] for i in idx])
        start = stop
    return tuple(parts)


def shuffle_temporal(dataset: list[LabeledSequence], seed: int) -> list[LabeledSequence]:
    """Permute frame order inside each sequence, carrying labels along."""
    rng = np.random.default_rng(seed)
    out = []
    for seq in dataset:
        perm = rng.permutation(len(seq.frames))
        anns = [seq.annotations[i] for i in perm]
        out.append(LabeledSequence(seq.frames[perm], anns, seq.counts[perm],
                                   [seq.vehicle_ids[i] for i in perm] if seq.vehicle_ids else [],
                                   seq.order[perm], seq.name))
    return out
