"""Ablation runs shared by the ``ablate`` command and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import synthdata
from .data import CountingSequence, from_labeled
from .fcn import FCNConfig
from .model import VARIANTS, CountingModel, ModelConfig
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

# count regressor without density supervision, used as the slow baseline
DIRECT = "direct"


@dataclass(frozen=True)
class ExperimentConfig:
    scene: synthdata.SceneConfig = field(default_factory=synthdata.SceneConfig)
    sequences: int = 50
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    data_seed: int = 0
    base_channels: int = 4
    atrous_layers: int = 3
    hidden: int = 100
    lstm_layers: int = 3
    lstm_input_downsample: int = 1
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, variant: str) -> ModelConfig:
        return ModelConfig(variant=variant, height=self.scene.height, width=self.scene.width,
                           fcn=FCNConfig(base_channels=self.base_channels, atrous_layers=self.atrous_layers),
                           hidden=self.hidden, lstm_layers=self.lstm_layers, unroll=self.train.unroll,
                           lstm_input_downsample=self.lstm_input_downsample,
                           seed=self.model_seed)


@dataclass
class VariantResult:
    variant: str
    history: list[dict]
    test_mae: float
    test_mse: float
    best_epoch: int
    seconds: float
    model: CountingModel | None = None

    @property
    def val_curve(self) -> np.ndarray:
        return np.array([row["val_mae"] for row in self.history])


def build_splits(cfg: ExperimentConfig, shuffled: bool = False, shuffle_seed: int = 1
                 ) -> dict[str, list[CountingSequence]]:
    labeled = synthdata.generate_dataset(cfg.scene, cfg.sequences, cfg.data_seed)
    parts = synthdata.split(labeled, cfg.ratios, cfg.data_seed)
    if shuffled:
        parts = tuple(synthdata.shuffle_temporal(p, shuffle_seed + k) for k, p in enumerate(parts))
    return {name: [from_labeled(s, count_target=cfg.train.count_target) for s in part]
            for name, part in zip(("train", "val", "test"), parts)}


def run_variant(variant: str, splits: dict, cfg: ExperimentConfig, out_dir=None,
                keep_model: bool = False) -> VariantResult:
    arch = "FCN-dLSTM" if variant == DIRECT else variant
    tcfg = replace(cfg.train, variant=arch, use_density_loss=variant != DIRECT)
    model = CountingModel(cfg.model_config(arch))
    start = time.perf_counter()
    res = train(model, splits["train"], splits["val"], tcfg, out_dir=out_dir)
    report = evaluate(model, splits["test"])
    seconds = time.perf_counter() - start
    log.info("%s: test MAE %.4f (best epoch %d, %.0fs)", variant, report["mae"], res.best_epoch, seconds)
    return VariantResult(variant, res.history, report["mae"], report["mse"], res.best_epoch, seconds,
                         model if keep_model else None)


def ablation(splits: dict, cfg: ExperimentConfig, variants=VARIANTS, out_dir=None) -> dict[str, VariantResult]:
    out = {}
    for v in variants:
        sub = None if out_dir is None else f"{out_dir}/{v}"
        out[v] = run_variant(v, splits, cfg, sub)
    return out


def format_table(results: dict[str, VariantResult]) -> str:
    lines = [f"{'Method':<12} {'MAE':>8} {'MSE':>8} {'epochs':>7}"]
    for v, r in results.items():
        lines.append(f"{v:<12} {r.test_mae:8.4f} {r.test_mse:8.4f} {len(r.history):7d}")
    return "\n".join(lines)


def epochs_to_reach(curve, level: float) -> int | None:
    """First 1-based epoch whose value is at or below ``level``; ``None`` if never."""
    hits = np.flatnonzero(np.asarray(curve) <= level)
    return int(hits[0]) + 1 if hits.size else None
