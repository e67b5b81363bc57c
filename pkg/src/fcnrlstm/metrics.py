"""Count error metrics."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError


def _residuals(pred, true) -> np.ndarray:
    pred, true = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(true, dtype=np.float64).ravel()
    if pred.size == 0:
        raise InvalidArgumentError("metrics need at least one prediction")
    if pred.shape != true.shape:
        raise InvalidArgumentError(f"{pred.size} predictions vs {true.size} targets")
    return pred - true


def mae(pred, true) -> float:
    return float(np.mean(np.abs(_residuals(pred, true))))


def mse(pred, true) -> float:
    r = _residuals(pred, true)
    return float(np.mean(r * r))
