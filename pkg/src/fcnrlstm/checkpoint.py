"""Model checkpoints in the tensor container format.

Header keys: ``format`` (``"fcnrlstm-checkpoint"``), ``variant``, ``dtype``,
``model_config``, ``train_config``, ``adam_t`` and a free-form ``state``.
Tensors, in this order:

* ``param/<name>`` for every parameter, in ``CountingModel.named_parameters`` order
* ``adam.m/<name>`` and ``adam.v/<name>`` when optimizer state is saved
* ``best/<name>`` when a best-so-far parameter snapshot is saved
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import FormatError
from .model import CountingModel, ModelConfig

FORMAT = "fcnrlstm-checkpoint"


@dataclass
class Checkpoint:
    model: CountingModel
    train_config: dict | None = None
    adam_t: int = 0
    adam_m: list[np.ndarray] | None = None
    adam_v: list[np.ndarray] | None = None
    best: list[np.ndarray] | None = None
    state: dict = field(default_factory=dict)


def save_checkpoint(path, model: CountingModel, optimizer=None, train_config: dict | None = None,
                    state: dict | None = None, best: list[np.ndarray] | None = None):
    names = [name for name, _ in model.named_parameters()]
    tensors = [(f"param/{n}", p.value) for n, p in model.named_parameters()]
    if optimizer is not None:
        tensors += [(f"adam.m/{n}", a) for n, a in zip(names, optimizer.m)]
        tensors += [(f"adam.v/{n}", a) for n, a in zip(names, optimizer.v)]
    if best is not None:
        tensors += [(f"best/{n}", a) for n, a in zip(names, best)]
    header = {
        "format": FORMAT,
        "variant": model.variant,
        "dtype": model.dtype.name,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config,
        "adam_t": 0 if optimizer is None else int(optimizer.t),
        "state": state or {},
    }
    write_container(Path(path), tensors, header)


def _group(tensors, prefix, names, params):
    keys = [f"{prefix}/{n}" for n in names]
    present = [k in tensors for k in keys]
    if not any(present):
        return None
    if not all(present):
        raise FormatError(f"checkpoint has a partial {prefix!r} group")
    out = []
    for k, p in zip(keys, params):
        if tensors[k].shape != p.shape:
            raise FormatError(f"{k}: shape {tensors[k].shape}, model expects {p.shape}")
        out.append(tensors[k])
    return out


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("format") != FORMAT:
        raise FormatError(f"{path}: not a model checkpoint")
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
        model = CountingModel(cfg, dtype=np.dtype(header["dtype"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad model config in header ({exc})") from exc
    named = list(model.named_parameters())
    names, params = [n for n, _ in named], [p for _, p in named]
    values = _group(tensors, "param", names, params)
    if values is None:
        raise FormatError(f"{path}: no parameters stored")
    for p, v in zip(params, values):
        if v.dtype != p.dtype:
            raise FormatError(f"{p.name}: dtype {v.dtype}, model expects {p.dtype}")
        p.value[...] = v
    expected = {f"{g}/{n}" for g in ("param", "adam.m", "adam.v", "best") for n in names}
    unknown = set(tensors) - expected
    if unknown:
        raise FormatError(f"{path}: unexpected tensors {sorted(unknown)[:3]}")
    return Checkpoint(model, header.get("train_config"), int(header.get("adam_t", 0)),
                      _group(tensors, "adam.m", names, params), _group(tensors, "adam.v", names, params),
                      _group(tensors, "best", names, params), header.get("state") or {})
