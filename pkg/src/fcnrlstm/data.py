"""Training-ready sequences and the on-disk dataset layout.

A dataset directory holds::

    manifest.txt          key=value header lines, then one ``sequence=`` line per sequence
    <name>.tensors        tensor container with ``frames`` and ``density`` ([T, 1, H, W] float32)
    <name>.ann            box annotations in the text format of :mod:`supervision`

Each sequence line reads
``sequence=<name> split=<train|val|test> frames=<file> annotations=<file> order=<i0,i1,...>``
where ``order`` is the original frame index of each stored position (it is a
permutation after temporal shuffling).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import FormatError, InvalidArgumentError
from .supervision import DEFAULT_KAPPA, ground_truth, read_annotations, write_annotations
from .synthdata import LabeledSequence

COUNT_TARGETS = ("labels", "density_sum")
MANIFEST = "manifest.txt"
SPLITS = ("train", "val", "test")


@dataclass
class CountingSequence:
    name: str
    frames: np.ndarray       # [T, 1, H, W] float32
    density: np.ndarray      # [T, 1, H, W] float32
    counts: np.ndarray       # [T] float64 count targets
    order: np.ndarray        # [T] original frame index

    def __post_init__(self):
        t = len(self.frames)
        if self.density.shape != self.frames.shape[:1] + (1,) + self.frames.shape[2:]:
            raise InvalidArgumentError(f"{self.name}: density {self.density.shape} vs frames {self.frames.shape}")
        if len(self.counts) != t or len(self.order) != t:
            raise InvalidArgumentError(f"{self.name}: counts/order length != {t}")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


def count_targets(annotation_counts, density: np.ndarray, count_target: str) -> np.ndarray:
    if count_target == "labels":
        return np.asarray(annotation_counts, dtype=np.float64)
    if count_target == "density_sum":
        return density.reshape(len(density), -1).sum(axis=1, dtype=np.float64)
    raise InvalidArgumentError(f"count_target must be one of {COUNT_TARGETS}, got {count_target!r}")


def from_labeled(seq: LabeledSequence, kappa: float = DEFAULT_KAPPA,
                 count_target: str = "labels") -> CountingSequence:
    _, _, h, w = seq.frames.shape
    dens = np.stack([ground_truth(a, h, w, kappa=kappa).density[0] for a in seq.annotations]) \
        if len(seq.annotations) else np.zeros((0, 1, h, w))
    counts = count_targets([len(a) for a in seq.annotations], dens, count_target)
    return CountingSequence(seq.name, seq.frames.astype(np.float32), dens.astype(np.float32),
                            counts, np.asarray(seq.order))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_dataset(root, splits: dict[str, list[LabeledSequence]], meta: dict | None = None,
                 kappa: float = DEFAULT_KAPPA):
    """Write labelled sequences grouped by split name, with their density maps."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    header = {"version": 1, "kappa": kappa, **(meta or {})}
    lines = [f"{k}={json.dumps(v) if not isinstance(v, (int, float, str)) else v}"
             for k, v in header.items()]
    for split_name, seqs in splits.items():
        if split_name not in SPLITS:
            raise InvalidArgumentError(f"unknown split {split_name!r}")
        for seq in seqs:
            cs = from_labeled(seq, kappa)
            write_container(root / f"{seq.name}.tensors", [("frames", cs.frames), ("density", cs.density)],
                            {"name": seq.name})
            write_annotations(root / f"{seq.name}.ann", seq.annotations)
            order = ",".join(str(int(i)) for i in seq.order)
            lines.append(f"sequence={seq.name} split={split_name} frames={seq.name}.tensors "
                         f"annotations={seq.name}.ann order={order}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(root) -> tuple[dict, list[dict]]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FormatError(f"no {MANIFEST} in {root}")
    header, entries = {}, []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("sequence="):
            try:
                fields = dict(tok.split("=", 1) for tok in line.split())
                fields["order"] = np.array([int(i) for i in fields["order"].split(",") if i], dtype=np.int64)
                for key in ("sequence", "split", "frames", "annotations"):
                    fields[key]
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed sequence line") from exc
            if fields["split"] not in SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {fields['split']!r}")
            entries.append(fields)
        elif "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
        else:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
    return header, entries


def load_dataset(root, count_target: str = "labels") -> dict[str, list[CountingSequence]]:
    """Load every split; counts follow ``count_target``."""
    root = Path(root)
    _, entries = read_manifest(root)
    out: dict[str, list[CountingSequence]] = {s: [] for s in SPLITS}
    for e in entries:
        _, tensors = read_container(root / e["frames"])
        if "frames" not in tensors or "density" not in tensors:
            raise FormatError(f"{e['frames']}: missing frames or density tensor")
        anns = read_annotations(root / e["annotations"])
        frames, dens = tensors["frames"], tensors["density"]
        if not (len(anns) == len(frames) == len(e["order"])):
            raise FormatError(f"{e['sequence']}: frame, annotation and order lengths disagree")
        counts = count_targets([len(a) for a in anns], dens, count_target)
        out[e["split"]].append(CountingSequence(e["sequence"], frames, dens, counts, e["order"]))
    return out
