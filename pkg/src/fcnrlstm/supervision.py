"""Ground-truth density maps and counts from dot or bounding-box annotations.

Coordinates are pixel indices: pixel ``(x, y)`` is column ``x``, row ``y``,
and a Gaussian centred on a dot at ``(x, y)`` peaks on that pixel. Boxes are
inclusive pixel bounds ``(x1, y1, x2, y2)`` with centre ``((x1+x2)/2, (y1+y2)/2)``.

Each kernel is sampled on a disc of radius ``4*sigma`` and scaled so its
samples over the full disc sum to one. Kernels clipped by the frame border
are not rescaled, so border objects contribute less than one unit of mass.

Annotation text format, one record per frame::

    frame <id> dots <n>
    <x> <y>                      (n lines)
    frame <id> boxes <n>
    <x1> <y1> <x2> <y2>          (n lines)

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import FormatError, InvalidArgumentError

TRUNCATE = 4.0
DEFAULT_KAPPA = 0.25


@dataclass
class AnnotationSet:
    frame_id: int
    dots: list[tuple[int, int]] | None = None
    boxes: list[tuple[int, int, int, int]] | None = None
    perspective_map: np.ndarray | None = None
    roi_mask: np.ndarray | None = None

    def __post_init__(self):
        if (self.dots is None) == (self.boxes is None):
            raise InvalidArgumentError("exactly one of dots or boxes must be given")

    @property
    def mode(self) -> str:
        return "dots" if self.dots is not None else "boxes"

    def __len__(self):
        return len(self.dots if self.dots is not None else self.boxes)


@dataclass
class GroundTruth:
    density: np.ndarray  # [1, 1, H, W]
    count: float = field(default=0.0)


def _stencil_total(cx, cy, sigma, radius):
    # full-disc normaliser, independent of where the frame border falls
    dy = np.arange(math.floor(cy - radius), math.ceil(cy + radius) + 1) - cy
    dx = np.arange(math.floor(cx - radius), math.ceil(cx + radius) + 1) - cx
    r2 = dy[:, None] ** 2 + dx[None, :] ** 2
    vals = np.exp(-r2 / (2 * sigma * sigma)) / (2 * math.pi * sigma * sigma)
    return float(vals[r2 <= radius * radius].sum())


def add_kernel(out: np.ndarray, cx: float, cy: float, sigma: float, truncate: float = TRUNCATE):
    """Add one unit-mass (before border clipping) Gaussian to ``out`` in place."""
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    radius = truncate * sigma
    buf = np.zeros_like(out, dtype=np.float64)
    _kernels.splat_gaussian(buf, float(cx), float(cy), float(sigma), float(radius))
    out += buf / _stencil_total(cx, cy, sigma, radius)


def density_from_dots(dots: Iterable[tuple[int, int]], sigma, height: int, width: int,
                      perspective_map: np.ndarray | None = None,
                      truncate: float = TRUNCATE) -> GroundTruth:
    """Sum of Gaussians at each dot; ``sigma`` is scaled by ``perspective_map[y, x]`` if given."""
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    if perspective_map is not None and perspective_map.shape != (height, width):
        raise InvalidArgumentError(f"perspective map {perspective_map.shape} != ({height}, {width})")
    dens = np.zeros((height, width), dtype=np.float64)
    dots = list(dots)
    for x, y in dots:
        if not (0 <= x < width and 0 <= y < height):
            raise InvalidArgumentError(f"dot ({x}, {y}) outside {width}x{height} frame")
        s = sigma * (perspective_map[y, x] if perspective_map is not None else 1.0)
        add_kernel(dens, x, y, s, truncate)
    return GroundTruth(dens[None, None], float(len(dots)))


def box_center(box: Sequence[float]) -> tuple[float, float]:
    x1, y1, x2, y2 = box
    return 0.5 * (x1 + x2), 0.5 * (y1 + y2)


def validate_box(box, height: int, width: int):
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise InvalidArgumentError(f"degenerate box {tuple(box)}")
    if x1 < 0 or y1 < 0 or x2 >= width or y2 >= height:
        raise InvalidArgumentError(f"box {tuple(box)} outside {width}x{height} frame")


def density_from_boxes(boxes: Iterable[Sequence[int]], height: int, width: int,
                       kappa: float = DEFAULT_KAPPA, truncate: float = TRUNCATE) -> GroundTruth:
    """Gaussian at each box centre with width ``kappa * max(x2 - x1, y2 - y1)``."""
    if not kappa > 0:
        raise InvalidArgumentError("kappa must be positive")
    dens = np.zeros((height, width), dtype=np.float64)
    boxes = list(boxes)
    for box in boxes:
        validate_box(box, height, width)
        x1, y1, x2, y2 = box
        cx, cy = box_center(box)
        add_kernel(dens, cx, cy, kappa * max(x2 - x1, y2 - y1), truncate)
    return GroundTruth(dens[None, None], float(len(boxes)))


def apply_roi(gt: GroundTruth, roi_mask: np.ndarray) -> GroundTruth:
    """Zero density outside the mask; the count becomes the density mass inside."""
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if roi_mask.shape != gt.density.shape[-2:]:
        raise InvalidArgumentError(f"ROI mask {roi_mask.shape} != density {gt.density.shape[-2:]}")
    dens = gt.density * roi_mask
    return GroundTruth(dens, float(dens.sum()))


def ground_truth(ann: AnnotationSet, height: int, width: int, sigma: float = 2.0,
                 kappa: float = DEFAULT_KAPPA) -> GroundTruth:
    if ann.dots is not None:
        gt = density_from_dots(ann.dots, sigma, height, width, ann.perspective_map)
    else:
        gt = density_from_boxes(ann.boxes, height, width, kappa)
    if ann.roi_mask is not None:
        gt = apply_roi(gt, ann.roi_mask)
    return gt


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def format_annotations(annotations: Iterable[AnnotationSet]) -> str:
    lines = []
    for ann in annotations:
        items = ann.dots if ann.dots is not None else ann.boxes
        lines.append(f"frame {ann.frame_id} {ann.mode} {len(items)}")
        lines.extend(" ".join(str(int(v)) for v in item) for item in items)
    return "\n".join(lines) + "\n"


def parse_annotations(text: str) -> list[AnnotationSet]:
    rows = [ln.strip() for ln in text.splitlines()]
    rows = [ln for ln in rows if ln and not ln.startswith("#")]
    out, i = [], 0
    while i < len(rows):
        head = rows[i].split()
        if len(head) != 4 or head[0] != "frame" or head[2] not in ("dots", "boxes"):
            raise FormatError(f"bad frame header: {rows[i]!r}")
        try:
            frame_id, n = int(head[1]), int(head[3])
        except ValueError as exc:
            raise FormatError(f"bad frame header: {rows[i]!r}") from exc
        width = 2 if head[2] == "dots" else 4
        items = []
        for ln in rows[i + 1:i + 1 + n]:
            parts = ln.split()
            if len(parts) != width or parts[0] == "frame":
                raise FormatError(f"frame {frame_id}: expected {width} integers, got {ln!r}")
            try:
                items.append(tuple(int(p) for p in parts))
            except ValueError as exc:
                raise FormatError(f"frame {frame_id}: non-integer annotation {ln!r}") from exc
        if len(items) != n:
            raise FormatError(f"frame {frame_id}: expected {n} annotations, found {len(items)}")
        out.append(AnnotationSet(frame_id, dots=items) if head[2] == "dots"
                   else AnnotationSet(frame_id, boxes=items))
        i += 1 + n
    return out


def write_annotations(path, annotations: Iterable[AnnotationSet]):
    Path(path).write_text(format_annotations(annotations))


def read_annotations(path) -> list[AnnotationSet]:
    return parse_annotations(Path(path).read_text())
