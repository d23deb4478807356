"""Open-world semantic heatmaps: per-pixel averaging of relevance-weighted
crop affinities, IoU against annotations and view ranking.

Images are ``height x width`` arrays; flat pixel indices are row-major.
Run-length masks are strings of ``"start length"`` pairs over flat indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

TIE_RTOL = 1e-9


@dataclass(frozen=True)
class CropRecord:
    mask: np.ndarray  # bool, (height, width)
    label: str
    relevance: float
    affinity: float

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2 or not m.any():
            raise ValueError("crop mask must be a non-empty 2D boolean array")
        if not (self.relevance >= 0 and self.affinity >= 0 and math.isfinite(self.relevance) and math.isfinite(self.affinity)):
            raise ValueError("relevance and affinity must be finite and nonnegative")
        object.__setattr__(self, "mask", m)

    @property
    def weighted(self) -> float:
        return self.affinity * self.relevance


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    covered: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def coverage_gap(self) -> bool:
        return not bool(self.covered.all())


def rect_mask(rect, width: int, height: int) -> np.ndarray:
    """Mask for pixel rectangle [x0, x1) x [y0, y1)."""
    x0, y0, x1, y1 = (int(v) for v in rect)
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"rectangle {rect} outside {width}x{height} image or empty")
    m = np.zeros((height, width), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def rle_decode(rle: str, width: int, height: int) -> np.ndarray:
    nums = [int(t) for t in rle.split()]
    if len(nums) % 2:
        raise ValueError("run-length mask needs start/length pairs")
    flat = np.zeros(width * height, dtype=bool)
    for start, length in zip(nums[::2], nums[1::2]):
        if start < 0 or length < 0 or start + length > flat.size:
            raise ValueError(f"run ({start}, {length}) outside image")
        flat[start : start + length] = True
    return flat.reshape(height, width)


def rle_encode(mask: np.ndarray) -> str:
    flat = np.concatenate([[False], np.asarray(mask, dtype=bool).ravel(), [False]])
    edges = np.flatnonzero(flat[1:] != flat[:-1])
    starts, ends = edges[::2], edges[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


def aggregate(crops: Sequence[CropRecord], width: int, height: int) -> Heatmap:
    """Each pixel gets the mean affinity x relevance over the crops covering
    it; uncovered pixels are 0."""
    if not crops:
        raise ValueError("need at least one crop")
    total = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    for c in crops:
        if c.mask.shape != (height, width):
            raise ValueError("crop mask does not match image size")
        total[c.mask] += c.weighted
        count[c.mask] += 1
    covered = count > 0
    values = np.zeros((height, width))
    values[covered] = total[covered] / count[covered]
    return Heatmap(values, covered)


def threshold_value(heat: Heatmap, rule="mean+std") -> float:
    if rule == "mean+std":
        v = heat.values[heat.covered]
        return float(v.mean() + v.std()) if v.size else 0.0
    return float(rule)


def binarize(heat: Heatmap, rule="mean+std") -> np.ndarray:
    """Covered pixels at or above the threshold. Comparisons allow a
    relative slack of 1e-9 of the peak value so that rescaling the heatmap
    never flips pixels sitting exactly on the threshold."""
    thr = threshold_value(heat, rule)
    slack = TIE_RTOL * float(np.abs(heat.values).max(initial=0.0))
    return heat.covered & (heat.values >= thr - slack)


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, truth).sum() / union)


def iou_at_threshold(heat: Heatmap, truth_mask: np.ndarray, threshold_rule="mean+std") -> float:
    truth = np.asarray(truth_mask, dtype=bool)
    if truth.shape != heat.values.shape:
        raise ValueError("truth mask does not match heatmap size")
    return iou(binarize(heat, threshold_rule), truth)


def percentile_nearest_rank(values: np.ndarray, q: float = 90.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if not v.size:
        return 0.0
    rank = max(math.ceil(q / 100.0 * v.size), 1)
    return float(v[rank - 1])


def view_score(heat: Heatmap, q: float = 90.0) -> float:
    return percentile_nearest_rank(heat.values[heat.covered], q)


def select_view(heatmaps: Sequence[Heatmap], q: float = 90.0) -> int:
    """Index of the view with the highest covered-pixel 90th percentile;
    ties go to the lowest index."""
    if not heatmaps:
        raise ValueError("need at least one view")
    scores = [view_score(h, q) for h in heatmaps]
    return int(np.argmax(scores))


def write_pgm(heat: Heatmap, out: TextIO, maxval: int = 255) -> None:
    peak = heat.values.max()
    scaled = np.zeros_like(heat.values) if peak <= 0 else np.rint(heat.values / peak * maxval)
    out.write(f"P2\n{heat.width} {heat.height}\n{maxval}\n")
    for row in scaled.astype(int):
        out.write(" ".join(map(str, row)) + "\n")


# --- fixtures ----------------------------------------------------------------


@dataclass(frozen=True)
class ImageFixture:
    name: str
    width: int
    height: int
    target: str
    method: str
    crops: tuple[CropRecord, ...]
    truth: np.ndarray | None


def load_image_fixture(path, affinity_fn: Callable[[str, str], float] | None = None) -> ImageFixture:
    """Read a crop fixture. Crops give either ``rect`` or ``mask_rle``; a crop
    without an ``affinity`` field is scored with ``affinity_fn(label, target)``."""
    path = Path(path)
    data = json.loads(path.read_text())
    w, h = int(data["width"]), int(data["height"])
    target = data.get("target", "")
    crops = []
    for c in data["crops"]:
        if "rect" in c:
            mask = rect_mask(c["rect"], w, h)
        else:
            mask = rle_decode(c["mask_rle"], w, h)
        if "affinity" in c:
            aff = float(c["affinity"])
        elif affinity_fn is not None:
            aff = float(affinity_fn(c["label"], target))
        else:
            raise ValueError(f"{path.name}: crop {c['label']!r} has no affinity and no scorer was given")
        crops.append(CropRecord(mask, c["label"], float(c["relevance"]), aff))
    truth = rle_decode(data["truth_rle"], w, h) if "truth_rle" in data else None
    return ImageFixture(path.stem, w, h, target, data.get("method", "default"), tuple(crops), truth)


def evaluate_fixtures(fixtures: Sequence[ImageFixture], threshold_rule="mean+std") -> list[dict]:
    """Per-method mean IoU and standard error over images."""
    by_method: dict[str, list[float]] = {}
    for fx in fixtures:
        if fx.truth is None:
            raise ValueError(f"fixture {fx.name!r} has no ground-truth mask")
        heat = aggregate(fx.crops, fx.width, fx.height)
        by_method.setdefault(fx.method, []).append(iou_at_threshold(heat, fx.truth, threshold_rule))
    rows = []
    for method in sorted(by_method):
        v = np.array(by_method[method])
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        rows.append({"method": method, "images": int(v.size), "mean_iou": float(v.mean()), "stderr": se})
    return rows
