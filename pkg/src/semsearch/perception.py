"""Simulated detection, OCR-based label refinement and the first-seen ledger."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from semsearch.geometry import Scene, VisibilityReport
from semsearch.occupancy import KnownObject, KnownWorld


@dataclass(frozen=True)
class DetectionBelief:
    labels: tuple[str, ...]
    label_probs: np.ndarray
    fallback: str | None = None

    def __post_init__(self):
        p = np.asarray(self.label_probs, dtype=np.float64)
        if p.shape != (len(self.labels),) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("label_probs must be a probability vector over labels")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "label_probs", p)

    @property
    def argmax_label(self) -> str:
        return self.labels[int(np.argmax(self.label_probs))]

    @classmethod
    def one_hot(cls, labels: Sequence[str], label: str) -> DetectionBelief:
        p = np.zeros(len(labels))
        p[list(labels).index(label)] = 1.0
        return cls(tuple(labels), p)


@dataclass(frozen=True)
class OcrSignal:
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError("OCR scores must be finite")
        object.__setattr__(self, "scores", s)


def simulate_detection(true_label: str, object_list: Sequence[str], noise_p: float, rng_seed) -> DetectionBelief:
    """One-hot detection; with probability `noise_p` the label is replaced by
    a uniform draw from the whole list (which may return the true label)."""
    if true_label not in object_list:
        raise ValueError(f"{true_label!r} not in object list")
    if not 0 <= noise_p <= 1:
        raise ValueError("noise_p must be in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    label = true_label
    if rng.random() < noise_p:
        label = object_list[int(rng.integers(len(object_list)))]
    return DetectionBelief.one_hot(object_list, label)


def ocr_weights(ocr: OcrSignal, temperature: float = 1.0, epsilon: float = 0.01) -> np.ndarray:
    shifted = ocr.scores - ocr.scores.min()
    w = (shifted + epsilon) ** (1.0 / temperature)
    return w / w.sum()


def ocr_refine(belief: DetectionBelief, ocr: OcrSignal, temperature: float = 1.0, epsilon: float = 0.01) -> DetectionBelief:
    """Posterior proportional to detector probabilities times the
    min-shifted, epsilon-floored, tempered OCR weights."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if ocr.scores.shape != belief.label_probs.shape:
        raise ValueError("OCR scores and belief must have the same length")
    post = belief.label_probs * ocr_weights(ocr, temperature, epsilon)
    total = post.sum()
    if not total > 0:
        return DetectionBelief(belief.labels, belief.label_probs, "zero-product")
    return DetectionBelief(belief.labels, post / total)


def load_ocr_fixture(path, labels: Sequence[str]) -> dict[str, OcrSignal]:
    data = json.loads(Path(path).read_text())
    out = {}
    for name, entry in data.items():
        scores = entry["scores"]
        if len(scores) != len(labels):
            raise ValueError(f"OCR scores for {name!r} do not match the object list")
        out[name] = OcrSignal(np.array(scores))
    return out


def record_first_seen(
    world: KnownWorld,
    report: VisibilityReport,
    scene: Scene,
    beliefs: Mapping[str, DetectionBelief],
) -> KnownWorld:
    """Append newly detected objects to the ledger at their current pose.
    Existing entries are never rewritten."""
    seen = world.ledger_ids()
    for i, obj in enumerate(scene.objects):
        if obj.name not in report.detected or i in seen:
            continue
        belief = beliefs[obj.name]
        world.known_objects.append(KnownObject(belief.argmax_label, obj.position, obj.spec.dims, i))
    return world


def update_geometry(world: KnownWorld, report: VisibilityReport, scene: Scene) -> KnownWorld:
    """Refresh current poses of everything the camera has any view of.

    Objects stay in the geometry map once seen; their pose tracks the
    simulator because only the searcher moves objects."""
    for i, obj in enumerate(scene.objects):
        if i == scene.target_index:
            continue
        if report.per_object_fraction[obj.name] > 0 or i in world.geometry:
            world.geometry[i] = (obj.position, obj.spec.dims)
    return world
