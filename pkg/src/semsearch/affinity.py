"""Affinity matrices: construction from prompt scores or embeddings, the
taxonomy block-diagonal reference, and Jensen-Shannon evaluation.

Storage convention: ``values[i, j]`` is the affinity of observed label ``i``
toward target label ``j``; rows are normalized over targets.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PROMPT_TEMPLATE = "I see the following in a room: {observed}. This is likely to be the closest object to {target}"


class ScorerError(RuntimeError):
    """A scorer call failed; safe to retry. Carries the (observed, target) pair."""

    def __init__(self, pair: tuple[str, str], message: str = ""):
        super().__init__(f"scorer failed on {pair}: {message}")
        self.pair = pair


@dataclass(frozen=True)
class AffinityMatrix:
    labels: tuple[str, ...]
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        vals = np.array(self.values, dtype=np.float64)
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise ValueError("labels must be unique")
        if vals.shape != (n, n):
            raise ValueError(f"values must be {n}x{n}, got {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("affinities must be finite and nonnegative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_index", {l: i for i, l in enumerate(self.labels)})

    def index(self, label: str) -> int:
        return self._index[label]

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def lookup(self, observed: str, target: str) -> float:
        return float(self.values[self._index[observed], self._index[target]])

    def row_normalized(self) -> AffinityMatrix:
        sums = self.values.sum(axis=1, keepdims=True)
        n = len(self.labels)
        out = np.where(sums > 0, self.values / np.where(sums > 0, sums, 1.0), 1.0 / n)
        return AffinityMatrix(self.labels, out, dict(self.meta))

    def reordered(self, labels: Sequence[str]) -> AffinityMatrix:
        idx = [self._index[l] for l in labels]
        return AffinityMatrix(tuple(labels), self.values[np.ix_(idx, idx)], dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "rows": [[float(f"{v:.9g}") for v in row] for row in self.values],
        }

    @classmethod
    def from_dict(cls, data: dict) -> AffinityMatrix:
        return cls(tuple(data["labels"]), np.array(data["rows"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> AffinityMatrix:
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_prompt(observed_label: str, target: str) -> str:
    if not observed_label or not target:
        raise ValueError("labels must be non-empty")
    return PROMPT_TEMPLATE.format(observed=observed_label, target=target)


def build_matrix_llm(
    labels: Sequence[str],
    scorer: Callable[[str, str], float],
    max_in_flight: int = 8,
) -> AffinityMatrix:
    """Prompt-completion affinities: exp(logprob) per (observed, target),
    diagonal zeroed, rows normalized over targets.

    `scorer(prompt, completion)` returns the completion log-probability.
    """
    labels = tuple(labels)
    n = len(labels)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]

    def call(pair):
        i, j = pair
        try:
            return float(scorer(build_prompt(labels[i], labels[j]), labels[j]))
        except ScorerError:
            raise
        except Exception as exc:
            raise ScorerError((labels[i], labels[j]), str(exc)) from exc

    pool = ThreadPoolExecutor(max_workers=max(1, max_in_flight))
    try:
        scores = list(pool.map(call, pairs))
    finally:
        # On failure, drop queued pairs instead of waiting for them.
        pool.shutdown(wait=True, cancel_futures=True)

    logp = np.full((n, n), -np.inf)
    for (i, j), s in zip(pairs, scores):
        if math.isnan(s):
            raise ValueError(f"NaN log-probability for {(labels[i], labels[j])}")
        logp[i, j] = s
    values = np.zeros((n, n))
    for i in range(n):
        row = logp[i]
        finite = np.isfinite(row)
        if not finite.any():
            continue
        # Shift by the row max before exponentiating; cancels on normalization.
        values[i, finite] = np.exp(row[finite] - row[finite].max())
    return AffinityMatrix(labels, values, {"source": "prompt-scorer"}).row_normalized()


def build_matrix_embedding(
    labels: Sequence[str],
    embedder: Callable[[str], Sequence[float]],
    temperature: float = 1.0,
) -> AffinityMatrix:
    """Dot-product affinities with per-row min subtraction and a 1/T power.

    Rows that are all zero after min subtraction become uniform over the
    off-diagonal entries; their indices are listed in ``meta['uniform_rows']``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    labels = tuple(labels)
    n = len(labels)
    vecs = [np.asarray(embedder(l), dtype=np.float64) for l in labels]
    if len({v.shape for v in vecs}) != 1 or not all(np.all(np.isfinite(v)) for v in vecs):
        raise ValueError("embedder must return equal-length finite vectors")
    emb = np.stack(vecs)
    raw = emb @ emb.T
    off = ~np.eye(n, dtype=bool)
    values = np.zeros((n, n))
    fallback = []
    for i in range(n):
        row = raw[i, off[i]]
        shifted = row - row.min()
        if shifted.sum() <= 0:
            fallback.append(i)
            values[i, off[i]] = 1.0 / (n - 1)
            continue
        # scale to max 1 first so the power cannot underflow to all zeros
        tempered = (shifted / shifted.max()) ** (1.0 / temperature)
        values[i, off[i]] = tempered / tempered.sum()
    meta = {"source": "embedding", "temperature": temperature, "uniform_rows": fallback}
    return AffinityMatrix(labels, values, meta)


def ground_truth_matrix(categories: Sequence[Sequence[str]], labels: Sequence[str] | None = None) -> AffinityMatrix:
    """Block-diagonal reference: each row is uniform over its own category,
    itself included. `labels` fixes the output order (default: group order)."""
    seen: dict[str, int] = {}
    for g, group in enumerate(categories):
        for label in group:
            if label in seen:
                raise ValueError(f"{label!r} appears in more than one category")
            seen[label] = g
    order = tuple(labels) if labels is not None else tuple(l for group in categories for l in group)
    if set(order) != set(seen) or len(order) != len(seen):
        raise ValueError("categories must partition the label set")
    n = len(order)
    values = np.zeros((n, n))
    groups = np.array([seen[l] for l in order])
    for i in range(n):
        members = groups == groups[i]
        values[i, members] = 1.0 / members.sum()
    return AffinityMatrix(order, values, {"source": "taxonomy"})


def uniform_matrix(labels: Sequence[str]) -> AffinityMatrix:
    n = len(labels)
    return AffinityMatrix(tuple(labels), np.full((n, n), 1.0 / n), {"source": "uniform"})


def _entropy2(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence of two probability vectors."""
    m = 0.5 * (p + q)
    return max(0.0, _entropy2(m) - 0.5 * (_entropy2(p) + _entropy2(q)))


def mean_row_jsd(candidate: AffinityMatrix, truth: AffinityMatrix) -> float:
    if candidate.labels != truth.labels:
        raise ValueError("candidate and truth must share label ordering")
    c = candidate.row_normalized().values
    t = truth.row_normalized().values
    return float(np.mean([js_divergence(c[i], t[i]) for i in range(len(c))]))


def jsd_score(candidate: AffinityMatrix, truth: AffinityMatrix) -> tuple[float, float]:
    """Mean per-row JS divergence to the truth, and the relative improvement
    over a matrix whose rows are uniform over all labels."""
    mean = mean_row_jsd(candidate, truth)
    base = mean_row_jsd(uniform_matrix(truth.labels), truth)
    improvement = (base - mean) / base if base > 0 else 0.0
    return mean, improvement
