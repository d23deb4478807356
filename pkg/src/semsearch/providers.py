"""Affinity providers: scripted, fixture-file and remote scorers/embedders.

A scorer is any callable ``scorer(prompt, completion) -> logprob``; an
embedder is ``embedder(text) -> vector``. Remote providers speak JSON over
HTTP POST and retry with exponential backoff.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from semsearch.affinity import (
    AffinityMatrix,
    build_matrix_embedding,
    build_matrix_llm,
    ground_truth_matrix,
)

ENDPOINT_ENV = "SMS_PROVIDER_ENDPOINT"
KINDS = ("prompt-scorer", "embedding", "taxonomy-oracle", "file", "scripted")


class ProviderError(RuntimeError):
    """A provider could not answer, after retries where applicable."""


@dataclass(frozen=True)
class AffinityProviderSpec:
    kind: str
    endpoint: str | None = None
    path: str | None = None
    temperature: float = 1.0
    seed: int = 0
    max_in_flight: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("file provider needs a path")
        if self.kind in ("prompt-scorer", "embedding") and not (self.endpoint or self.path or os.environ.get(ENDPOINT_ENV)):
            raise ValueError(f"{self.kind} provider needs an endpoint or a fixture path")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def resolve_endpoint(endpoint: str | None) -> str | None:
    return os.environ.get(ENDPOINT_ENV) or endpoint


def _hash_unit(*parts) -> float:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class ScriptedScorer:
    """Deterministic pseudo log-probabilities in (-6, 0], keyed by seed."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, prompt: str, completion: str) -> float:
        return -6.0 * _hash_unit(self.seed, prompt, completion)


class ScriptedEmbedder:
    def __init__(self, seed: int = 0, dim: int = 16):
        self.seed = seed
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        return np.array([_hash_unit(self.seed, text, i) - 0.5 for i in range(self.dim)])


class MemoFile:
    """Append-only JSONL cache of (prompt, completion) -> logprob.

    Each line is ``{"prompt": ..., "completion": ..., "logprob": ...}``; the
    same file format serves as a scorer fixture.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data: dict[tuple[str, str], float] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._data[(rec["prompt"], rec["completion"])] = float(rec["logprob"])

    def get(self, prompt: str, completion: str) -> float | None:
        return self._data.get((prompt, completion))

    def put(self, prompt: str, completion: str, logprob: float) -> None:
        with self._lock:
            if (prompt, completion) in self._data:
                return
            self._data[(prompt, completion)] = logprob
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps({"prompt": prompt, "completion": completion, "logprob": logprob}) + "\n")

    def __len__(self) -> int:
        return len(self._data)


class FixtureScorer:
    def __init__(self, path):
        self.memo = MemoFile(path)

    def __call__(self, prompt: str, completion: str) -> float:
        v = self.memo.get(prompt, completion)
        if v is None:
            raise ProviderError(f"no fixture entry for completion {completion!r} of prompt {prompt!r}")
        return v


def _post_json(session, url: str, payload: dict, attempts: int, backoff: float, timeout: float) -> dict:
    last = None
    for k in range(attempts):
        try:
            resp = session.post(url, json=payload, timeout=timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            last = exc
            if k + 1 < attempts:
                time.sleep(backoff * 2**k)
    raise ProviderError(f"{url}: {last}")


class RemoteScorer:
    """POST {"prompt", "completion"} -> {"logprob"}; optional on-disk memo."""

    def __init__(self, endpoint: str, memo: MemoFile | None = None, attempts: int = 3, backoff: float = 0.5, timeout: float = 30.0, session=None):
        self.endpoint = endpoint
        self.memo = memo
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, prompt: str, completion: str) -> float:
        if self.memo is not None:
            hit = self.memo.get(prompt, completion)
            if hit is not None:
                return hit
        body = _post_json(self.session, self.endpoint, {"prompt": prompt, "completion": completion}, self.attempts, self.backoff, self.timeout)
        try:
            logprob = float(body["logprob"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed scorer response: {body!r}") from exc
        if self.memo is not None:
            self.memo.put(prompt, completion, logprob)
        return logprob


class RemoteEmbedder:
    """POST {"text"} -> {"vector"}."""

    def __init__(self, endpoint: str, attempts: int = 3, backoff: float = 0.5, timeout: float = 30.0, session=None):
        self.endpoint = endpoint
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, text: str) -> np.ndarray:
        body = _post_json(self.session, self.endpoint, {"text": text}, self.attempts, self.backoff, self.timeout)
        try:
            return np.asarray(body["vector"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embedder response: {body!r}") from exc


def load_embedding_fixture(path) -> dict[str, np.ndarray]:
    data = json.loads(Path(path).read_text())
    return {k: np.asarray(v, dtype=np.float64) for k, v in data.items()}


def build_affinity(spec: AffinityProviderSpec, labels: Sequence[str], categories=None, memo_path=None) -> AffinityMatrix:
    """Build an affinity matrix over `labels` from a provider spec.

    `categories` (label groups) is required for the taxonomy oracle.
    """
    labels = tuple(labels)
    if spec.kind == "taxonomy-oracle":
        if categories is None:
            raise ValueError("taxonomy-oracle provider needs categories")
        return ground_truth_matrix(categories, labels)
    if spec.kind == "file":
        return AffinityMatrix.load(spec.path).reordered(labels)
    if spec.kind == "scripted":
        return build_matrix_llm(labels, ScriptedScorer(spec.seed), spec.max_in_flight)
    if spec.kind == "prompt-scorer":
        endpoint = resolve_endpoint(spec.endpoint)
        if spec.path and not os.environ.get(ENDPOINT_ENV):
            scorer = FixtureScorer(spec.path)
        else:
            scorer = RemoteScorer(endpoint, MemoFile(memo_path) if memo_path else None)
        return build_matrix_llm(labels, scorer, spec.max_in_flight)
    # embedding
    if spec.path and not os.environ.get(ENDPOINT_ENV):
        table = load_embedding_fixture(spec.path)
        missing = [l for l in labels if l not in table]
        if missing:
            raise ProviderError(f"embedding fixture lacks {missing}")
        embedder = table.__getitem__
    else:
        embedder = RemoteEmbedder(resolve_endpoint(spec.endpoint))
    return build_matrix_embedding(labels, embedder, spec.temperature)
