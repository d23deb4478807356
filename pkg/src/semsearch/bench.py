"""Benchmark harness: scene corpora, method wiring, metrics and CSV output."""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np
import yaml

from semsearch.affinity import AffinityMatrix, ground_truth_matrix
from semsearch.geometry import Scene, scene_to_dict
from semsearch.policy import RolloutConfig, rollout
from semsearch.providers import AffinityProviderSpec, build_affinity
from semsearch.taxonomy import DOMAIN_SCALE, SceneGenConfig, TaxonomyNode, generate_accepted, load_taxonomy

CSV_FIELDS = ["method", "domain", "n", "successes", "total", "mean_actions", "stderr", "delta_pct"]
BASELINE = "spatial-only"


class ConfigError(ValueError):
    pass


class BenchError(RuntimeError):
    def __init__(self, scene_id: int, n: int, method: str, cause: BaseException):
        super().__init__(f"rollout failed on scene {scene_id} (n={n}, method={method}): {cause!r}")
        self.scene_id = scene_id


@dataclass(frozen=True)
class ExperimentConfig:
    domain: str = "pharmacy"
    n_objects: tuple[int, ...] = (12, 15, 18, 21)
    scenes_per_n: int = 200
    methods: tuple[str, ...] = (BASELINE, "sms-oracle")
    policy: str = "DAR"
    noise_p: tuple[float, ...] = (0.0,)
    seed: int = 0
    workers: int = 1
    failures: str = "2N"  # failed rollouts count as the action limit; "exclude" drops them
    sigma_bins: float = 50.0
    grid_k: int = 16
    embedding_endpoint: str | None = None
    embedding_fixture: str | None = None
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("n_objects", "methods", "noise_p"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(v) if isinstance(v, (list, tuple)) else (v,))
        if self.domain not in ("pharmacy", "kitchen", "office") and not Path(self.domain).exists():
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.scenes_per_n < 1:
            raise ConfigError("scenes_per_n must be >= 1")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        for m in self.methods:
            if m not in (BASELINE, "sms-oracle", "sms-embedding") and not m.startswith("sms-file:"):
                raise ConfigError(f"unknown method {m!r}")
        if self.policy not in ("DAR", "DER"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if any(not 0 <= p <= 1 for p in self.noise_p):
            raise ConfigError("noise_p values must lie in [0, 1]")
        if self.failures not in ("2N", "exclude"):
            raise ConfigError("failures must be '2N' or 'exclude'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_file(cls, path, **overrides) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class MetricsRow:
    method: str
    domain: str
    n: int | str
    successes: int
    total: int
    mean_actions: float
    stderr: float
    delta_pct: float | None = None
    mean_actions_success_only: float | None = None

    def csv_row(self) -> dict:
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        return {
            "method": self.method,
            "domain": self.domain,
            "n": self.n,
            "successes": self.successes,
            "total": self.total,
            "mean_actions": fmt(self.mean_actions),
            "stderr": fmt(self.stderr),
            "delta_pct": fmt(self.delta_pct),
        }


@dataclass(frozen=True)
class Outcome:
    scene_id: int
    success: bool
    steps: int
    limit: int


# --- statistics --------------------------------------------------------------


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(count); 0 for fewer than two."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(v.size))


def delta_pct(baseline_mean: float, method_mean: float) -> float:
    return (baseline_mean - method_mean) / baseline_mean * 100.0


def action_counts(outcomes: Sequence[Outcome], failures: str = "2N") -> list[int]:
    if failures == "exclude":
        return [o.steps for o in outcomes if o.success]
    return [o.steps if o.success else o.limit for o in outcomes]


def metrics_row(method: str, domain: str, n, outcomes: Sequence[Outcome], failures: str = "2N") -> MetricsRow:
    counts = action_counts(outcomes, failures)
    ok = action_counts(outcomes, "exclude")
    return MetricsRow(
        method,
        domain,
        n,
        sum(o.success for o in outcomes),
        len(outcomes),
        float(np.mean(counts)) if counts else float("nan"),
        standard_error(counts),
        None,
        float(np.mean(ok)) if ok else float("nan"),
    )


# --- corpus ------------------------------------------------------------------


@dataclass
class Corpus:
    domain: str
    n: int
    seed: int
    scenes: list[Scene]
    rejected: list[int] = field(default_factory=list)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in self.scenes:
            h.update(json.dumps(scene_to_dict(s), sort_keys=True).encode())
        return h.hexdigest()


def build_corpus(taxonomy: TaxonomyNode, domain: str, n: int, count: int, seed: int = 0) -> Corpus:
    cfg = SceneGenConfig(n_objects=n, seed=seed, scale_factor=DOMAIN_SCALE.get(domain, 0.7))
    scenes, rejected = [], []
    for scene_id in range(count):
        scene, rej = generate_accepted(taxonomy, cfg, scene_id)
        scenes.append(scene)
        rejected.append(rej)
    return Corpus(domain, n, seed, scenes, rejected)


# --- methods -----------------------------------------------------------------


def method_matrix(method: str, taxonomy: TaxonomyNode, cfg: ExperimentConfig) -> AffinityMatrix | None:
    labels = taxonomy.labels()
    if method == BASELINE:
        return None
    if method == "sms-oracle":
        return ground_truth_matrix(taxonomy.categories(), labels)
    if method.startswith("sms-file:"):
        return AffinityMatrix.load(method.split(":", 1)[1]).reordered(labels)
    try:
        spec = AffinityProviderSpec("embedding", endpoint=cfg.embedding_endpoint, path=cfg.embedding_fixture, temperature=cfg.temperature)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return build_affinity(spec, labels)


def _rollout_job(args) -> Outcome:
    scene_id, scene, M, rcfg, labels = args
    rec = rollout(scene, M, replace(rcfg, seed=scene_id), labels)
    return Outcome(scene_id, rec.success, rec.steps, rec.max_actions)


def run_cell(
    corpus: Corpus,
    M: AffinityMatrix | None,
    rcfg: RolloutConfig,
    labels: Sequence[str],
    workers: int = 1,
    method: str = "",
) -> list[Outcome]:
    """Roll out every scene of the corpus; results ordered by scene id."""
    jobs = [(i, s, M, rcfg, list(labels)) for i, s in enumerate(corpus.scenes)]
    out = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_rollout_job, j) for j in jobs]
            for j, f in zip(jobs, futures):
                try:
                    out.append(f.result())
                except Exception as exc:
                    raise BenchError(j[0], corpus.n, method, exc) from exc
    else:
        for j in jobs:
            try:
                out.append(_rollout_job(j))
            except Exception as exc:
                raise BenchError(j[0], corpus.n, method, exc) from exc
    return sorted(out, key=lambda o: o.scene_id)


def method_label(method: str, noise_p: float, sweep: bool) -> str:
    return f"{method}@noise={noise_p:g}" if sweep and method != BASELINE else method


def run_bench(cfg: ExperimentConfig, progress: Callable[[str], None] | None = None) -> list[MetricsRow]:
    """Every method x N x noise level on a shared corpus per N, plus a pooled
    per-method row (n = 'avg'). Delta% is relative to the spatial-only rows."""
    taxonomy = load_taxonomy(cfg.domain)
    labels = taxonomy.labels()
    domain = Path(cfg.domain).stem
    sweep = len(cfg.noise_p) > 1 or cfg.noise_p != (0.0,)
    matrices = {m: method_matrix(m, taxonomy, cfg) for m in cfg.methods}
    cells: dict[tuple[str, int], list[Outcome]] = {}
    for n in cfg.n_objects:
        corpus = build_corpus(taxonomy, domain, n, cfg.scenes_per_n, cfg.seed)
        for m in cfg.methods:
            levels = (0.0,) if m == BASELINE else cfg.noise_p
            for p in levels:
                rcfg = RolloutConfig(
                    policy=cfg.policy,
                    use_semantic=m != BASELINE,
                    noise_p=p,
                    sigma_bins=cfg.sigma_bins,
                    grid_k=cfg.grid_k,
                )
                name = method_label(m, p, sweep)
                if progress:
                    progress(f"n={n} method={name}")
                cells[(name, n)] = run_cell(corpus, matrices[m], rcfg, labels, cfg.workers, name)

    rows = []
    names = list(dict.fromkeys(name for name, _ in cells))
    for name in names:
        pooled = []
        for n in cfg.n_objects:
            rows.append(metrics_row(name, domain, n, cells[(name, n)], cfg.failures))
            pooled.extend(cells[(name, n)])
        rows.append(metrics_row(name, domain, "avg", pooled, cfg.failures))
    base = {r.n: r.mean_actions for r in rows if r.method == BASELINE}
    for r in rows:
        if r.n in base and r.method != BASELINE:
            r.delta_pct = delta_pct(base[r.n], r.mean_actions)
    return rows


# --- output ------------------------------------------------------------------


def write_csv(rows: Sequence[MetricsRow], out: TextIO) -> None:
    w = csv.DictWriter(out, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.csv_row())


def format_table(rows: Sequence[MetricsRow], verbose: bool = False) -> str:
    head = f"{'method':<28} {'n':>4} {'succ':>9} {'actions':>15} {'delta%':>8}"
    if verbose:
        head += f" {'success-only':>12}"
    lines = [head]
    for r in rows:
        d = "" if r.delta_pct is None else f"{r.delta_pct:.1f}"
        line = f"{r.method:<28} {str(r.n):>4} {r.successes:>4}/{r.total:<4} {r.mean_actions:>7.2f} +- {r.stderr:<4.2f} {d:>8}"
        if verbose:
            line += f" {r.mean_actions_success_only:>12.2f}"
        lines.append(line)
    return "\n".join(lines)


def config_dict(cfg: ExperimentConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
