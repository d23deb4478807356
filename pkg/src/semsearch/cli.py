"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 provider failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from semsearch.affinity import AffinityMatrix, ScorerError, build_prompt, ground_truth_matrix, jsd_score
from semsearch.bench import (
    BenchError,
    ConfigError,
    ExperimentConfig,
    build_corpus,
    format_table,
    run_bench,
    write_csv,
)
from semsearch.geometry import load_scene, save_scene
from semsearch.openworld import evaluate_fixtures, load_image_fixture
from semsearch.policy import PreconditionError, RolloutConfig, rollout
from semsearch.providers import AffinityProviderSpec, ProviderError, RemoteScorer, ScriptedScorer, build_affinity, resolve_endpoint
from semsearch.taxonomy import TaxonomyError, load_taxonomy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3

log = logging.getLogger("semsearch")


def _taxonomy(domain: str):
    try:
        return load_taxonomy(domain)
    except (OSError, TaxonomyError, ValueError) as exc:
        raise ConfigError(f"cannot load taxonomy {domain!r}: {exc}") from exc


def cmd_gen_scenes(args) -> int:
    tax = _taxonomy(args.domain)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"domain": args.domain, "seed": args.seed, "sets": []}
    for n in args.n:
        corpus = build_corpus(tax, Path(args.domain).stem, n, args.count, args.seed)
        for i, scene in enumerate(corpus.scenes):
            save_scene(scene, out / f"scene_n{n}_{i:04d}.json")
        log.info("n=%d: %d scenes, %d rejected draws", n, len(corpus.scenes), sum(corpus.rejected))
        manifest["sets"].append({"n": n, "count": len(corpus.scenes), "rejected": corpus.rejected, "checksum": corpus.checksum()})
        print(f"n={n} scenes={len(corpus.scenes)} rejected={sum(corpus.rejected)} checksum={corpus.checksum()}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return EXIT_OK


def cmd_build_affinity(args) -> int:
    tax = _taxonomy(args.domain)
    try:
        spec = AffinityProviderSpec(args.provider, endpoint=args.endpoint, path=args.path, temperature=args.temperature, seed=args.seed, max_in_flight=args.max_in_flight)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    M = build_affinity(spec, tax.labels(), tax.categories(), memo_path=args.memo)
    M.save(args.out)
    print(f"wrote {len(M.labels)}x{len(M.labels)} matrix to {args.out}")
    return EXIT_OK


def cmd_eval_affinity(args) -> int:
    tax = _taxonomy(args.domain)
    labels = tax.labels()
    truth = AffinityMatrix.load(args.truth).reordered(labels) if args.truth else ground_truth_matrix(tax.categories(), labels)
    try:
        cand = AffinityMatrix.load(args.candidate).reordered(labels)
    except KeyError as exc:
        raise ConfigError(f"candidate labels do not match the {args.domain} label set: {exc}") from exc
    mean, imp = jsd_score(cand, truth)
    print(f"mean_jsd={mean:.4f} improvement={imp * 100:.1f}%")
    if args.out:
        Path(args.out).write_text(json.dumps({"candidate": args.candidate, "domain": args.domain, "mean_jsd": mean, "improvement": imp}) + "\n")
    return EXIT_OK


def _bench_config(args) -> ExperimentConfig:
    overrides = {
        "domain": args.domain,
        "n_objects": args.n,
        "scenes_per_n": args.scenes,
        "methods": args.methods,
        "policy": args.policy,
        "noise_p": args.noise,
        "seed": args.seed,
        "workers": args.workers,
        "embedding_endpoint": args.endpoint,
        "embedding_fixture": args.embedding_fixture,
    }
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def cmd_bench(args) -> int:
    cfg = _bench_config(args)
    rows = run_bench(cfg, progress=lambda msg: log.info(msg))
    print(format_table(rows, verbose=args.verbose))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
    else:
        write_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_openworld_eval(args) -> int:
    affinity_fn = None
    if args.scorer:
        scorer = ScriptedScorer(args.seed) if args.scorer == "scripted" else RemoteScorer(resolve_endpoint(args.scorer))
        affinity_fn = lambda label, target: math.exp(scorer(build_prompt(label, target), target))
    files = sorted(Path(args.fixtures).glob("*.json"))
    if not files:
        raise ConfigError(f"no fixtures in {args.fixtures}")
    try:
        fixtures = [load_image_fixture(f, affinity_fn) for f in files]
        rule = args.threshold if args.threshold is not None else "mean+std"
        rows = evaluate_fixtures(fixtures, rule)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    print("method,images,mean_iou,stderr")
    for r in rows:
        print(f"{r['method']},{r['images']},{r['mean_iou']:.4f},{r['stderr']:.4f}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    try:
        scene = load_scene(args.scene)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load scene {args.scene}: {exc}") from exc
    labels = _taxonomy(args.domain).labels() if args.domain else [o.name for o in scene.objects]
    M = None
    if args.affinity:
        M = AffinityMatrix.load(args.affinity)
    elif args.oracle:
        if not args.domain:
            raise ConfigError("--oracle needs --domain")
        tax = _taxonomy(args.domain)
        M = ground_truth_matrix(tax.categories(), tax.labels())
    cfg = RolloutConfig(policy=args.policy, use_semantic=M is not None, noise_p=args.noise, seed=args.seed, check_soundness=args.check)
    try:
        rec = rollout(scene, M, cfg, labels, trace=sys.stdout if args.trace else None)
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"# success={rec.success} actions={rec.steps} limit={rec.max_actions} reason={rec.reason} final_visibility={rec.final_visibility:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semsearch", description="Semantic mechanical search workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate a scene corpus")
    g.add_argument("--domain", default="pharmacy", help="pharmacy|kitchen|office or a taxonomy JSON file")
    g.add_argument("--n", type=int, nargs="+", default=[12])
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scenes)

    b = sub.add_parser("build-affinity", help="build an affinity matrix file")
    b.add_argument("--provider", required=True, choices=["prompt-scorer", "embedding", "taxonomy-oracle", "file", "scripted"])
    b.add_argument("--domain", default="pharmacy")
    b.add_argument("--endpoint")
    b.add_argument("--path", help="fixture or matrix file")
    b.add_argument("--memo", help="on-disk memo of remote scorer calls")
    b.add_argument("--temperature", type=float, default=1.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--max-in-flight", type=int, default=8)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_affinity)

    e = sub.add_parser("eval-affinity", help="JS divergence of a matrix against the taxonomy truth")
    e.add_argument("candidate")
    e.add_argument("--domain", default="pharmacy")
    e.add_argument("--truth", help="truth matrix file (default: taxonomy block-diagonal)")
    e.add_argument("--out", help="write a JSON result row")
    e.set_defaults(func=cmd_eval_affinity)

    r = sub.add_parser("bench", help="run the action-count benchmark")
    r.add_argument("--config", help="YAML or JSON experiment config")
    r.add_argument("--domain")
    r.add_argument("--n", type=int, nargs="+")
    r.add_argument("--scenes", type=int)
    r.add_argument("--methods", nargs="+")
    r.add_argument("--policy", choices=["DAR", "DER"])
    r.add_argument("--noise", type=float, nargs="+")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--endpoint", help="embedding endpoint for sms-embedding")
    r.add_argument("--embedding-fixture")
    r.add_argument("--out", help="CSV output path (default: stdout)")
    r.set_defaults(func=cmd_bench)

    o = sub.add_parser("openworld-eval", help="heatmap IoU over crop fixtures")
    o.add_argument("fixtures")
    o.add_argument("--threshold", type=float, help="absolute threshold (default: mean + 1 std)")
    o.add_argument("--scorer", help="'scripted' or a scorer endpoint, for crops without affinity")
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_openworld_eval)

    t = sub.add_parser("rollout", help="run one search rollout")
    t.add_argument("--scene", required=True)
    t.add_argument("--trace", action="store_true", help="print one CSV line per action")
    t.add_argument("--domain")
    t.add_argument("--affinity", help="affinity matrix file (enables semantics)")
    t.add_argument("--oracle", action="store_true", help="use the taxonomy matrix of --domain")
    t.add_argument("--policy", default="DAR", choices=["DAR", "DER"])
    t.add_argument("--noise", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--check", action="store_true", help="assert distribution soundness each step")
    t.set_defaults(func=cmd_rollout)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProviderError, ScorerError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except BenchError as exc:
        cause = exc.__cause__
        if isinstance(cause, (ProviderError, ScorerError)):
            print(f"provider error: {exc}", file=sys.stderr)
            return EXIT_PROVIDER
        raise


if __name__ == "__main__":
    sys.exit(main())
