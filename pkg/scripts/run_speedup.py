"""Mean actions to reveal the target: semantic prior vs spatial-only, per object count."""

import argparse
import sys

from semsearch.bench import ExperimentConfig, format_table, run_bench, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="YAML experiment config (flags below override it)")
    ap.add_argument("--domain", default=None)
    ap.add_argument("--n", type=int, nargs="+", default=None)
    ap.add_argument("--scenes", type=int, default=None)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", help="CSV path; stdout table if omitted")
    args = ap.parse_args()
    over = dict(domain=args.domain, n_objects=tuple(args.n) if args.n else None, scenes_per_n=args.scenes, workers=args.workers, seed=args.seed)
    over = {k: v for k, v in over.items() if v is not None}
    cfg = ExperimentConfig.from_file(args.config, **over) if args.config else ExperimentConfig.from_dict(over)
    rows = run_bench(cfg, progress=lambda msg: print(msg, file=sys.stderr))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
    print(format_table(rows))


if __name__ == "__main__":
    main()
