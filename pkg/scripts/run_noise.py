"""Detection-noise sweep: mean actions of the semantic method as labels get noisier."""

import argparse
import sys

from semsearch.bench import ExperimentConfig, format_table, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--domain", default="pharmacy")
    ap.add_argument("--n", type=int, default=15)
    ap.add_argument("--scenes", type=int, default=100)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.1, 0.5, 0.9])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    cfg = ExperimentConfig(
        domain=args.domain,
        n_objects=(args.n,),
        scenes_per_n=args.scenes,
        methods=("spatial-only", "sms-oracle"),
        noise_p=tuple(args.noise),
        workers=args.workers,
        seed=args.seed,
    )
    print(format_table(run_bench(cfg, progress=lambda msg: print(msg, file=sys.stderr)), verbose=True))


if __name__ == "__main__":
    main()
