"""Run the regular, measurement-error and nonlinear experiments at desk scale.

Writes one report directory per experiment under ``--out`` and prints the
median pooled test RSS of each method.

    python3 scripts/run_experiments.py --out results --seed 0
"""

import argparse
import time

from imp_lasso.harness import EXPERIMENTS, ExperimentConfig, emit_report, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-datasets", type=int, default=50)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--only", choices=EXPERIMENTS, action="append")
    args = parser.parse_args()

    for kind in args.only or EXPERIMENTS:
        cfg = ExperimentConfig(experiment=kind, seed=args.seed, n_datasets=args.n_datasets)
        start = time.perf_counter()
        report = run_experiment(cfg, workers=args.workers)
        emit_report(report, f"{args.out}/{kind}")
        medians = ", ".join(f"{m} {report.median(m):.4f}" for m in report.methods)
        print(f"{kind:<18} {medians}  failures {len(report.failures)}  "
              f"({time.perf_counter() - start:.0f}s)")


if __name__ == "__main__":
    main()
