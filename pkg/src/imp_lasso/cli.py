"""Command line entry point: ``imp-lasso <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .features import build_train_design, enumerate_modules
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentFailure,
    emit_report,
    make_dataset,
    run_diagnostic,
    run_experiment,
)
from .predict import Prediction, predict_gimp, score, write_predictions_csv
from .scm import DataBundle, dump_model, load_model
from .solver import GimpModel, PartialLassoProblem, cross_validate, solve_partial_lasso
from .taxonomy import classify_all, write_labels_csv

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CONFIG_FLAGS = {
    "experiment": str,
    "d": int,
    "n_per_env": int,
    "n_train_envs": int,
    "n_test_envs": int,
    "n_datasets": int,
    "a_train": float,
    "a_test": float,
    "sigma2": float,
    "b_exponent": float,
    "grid_size": int,
    "epsilon_ratio": float,
    "folds": int,
    "max_r": int,
}


def _add_config_args(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, required=seed_required)
    for name, typ in CONFIG_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    p.add_argument("--no-intercept", dest="intercept", action="store_false", default=None)
    p.add_argument("--refit-folds", dest="refit_folds", action="store_true", default=None)


def _config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    for name in [*CONFIG_FLAGS, "seed", "intercept", "refit_folds"]:
        val = getattr(args, name, None)
        if val is not None:
            doc[name] = val
    return ExperimentConfig.from_dict(doc)


def _write_dataset_csv(path, data: DataBundle) -> None:
    d = data.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["env", "split", *[f"X{j + 1}" for j in range(d)], "Y"])
        for split, xs, ys in (("train", data.train_x, data.train_y), ("test", data.test_x, data.test_y)):
            for env, x in xs.items():
                for row, yv in zip(x, ys[env]):
                    w.writerow([env, split, *map(repr, row.tolist()), repr(float(yv))])


def _read_dataset_csv(path) -> DataBundle:
    blocks: dict[tuple[str, str], list[list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["env", "split"] or header[-1] != "Y":
            raise ConfigError(f"{path}: expected columns env, split, X1..Xd, Y")
        for row in reader:
            blocks.setdefault((row[1], row[0]), []).append([float(v) for v in row[2:]])
    out: dict[str, dict] = {"train_x": {}, "train_y": {}, "test_x": {}, "test_y": {}}
    for (split, env), rows in blocks.items():
        arr = np.asarray(rows)
        if split not in ("train", "test"):
            raise ConfigError(f"{path}: unknown split {split!r}")
        out[f"{split}_x"][env] = arr[:, :-1]
        out[f"{split}_y"][env] = arr[:, -1]
    return DataBundle(**out)


def cmd_simulate(args) -> None:
    cfg = _config(args)
    ds = make_dataset(cfg, args.index)
    _write_dataset_csv(args.out, ds.data)
    if args.model_out:
        dump_model(ds.model, ds.envs, args.model_out)


def cmd_fit(args) -> None:
    data = _read_dataset_csv(args.data)
    ids = enumerate_modules(data.d, args.max_r)
    design = build_train_design(data.train_x, ids, not args.no_intercept)
    x, y, _ = data.pooled()
    problem = PartialLassoProblem(y, design.z_hat, x, 1.0, True, ids, design.row_env)
    if args.lam is None:
        cv = cross_validate(
            problem, args.folds, grid_size=args.grid_size, epsilon_ratio=args.epsilon_ratio,
            rng=np.random.default_rng(args.seed),
        )
        problem.lam = cv.selected_lambda
    else:
        problem.lam = args.lam
    fit = solve_partial_lasso(problem)
    doc = fit.to_dict()
    doc["intercept_in_modules"] = not args.no_intercept
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _load_fit(path) -> tuple[GimpModel, bool]:
    with open(path) as fh:
        doc = json.load(fh)
    return GimpModel.from_dict(doc), doc.get("intercept_in_modules", True)


def cmd_classify(args) -> None:
    model, envs = load_model(args.model)
    fit = None
    if args.fit:
        fit, _ = _load_fit(args.fit)
        ids = fit.module_ids
    else:
        ids = enumerate_modules(model.d, args.max_r)
    labels = classify_all(model, envs, ids, args.tol)
    write_labels_csv(args.out, labels, fit)


def cmd_predict(args) -> None:
    fit, intercept = _load_fit(args.fit)
    data = _read_dataset_csv(args.data)
    blocks = data.test_x if data.test_x else data.train_x
    truths = data.test_y if data.test_x else data.train_y
    preds = []
    for env, x in blocks.items():
        y_hat = predict_gimp(fit, x, intercept=intercept)
        preds.append(Prediction(env, y_hat, score(y_hat, truths[env]) if env in truths else None))
    write_predictions_csv(args.out, preds, truths)
    for p in preds:
        if p.rss is not None:
            print(f"{p.env_id}\tmean RSS {p.rss:.6g}")


def cmd_experiment(args) -> None:
    cfg = _config(args)
    report = run_experiment(cfg, workers=args.workers)
    paths = emit_report(report, args.out)
    for agg in report.aggregates():
        if agg["scope"] == "pooled":
            print(f"{agg['method']:>8}  median {agg['median']:.4f}  IQR {agg['iqr']:.4f}  n={agg['n']}")
    print(f"failures: {len(report.failures)}; wrote {paths['per_dataset']}")


def cmd_diagnostic(args) -> None:
    cfg = _config(args)
    rows = run_diagnostic(cfg, args.index, lam=args.lam)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module", "abs_theta", "label", "variation", "residual"])
        for r in rows:
            w.writerow([r["module"], repr(r["abs_theta"]), r["label"], repr(r["variation"]), repr(r["residual"])])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imp-lasso", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one dataset and write it to CSV")
    _add_config_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the module Lasso on a dataset CSV")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--grid-size", type=int, default=30)
    p.add_argument("--epsilon-ratio", type=float, default=1e-3)
    p.add_argument("--max-r", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-intercept", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="label modules from a model document")
    p.add_argument("model")
    p.add_argument("--fit")
    p.add_argument("--max-r", type=int)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("predict", help="predict test environments of a dataset CSV")
    p.add_argument("fit")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run a full synthetic experiment")
    _add_config_args(p, seed_required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("diagnostic", help="label-vs-coefficient table for one dataset")
    _add_config_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnostic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ExperimentFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
