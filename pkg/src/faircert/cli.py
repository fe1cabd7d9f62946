"""``faircert`` command-line interface.

Every command that writes an output also writes ``<output>.manifest.json``
holding the exact argument vector, so ``faircert replay MANIFEST`` re-runs
it. Exit codes: 0 success, 2 bad input or usage, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from faircert import __version__
from faircert.data import (
    Dataset, Schema, accuracy, census_like, e_dfc, group_metrics, halfmoons, load_csv, pairwise_wasserstein,
)
from faircert.dif import DifProblem, certify_dif, dif_oracle, hoeffding_n
from faircert.errors import DimensionError, FaircertError, ValidationError
from faircert.local import lfc, lower_local, upper_local
from faircert.metric import FairMetric, correlation_weighted_metric, learn_sensr_metric
from faircert.nn import ModelParams
from faircert.train import TrainConfig, fit, ftu_preprocess

DEFAULT_DELTA = 0.05
DEFAULT_GAMMA = 0.1
DEFAULT_N = 1000


def report_schema() -> dict:
    return json.loads(resources.files("faircert").joinpath("schemas/dif_report.json").read_text())


# --------------------------------------------------------------------------
# Shared loading helpers
# --------------------------------------------------------------------------

def _load_schema(path) -> Schema:
    try:
        return Schema.from_dict(json.loads(Path(path).read_text()))
    except (TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"bad schema file {path}: {exc}") from exc


def load_dataset(args, path=None, shift: float | None = None) -> Dataset:
    path = path if path is not None else args.data
    if path is not None:
        if args.schema is None:
            raise ValidationError("--schema is required with a CSV dataset")
        schema = _load_schema(args.schema)
        ref = load_csv(args.reference, schema) if getattr(args, "reference", None) else None
        return load_csv(path, schema, reference=ref)
    shift = args.shift if shift is None else shift
    if args.synthetic == "census":
        return census_like(args.samples, seed=args.data_seed, shift=shift)
    if args.synthetic == "halfmoons":
        return halfmoons(args.samples, args.noise, seed=args.data_seed)
    raise ValidationError("give --data with --schema, or --synthetic")


def load_metric(args, data: Dataset) -> FairMetric:
    if args.metric is None:
        return FairMetric.identity(data.m)
    return FairMetric.load(args.metric)


def align(params: ModelParams, data: Dataset, metric: FairMetric) -> tuple[Dataset, FairMetric]:
    """Drop the protected column when the model was trained without it."""
    if params.n_inputs == data.m:
        if metric.dim != data.m:
            raise DimensionError(f"metric dimension {metric.dim} does not match {data.m} features")
        return data, metric
    if params.n_inputs == data.m - 1 and data.protected_feature is not None:
        if metric.dim == data.m:
            metric = metric.drop(data.protected_feature)
        return ftu_preprocess(data), metric
    raise DimensionError(f"model takes {params.n_inputs} inputs, data has {data.m} features")


def _individuals(data: Dataset, n: int) -> np.ndarray:
    if n < 1:
        raise ValidationError("--n must be >= 1")
    return data.features[:n]


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _manifest(args, argv, outputs) -> None:
    outs = [o for o in outputs if o]
    if not outs:
        return
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"tool": "faircert", "version": __version__, "command": args.command, "argv": list(argv),
           "seed": getattr(args, "seed", None), "config": cfg, "outputs": outs}
    Path(str(outs[0]) + ".manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_train(args):
    data = load_dataset(args)
    metric = FairMetric.load(args.metric) if args.metric else None
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    cfg = TrainConfig(mode=args.mode, alpha=args.alpha, delta=args.delta, gamma=args.gamma, p=args.p,
                      epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      solver_iters=args.solver_iters, hidden=hidden)
    res = fit(data, cfg, metric, log_path=args.log)
    res.params.save(args.out)
    Path(str(args.out) + ".config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    last = res.log[-1]
    print(json.dumps({"epochs": len(res.log), "val_acc": last["val_acc"], "ce": last["ce"],
                      "fair_term": last["fair_term"]}))
    return [args.out, args.log]


def cmd_metric(args):
    data = load_dataset(args)
    if args.kind == "learn-sensr":
        metric = learn_sensr_metric(data, mu=args.mu)
    else:
        metric = correlation_weighted_metric(data, mu=args.mu)
    metric.save(args.out)
    print(json.dumps({"kind": metric.kind, "dim": metric.dim, "half_widths": metric.half_widths.tolist()}))
    return [args.out]


def cmd_certify_local(args):
    params = ModelParams.load(args.model)
    data = load_dataset(args)
    data, metric = align(params, data, load_metric(args, data))
    X = _individuals(data, args.n)
    up = upper_local(params, metric, X, args.delta)
    lo, _ = lower_local(params, metric, X, args.delta, seed=args.seed)
    if args.out:
        with Path(args.out).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "upper", "lower"])
            for i in range(len(X)):
                w.writerow([i, repr(float(up[i])), repr(float(lo[i]))])
    print(json.dumps({"lfc": lfc(params, metric, X, args.delta), "mean_lower": float(np.mean(lo)),
                      "n": len(X), "delta": args.delta}))
    return [args.out]


def cmd_certify_dif(args):
    params = ModelParams.load(args.model)
    data = load_dataset(args)
    data, metric = align(params, data, load_metric(args, data))
    X = _individuals(data, args.n)
    problem = DifProblem(X, args.delta, args.gamma, metric, args.p)
    hd = (args.tau, args.lam) if args.tau is not None else None
    rep = certify_dif(params, problem, seed=args.seed, oracle=args.oracle, K=args.K,
                      upper_iters=args.iters, upper_starts=args.starts, lower_steps=args.lower_steps, hoeffding=hd)
    doc = rep.to_dict()
    jsonschema.validate(doc, report_schema())
    _write_json(doc, args.out)
    if args.out:
        print(json.dumps({"eps_lower": rep.eps_lower, "eps_upper": rep.eps_upper, "certificate": rep.certificate}))
    return [args.out]


def cmd_oracle(args):
    params = ModelParams.load(args.model)
    data = load_dataset(args)
    data, metric = align(params, data, load_metric(args, data))
    problem = DifProblem(_individuals(data, args.n), args.delta, args.gamma, metric, args.p)
    value, radii = dif_oracle(params, problem, K=args.K)
    _write_json({"eps_num": value, "K": args.K, "n": problem.n, "radii": radii.radii.tolist()}, args.out)
    return [args.out]


def cmd_evaluate(args):
    params = ModelParams.load(args.model)
    data = load_dataset(args)
    metric = load_metric(args, data)
    data, metric = align(params, data, metric)
    X = _individuals(data, args.n)
    shifted = [X]
    for path in args.shifted or []:
        shifted.append(_aligned_rows(params, load_dataset(args, path=path), args.n))
    for s in args.shift_synthetic or []:
        shifted.append(_aligned_rows(params, load_dataset(args, shift=s), args.n))
    rep = certify_dif(params, DifProblem(X, args.delta, args.gamma, metric, args.p), seed=args.seed,
                      oracle=args.oracle, K=args.K)
    out = {
        "accuracy": accuracy(params, data),
        "lfc": lfc(params, metric, X, args.delta),
        "e_dfc": e_dfc(params, metric, shifted, args.delta),
        "a_dfc": rep.eps_upper,
        "a_dfc_lower": rep.eps_lower,
        "group": group_metrics(params, data.subset(np.arange(len(X))), metric, args.delta),
        "delta": args.delta, "gamma": args.gamma, "n": len(X),
    }
    _write_json(out, args.out)
    return [args.out]


def _aligned_rows(params: ModelParams, data: Dataset, n: int) -> np.ndarray:
    if params.n_inputs == data.m - 1 and data.protected_feature is not None:
        data = ftu_preprocess(data)
    if params.n_inputs != data.m:
        raise DimensionError(f"model takes {params.n_inputs} inputs, shifted data has {data.m} features")
    return data.features[:n]


def cmd_wasserstein(args):
    clouds = [load_dataset(args, path=p).features for p in (args.datasets or [])]
    clouds += [load_dataset(args, shift=s).features for s in (args.shift_synthetic or [])]
    if len(clouds) < 2:
        raise ValidationError("need at least two datasets")
    if args.max_points:
        clouds = [c[: args.max_points] for c in clouds]
    res = pairwise_wasserstein(clouds, p=args.p, seed=args.seed, quantiles=tuple(args.quantiles))
    _write_json(res, args.out)
    return [args.out]


def cmd_hoeffding(args):
    print(hoeffding_n(args.tau, args.lam))
    return []


def cmd_replay(args):
    doc = json.loads(Path(args.manifest).read_text())
    if doc.get("tool") != "faircert" or "argv" not in doc:
        raise ValidationError(f"{args.manifest} is not a faircert manifest")
    return main(doc["argv"])


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _data_flags(p, n_default: int | None = DEFAULT_N):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV file with a header row")
    g.add_argument("--schema", help="JSON schema for --data: label, protected, categorical")
    g.add_argument("--reference", help="CSV whose statistics standardise --data (e.g. the training split)")
    g.add_argument("--synthetic", choices=["census", "halfmoons"], help="use a bundled generator instead of a CSV")
    g.add_argument("--samples", type=int, default=5000, help="rows for --synthetic")
    g.add_argument("--noise", type=float, default=0.1, help="halfmoons noise")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--shift", type=float, default=0.0, help="census mean shift")
    if n_default is not None:
        g.add_argument("--n", type=int, default=n_default, help="number of individuals (first rows)")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (env FAIRCERT_THREADS)")


def _model_flags(p):
    p.add_argument("--model", required=True)
    p.add_argument("--metric", help="metric JSON (default: identity)")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="faircert", description="Certify and train individually fair ReLU networks.")
    ap.add_argument("--version", action="version", version=f"faircert {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model")
    _common(p)
    _data_flags(p, None)
    p.add_argument("--mode", choices=["plain", "ftu", "f-ibp", "l-dif", "u-dif"], default="plain")
    p.add_argument("--metric", help="metric JSON (default: identity)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.02)
    p.add_argument("--gamma", type=float, default=0.025)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--solver-iters", type=int, default=10)
    p.add_argument("--hidden", default="64,64", help="comma-separated hidden widths")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--log", help="training log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metric", help="build a fair metric from data")
    _common(p)
    p.add_argument("kind", choices=["learn-sensr", "weighted"])
    _data_flags(p, None)
    p.add_argument("--mu", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metric)

    p = sub.add_parser("certify-local", help="per-individual upper/lower local bounds")
    _common(p)
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--out", help="per-point CSV path")
    p.set_defaults(func=cmd_certify_local)

    for name, func, help_ in [("certify-dif", cmd_certify_dif, "DIF lower and upper bounds (JSON report)"),
                              ("oracle", cmd_oracle, "grid-exact DIF value by knapsack DP")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        _model_flags(p)
        _data_flags(p, DEFAULT_N if name == "certify-dif" else 50)
        p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
        p.add_argument("--p", type=int, default=2)
        p.add_argument("--K", type=int, default=500, help="oracle grid size")
        p.add_argument("--out")
        if name == "certify-dif":
            p.add_argument("--oracle", choices=["auto", "always", "never"], default="auto")
            p.add_argument("--iters", type=int, default=300)
            p.add_argument("--starts", type=int, default=5)
            p.add_argument("--lower-steps", type=int, default=50)
            p.add_argument("--tau", type=float)
            p.add_argument("--lambda", dest="lam", type=float, default=0.05)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="accuracy, LFC, E-DFC, A-DFC and group metrics")
    _common(p)
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--K", type=int, default=500)
    p.add_argument("--oracle", choices=["auto", "always", "never"], default="auto")
    p.add_argument("--shifted", nargs="*", help="CSV files of shifted populations")
    p.add_argument("--shift-synthetic", nargs="*", type=float, help="census shifts to include in E-DFC")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("wasserstein", help="pairwise distances between datasets")
    _common(p)
    _data_flags(p, None)
    p.add_argument("datasets", nargs="*", help="CSV files sharing --schema")
    p.add_argument("--shift-synthetic", nargs="*", type=float, help="census shifts to compare")
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--max-points", type=int, default=1000)
    p.add_argument("--quantiles", nargs="*", type=float, default=[0.25, 0.5, 0.75])
    p.add_argument("--out")
    p.set_defaults(func=cmd_wasserstein)

    p = sub.add_parser("hoeffding", help="individuals needed for precision tau at confidence 1-lambda")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.set_defaults(func=cmd_hoeffding)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return ap


def _threads(args) -> int | None:
    t = getattr(args, "threads", None)
    if t is None and os.environ.get("FAIRCERT_THREADS"):
        try:
            t = int(os.environ["FAIRCERT_THREADS"])
        except ValueError:
            raise ValidationError("FAIRCERT_THREADS must be an integer") from None
    if t is not None and t < 1:
        raise ValidationError("thread count must be >= 1")
    return t


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads = _threads(args)
        with threadpool_limits(limits=threads):
            result = args.func(args)
        if isinstance(result, int):
            return result
        _manifest(args, argv, result or [])
        return 0
    except (ValidationError, DimensionError, FileNotFoundError, jsonschema.ValidationError,
            json.JSONDecodeError) as exc:
        print(f"faircert: error: {exc}", file=sys.stderr)
        return 2
    except (FaircertError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"faircert: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
