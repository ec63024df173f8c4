"""Command-line entry point.

Every command takes explicit flags; ``--config FILE`` supplies the same keys
from a JSON file (unknown keys are rejected), with command-line flags taking
precedence.  Exit codes: 0 success, 1 numerical failure, 2 configuration or
input error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import time

import numpy as np
import torch

from . import data as data_io
from .dgp import DgpConfig, gram_rmse, langevin_posterior
from .kernels import (ArcCosRelu, KernelSpec, LeakyRelu, Linear, Skip, SqExp,
                      spec_from_dict)
from .linear_oracle import linear_equal_width, linear_general_width
from .matrices import InvalidInputError, NumericalError, gram_from_features
from .objective import DkmState, WidthProfile, dkm_objective, layer_kls
from .optimizer import (FactorParams, OptimizerConfig, Problem, init_prior,
                        init_random_scaled, optimize, save_factor_state,
                        write_trace_csv)
from .sparse import (SparseConfig, init_sparse_state, load_checkpoint,
                     nngp_baseline, predict, save_checkpoint, train_sparse)

KERNEL_CHOICES = ("linear", "sqexp", "arccos", "leakyrelu", "skip")


def _make_kernel(name: str, lengthscale: float, leak: float) -> KernelSpec:
    if name == "linear":
        return Linear()
    if name == "sqexp":
        return SqExp(lengthscale=lengthscale)
    if name == "arccos":
        return ArcCosRelu()
    if name == "leakyrelu":
        return LeakyRelu(p=leak)
    if name == "skip":
        return Skip(w1=1.0, w2=1.0, lengthscale=lengthscale)
    raise InvalidInputError(f"unknown kernel {name!r}")


def _load_dataset(args) -> data_io.Dataset:
    if args.data:
        targets = [t.strip() for t in args.targets.split(",")] if args.targets else ["y0"]
        ds = data_io.load_csv(args.data, targets)
    else:
        ds = data_io.synthetic_dataset(args.dataset)
    if getattr(args, "subset", None):
        ds = data_io.subset(ds, args.subset, seed=args.seed, mode=args.subset_mode)
    return ds


def _ensure_outdir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_matrix_txt(path, mat):
    np.savetxt(path, np.asarray(mat, dtype=float))


def _dense_problem(args, ds: data_io.Dataset):
    ds = data_io.standardize(ds)
    g0 = data_io.input_gram(ds.x)
    nus = [1.0] + [args.nu] * args.layers + [args.nu_out]
    widths = WidthProfile(nus)
    kernels = [_make_kernel(args.kernel, args.lengthscale, args.leak)
               for _ in range(args.layers)]
    kernels.append(_make_kernel(args.output_kernel, args.lengthscale, args.leak))
    y = torch.as_tensor(ds.y, dtype=torch.float64)
    problem = Problem(g0=g0, kernels=kernels, y=y, widths=widths,
                      noise_var=args.noise_var, like_weight=args.likelihood_weight)
    return ds, problem


def cmd_train(args) -> int:
    out = _ensure_outdir(args)
    ds = _load_dataset(args)
    ds, problem = _dense_problem(args, ds)
    config = OptimizerConfig(learning_rate=args.lr, iterations=args.iterations,
                             seed=args.seed)
    if args.init == "prior":
        params = init_prior(problem.g0, problem.kernels[:-1])
    else:
        params = init_random_scaled(problem.g0, problem.kernels[:-1], args.seed)
    start = time.perf_counter()
    params, trace = optimize(params, args.objective, config, problem,
                             trace_every=max(1, args.iterations // 500))
    wall = time.perf_counter() - start
    write_trace_csv(trace, os.path.join(out, "trace.csv"))
    save_factor_state(params, os.path.join(out, "factors.txt"))
    for i, g in enumerate(params.grams(), start=1):
        _write_matrix_txt(os.path.join(out, f"gram_{i}.txt"), g)
    _write_json(os.path.join(out, "summary.json"), {
        "command": "train",
        "dataset": ds.name,
        "objective": trace[-1].objective,
        "log_lik": trace[-1].log_lik,
        "layer_kls": trace[-1].layer_kls,
        "wall_time_s": wall,
    })
    return 0


def _split_dataset(ds, seed, fraction):
    split = data_io.make_split(ds.size, seed=seed, fraction=fraction)
    std = data_io.standardize(ds, split)
    train = data_io.take(std, split.train_indices)
    test = data_io.take(std, split.test_indices)
    return std, train, test


def cmd_train_sparse(args) -> int:
    out = _ensure_outdir(args)
    ds = _load_dataset(args)
    std, train, test = _split_dataset(ds, args.split_seed, args.split_fraction)
    nus = [1.0] + [args.nu] * args.layers + [args.nu_out]
    widths = WidthProfile(nus)
    kernels = [_make_kernel(args.kernel, args.lengthscale, args.leak)
               for _ in range(args.layers + 1)]
    config = SparseConfig(num_inducing=args.inducing, learning_rate=args.lr,
                          iterations=args.iterations, seed=args.seed,
                          flip_kl=args.flip_kl)
    state = init_sparse_state(train.x, train.y, kernels, widths, config)
    start = time.perf_counter()
    state, trace = train_sparse(state, train.x, train.y, config)
    wall = time.perf_counter() - start
    mean, _ = predict(state, torch.as_tensor(test.x, dtype=torch.float64), full_cov=False)
    pred = data_io.destandardize_targets(std, np.asarray(mean))
    truth = data_io.destandardize_targets(std, test.y)
    test_rmse = data_io.rmse(pred, truth)
    save_checkpoint(state, os.path.join(out, "checkpoint.txt"))
    write_trace_csv(trace, os.path.join(out, "trace.csv"))
    summary = {
        "command": "train-sparse",
        "dataset": ds.name,
        "test_rmse": test_rmse,
        "objective": trace[-1].objective,
        "noise_var": float(state.noise_var),
        "wall_time_s": wall,
    }
    if args.nngp_baseline:
        base_state = init_sparse_state(train.x, train.y, kernels, widths, config)
        base_rmse, _ = nngp_baseline(base_state, train.x, train.y,
                                     test.x, test.y, config)
        summary["nngp_rmse"] = base_rmse * float(np.mean(std.target_stds))
    _write_json(os.path.join(out, "summary.json"), summary)
    return 0


def cmd_predict(args) -> int:
    out = _ensure_outdir(args)
    state = load_checkpoint(args.checkpoint)
    targets = [t.strip() for t in args.targets.split(",")] if args.targets else ["y0"]
    ds = data_io.load_csv(args.data, targets)
    mean, cov = predict(state, torch.as_tensor(ds.x, dtype=torch.float64),
                        full_cov=False)
    mean = np.asarray(mean)
    var = np.asarray(cov).reshape(-1)
    with open(os.path.join(out, "predictions.csv"), "w") as fh:
        fh.write(",".join([f"mean{i}" for i in range(mean.shape[1])] + ["variance"]) + "\n")
        for row, v in zip(mean, var):
            fh.write(",".join(repr(float(x)) for x in row) + f",{float(v)!r}\n")
    _write_json(os.path.join(out, "summary.json"), {
        "command": "predict",
        "rmse": data_io.rmse(mean, ds.y),
        "rows": int(mean.shape[0]),
    })
    return 0


def cmd_oracle_linear(args) -> int:
    out = _ensure_outdir(args)
    rng = np.random.default_rng(args.seed)
    p = args.p
    a = rng.standard_normal((p, 2 * p))
    g0 = a @ a.T / (2 * p)
    y = rng.standard_normal((p, 1))
    if args.nus:
        nus = [float(v) for v in args.nus.split(",")]
    else:
        nus = [1.0] * (args.layers + 1)
    gout = y @ y.T / nus[-1]
    gout = gout + 1e-6 * np.mean(np.diag(gout)) * np.eye(p)
    if len(set(nus)) == 1:
        solution = linear_equal_width(g0, gout, args.layers)
    else:
        solution = linear_general_width(g0, gout, nus)

    widths = WidthProfile([1.0] + nus)
    kernels = [Linear() for _ in range(args.layers + 1)]
    problem = Problem(g0=torch.as_tensor(g0), kernels=kernels,
                      y=torch.as_tensor(y), widths=widths, noise_var=0.0)
    params = init_prior(problem.g0, kernels[:-1])
    config = OptimizerConfig(learning_rate=args.lr, iterations=args.iterations,
                             seed=args.seed)
    params, _ = optimize(params, "dkm", config, problem,
                         trace_every=max(1, args.iterations // 100))
    rmses = [gram_rmse(g_hat, g_star)
             for g_hat, g_star in zip(params.grams(), solution.grams)]
    rel = [float(np.linalg.norm(np.asarray(g_hat) - g_star) / np.linalg.norm(g_star))
           for g_hat, g_star in zip(params.grams(), solution.grams)]
    _write_json(os.path.join(out, "summary.json"), {
        "command": "oracle-linear",
        "gram_rmse": rmses,
        "relative_frobenius": rel,
    })
    return 0


def cmd_validate_langevin(args) -> int:
    out = _ensure_outdir(args)
    ds = _load_dataset(args)
    ds = data_io.standardize(ds)
    g0 = data_io.input_gram(ds.x)
    y = torch.as_tensor(ds.y, dtype=torch.float64)
    widths_list = [int(w) for w in args.widths.split(",")]
    nus = [1.0, args.nu, args.nu_out]
    profile = WidthProfile(nus)
    kernels = [_make_kernel(args.kernel, args.lengthscale, args.leak), Linear()]
    problem = Problem(g0=g0, kernels=kernels, y=y, widths=profile,
                      noise_var=args.noise_var)
    params = init_prior(g0, kernels[:-1])
    opt_config = OptimizerConfig(learning_rate=args.lr, iterations=args.iterations,
                                 seed=args.seed)
    params, _ = optimize(params, "dkm", opt_config, problem,
                         trace_every=max(1, args.iterations // 100))
    target = params.grams()[0]

    rows = []
    for width in widths_list:
        config = DgpConfig(widths=[width], kernels=kernels, nus=[args.nu],
                           noise_var=args.noise_var, step_size=args.step_size,
                           chains=args.chains, steps=args.steps,
                           burn_in=args.burn_in, thin=args.thin, seed=args.seed)
        result = langevin_posterior(g0, y, config)
        rows.append((width, gram_rmse(result.running_grams[0], target)))
    with open(os.path.join(out, "width_rmse.csv"), "w") as fh:
        fh.write("width,gram_rmse\n")
        for width, value in rows:
            fh.write(f"{width},{value!r}\n")
    _write_json(os.path.join(out, "summary.json"), {
        "command": "validate-langevin",
        "width_rmse": {str(w): v for w, v in rows},
    })
    return 0


def cmd_unimodality(args) -> int:
    out = _ensure_outdir(args)
    ds = _load_dataset(args)
    ds, problem = _dense_problem(args, ds)
    finals, objectives = [], []
    for seed in range(args.seeds):
        params = init_random_scaled(problem.g0, problem.kernels[:-1], seed)
        config = OptimizerConfig(learning_rate=args.lr, iterations=args.iterations,
                                 seed=seed)
        params, trace = optimize(params, "dkm", config, problem,
                                 trace_every=max(1, args.iterations // 200))
        write_trace_csv(trace, os.path.join(out, f"trace_seed{seed}.csv"))
        finals.append(params.grams())
        objectives.append(trace[-1].objective)
    pairs = []
    for i, j in itertools.combinations(range(args.seeds), 2):
        worst = max(gram_rmse(a, b) for a, b in zip(finals[i], finals[j]))
        pairs.append({"seed_a": i, "seed_b": j, "gram_rmse": worst})
    _write_json(os.path.join(out, "summary.json"), {
        "command": "unimodality",
        "objectives": objectives,
        "objective_spread": float(max(objectives) - min(objectives)),
        "pairwise": pairs,
    })
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        with open(path) as fh:
            payload = json.load(fh)
        rows.append({
            "run": os.path.basename(os.path.dirname(os.path.abspath(path))) or path,
            "command": payload.get("command", "?"),
            "dataset": payload.get("dataset", "?"),
            "test_rmse": payload.get("test_rmse", payload.get("rmse")),
            "nngp_rmse": payload.get("nngp_rmse"),
            "objective": payload.get("objective"),
        })
    out = _ensure_outdir(args)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write("run,command,dataset,test_rmse,nngp_rmse,objective\n")
        for r in rows:
            fh.write(",".join("" if r[k] is None else str(r[k])
                              for k in ("run", "command", "dataset", "test_rmse",
                                        "nngp_rmse", "objective")) + "\n")
    lines = ["| run | dataset | test RMSE | NNGP RMSE |", "| --- | --- | --- | --- |"]
    for r in rows:
        lines.append(f"| {r['run']} | {r['dataset']} | {r['test_rmse']} | {r['nngp_rmse']} |")
    with open(os.path.join(out, "report.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_make_data(args) -> int:
    ds = data_io.synthetic_dataset(args.name)
    data_io.save_csv(ds, args.out_file)
    return 0


def _add_common(sp, dataset=True):
    sp.add_argument("--config", help="JSON file supplying these same keys")
    sp.add_argument("--out", help="output directory", default=".")
    sp.add_argument("--seed", type=int, default=0)
    if dataset:
        sp.add_argument("--data", help="CSV path; omit to use a named synthetic set")
        sp.add_argument("--dataset", default="yacht",
                        help="synthetic dataset name when --data is omitted")
        sp.add_argument("--targets", default="y0", help="comma-separated target columns")
        sp.add_argument("--subset", type=int, help="restrict to n rows")
        sp.add_argument("--subset-mode", choices=("first", "random"), default="first")


def _add_model(sp):
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--kernel", choices=KERNEL_CHOICES, default="sqexp")
    sp.add_argument("--output-kernel", choices=KERNEL_CHOICES, default="linear")
    sp.add_argument("--lengthscale", type=float, default=1.0)
    sp.add_argument("--leak", type=float, default=1.0)
    sp.add_argument("--nu", type=float, default=5.0)
    sp.add_argument("--nu-out", type=float, default=1.0)
    sp.add_argument("--noise-var", type=float, default=0.01)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--iterations", type=int, default=5000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepkm")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="optimize the dense objective")
    _add_common(sp)
    _add_model(sp)
    sp.add_argument("--objective", choices=("dkm", "map"), default="dkm")
    sp.add_argument("--likelihood-weight", type=float, default=1.0)
    sp.add_argument("--init", choices=("prior", "random"), default="prior")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("train-sparse", help="train the inducing-point model")
    _add_common(sp)
    _add_model(sp)
    sp.add_argument("--inducing", type=int, default=300)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--split-fraction", type=float, default=0.9)
    sp.add_argument("--flip-kl", action="store_true")
    sp.add_argument("--nngp-baseline", action="store_true",
                    help="also train the recursion-pinned baseline")
    sp.set_defaults(func=cmd_train_sparse, kernel="skip")

    sp = sub.add_parser("predict", help="predict from a checkpoint")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("oracle-linear", help="analytic vs optimized linear-kernel Grams")
    _add_common(sp, dataset=False)
    sp.add_argument("--p", type=int, default=10)
    sp.add_argument("--layers", type=int, default=3)
    sp.add_argument("--nus", help="comma-separated width ratios (default equal)")
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--iterations", type=int, default=3000)
    sp.set_defaults(func=cmd_oracle_linear)

    sp = sub.add_parser("validate-langevin", help="finite-width posterior vs optimum")
    _add_common(sp)
    sp.add_argument("--kernel", choices=KERNEL_CHOICES, default="sqexp")
    sp.add_argument("--lengthscale", type=float, default=1.0)
    sp.add_argument("--leak", type=float, default=1.0)
    sp.add_argument("--nu", type=float, default=5.0)
    sp.add_argument("--nu-out", type=float, default=1.0)
    sp.add_argument("--noise-var", type=float, default=0.01)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--iterations", type=int, default=3000)
    sp.add_argument("--widths", default="32,512")
    sp.add_argument("--step-size", type=float, default=1e-3)
    sp.add_argument("--chains", type=int, default=10)
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--burn-in", type=int, default=5000)
    sp.add_argument("--thin", type=int, default=100)
    sp.set_defaults(func=cmd_validate_langevin)

    sp = sub.add_parser("unimodality", help="multi-seed convergence check")
    _add_common(sp)
    _add_model(sp)
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_unimodality, layers=1, likelihood_weight=1.0)

    sp = sub.add_parser("report", help="aggregate run summaries into a table")
    sp.add_argument("inputs", nargs="+", help="summary.json files")
    sp.add_argument("--config", help="JSON file supplying these same keys")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("make-data", help="write a synthetic dataset CSV")
    sp.add_argument("--name", required=True, choices=sorted(data_io.SYNTHETIC_DATASETS))
    sp.add_argument("--out-file", required=True)
    sp.add_argument("--config", help="JSON file supplying these same keys")
    sp.set_defaults(func=cmd_make_data)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str],
                  args: argparse.Namespace) -> argparse.Namespace:
    """Merge JSON config values under explicit command-line flags."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise InvalidInputError(f"{args.config}: config must be a JSON object")
    known = set(vars(args)) - {"func", "command", "config"}
    unknown = set(payload) - {k.replace("_", "-") for k in known} - known
    if unknown:
        raise InvalidInputError(
            f"{args.config}: unknown config keys {sorted(unknown)}")
    # flags given on the command line win over config values
    given = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
    for key, value in payload.items():
        dest = key.replace("-", "_")
        if dest not in given:
            setattr(args, dest, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, argv, args)
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
