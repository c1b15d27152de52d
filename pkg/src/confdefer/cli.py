"""Command-line interface.

Subcommands: validate, fit-propensity, calibrate-gamma, train, sweep, toy.
Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from .core import (
    BaselinePolicy,
    ConstantRouter,
    CostModel,
    GammaSpec,
    LinearPolicy,
    LinearRouter,
    load_dataset_csv,
    save_dataset_csv,
    validate,
)
from .harness import ExperimentConfig, emit_report, run_experiment
from .msm import weight_bounds
from .objective import hard_destinations, worst_case_regret_vs_human
from .propensity import calibrate_gamma_report, fit_assignment, fit_nominal_propensity
from .synthgen import generate_synthetic, generate_toy, save_truth_csv
from .train import (
    TrainConfig,
    evaluate_human_only,
    train_ao,
    train_confao,
    train_confhai,
    train_confhai_personalized,
    train_hai,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2))


def cmd_validate(args) -> int:
    dataset = load_dataset_csv(args.csv)
    report = validate(dataset)
    _print_json({
        "ok": report.ok,
        "n": dataset.n,
        "d": dataset.d,
        "arms": dataset.m,
        "experts": dataset.K,
        "violations": report.violations,
        "warnings": report.warnings,
    })
    return EXIT_OK if report.ok else EXIT_VALIDATION


def cmd_fit_propensity(args) -> int:
    dataset = load_dataset_csv(args.csv)
    model = fit_nominal_propensity(dataset, args.regularization, args.epsilon)
    _print_json({
        "coefficients": model.coef.tolist(),
        "train_log_loss": model.train_log_loss,
        "iterations": model.iterations,
        "epsilon": model.epsilon,
    })
    return EXIT_OK


def cmd_calibrate_gamma(args) -> int:
    dataset = load_dataset_csv(args.csv)
    report = calibrate_gamma_report(dataset, args.z_cols, args.quantile)
    _print_json(report)
    return EXIT_OK


def _train_config(args, objective: str) -> TrainConfig:
    return TrainConfig(
        iterations=args.iterations,
        learning_rate=args.learning_rate,
        optimizer=args.optimizer,
        seed=args.seed,
        init=args.init,
        objective=objective,
    )


def _load_train_data(args):
    if args.csv:
        return load_dataset_csv(args.csv)
    gammas = np.exp(np.full(args.synthetic_experts, args.synthetic_log_gamma_true))
    data, _ = generate_synthetic(args.synthetic_n, gammas, args.seed)
    return data


def _baseline_from_args(args, dataset) -> BaselinePolicy:
    if args.baseline == "never-treat":
        return BaselinePolicy.never_treat(dataset.m)
    if not args.baseline_path:
        raise ValueError("--baseline csv-policy requires --baseline-path")
    weights = np.loadtxt(args.baseline_path, delimiter=",", ndmin=2)
    return BaselinePolicy(policy=LinearPolicy(weights, m=weights.shape[0] + 1))


def cmd_train(args) -> int:
    dataset = _load_train_data(args)
    report = validate(dataset)
    if not report.ok:
        print(f"invalid dataset: {report.violations}", file=sys.stderr)
        return EXIT_VALIDATION
    cost = CostModel(args.cost)
    baseline = _baseline_from_args(args, dataset)
    model = fit_nominal_propensity(dataset)
    nominal = model.observed_probs(dataset)

    if args.gamma_per_expert:
        spec = GammaSpec.per_expert_levels(args.gamma_per_expert)
    else:
        spec = GammaSpec.scalar(args.gamma)

    summary = {"method": args.method, "seed": args.seed}
    if args.method == "human":
        value = evaluate_human_only(dataset, cost)
        payload = {"human_value": value}
        summary["value"] = value
        system_dict = None
    elif args.method == "ao":
        policy = train_ao(dataset, model, _train_config(args, "vs-baseline"))
        system_dict = {"policy_weights": policy.params.tolist()}
    elif args.method == "confao":
        bounds = weight_bounds(nominal, spec)
        policy = train_confao(dataset, bounds, baseline, _train_config(args, "vs-baseline"))
        system_dict = {"policy_weights": policy.params.tolist()}
    elif args.method == "hai":
        system = train_hai(dataset, model, cost, _train_config(args, "vs-baseline"))
        system_dict = system.to_json_dict()
        summary["certificates"] = system.certificates
    elif args.method == "confhai":
        bounds = weight_bounds(nominal, spec)
        system = train_confhai(dataset, bounds, baseline, cost,
                               _train_config(args, args.objective))
        system_dict = system.to_json_dict()
        summary["certificates"] = system.certificates
    elif args.method == "confhai-person":
        if dataset.expert_ids is None:
            raise ValueError("confhai-person needs an expert id column")
        if not spec.is_per_expert:
            spec = GammaSpec.per_expert_levels([spec.value] * dataset.K)
        bounds = weight_bounds(nominal, spec, dataset.expert_ids)
        assignment = fit_assignment(dataset, "empirical")
        system = train_confhai_personalized(
            dataset, bounds, baseline, cost, assignment,
            _train_config(args, "personalized"),
        )
        system_dict = system.to_json_dict()
        summary["certificates"] = system.certificates
    else:
        raise ValueError(f"unknown method {args.method!r}")

    if system_dict is not None and "policy_weights" in system_dict:
        if "router_weights" in system_dict and system_dict["router_weights"] is not None:
            router = LinearRouter(np.asarray(system_dict["router_weights"]))
            dest = hard_destinations(router, dataset.covariates)
            summary["frac_human"] = float(np.mean(dest >= 1))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "system.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(system_dict if system_dict is not None else payload, f, indent=2)
            f.write("\n")
        summary["system_path"] = path
    _print_json(summary)
    return EXIT_OK


def cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        payload = json.load(f)
    config = ExperimentConfig.from_json_dict(payload)
    outdir = args.out or config.output_dir
    report = run_experiment(config)
    written = emit_report(report, outdir, figures=not args.no_figures)
    _print_json({
        "cells": len(report.rows),
        "failed": sum(1 for r in report.rows if r.error is not None),
        "partial": report.partial,
        "outputs": written,
    })
    return EXIT_OK


def cmd_toy(args) -> int:
    data, toy = generate_toy(args.n, args.gamma, args.seed)
    truth = toy.rows
    cost = CostModel(args.cost)
    baseline = BaselinePolicy.never_treat()
    model = fit_nominal_propensity(data)
    nominal = model.observed_probs(data)
    bounds = weight_bounds(nominal, toy.implied_gamma)
    always_treat = LinearPolicy(np.array([[50.0, 0.0]]))
    keep = ConstantRouter(0.0)
    nominal_value = worst_case_regret_vs_human(
        data, always_treat, keep, cost, weight_bounds(nominal, 1.0)
    )
    worst = worst_case_regret_vs_human(data, always_treat, keep, cost, bounds)
    result = {
        "gamma": toy.gamma,
        "implied_sensitivity": toy.implied_gamma,
        "human_value": evaluate_human_only(data, cost),
        "nominal_always_treat_value": nominal_value.per_arm_terms[1],
        "worst_case_always_treat_value": worst.per_arm_terms[1],
    }
    if args.train:
        system = train_confhai(
            data, bounds, baseline, cost,
            TrainConfig(iterations=args.iterations, seed=args.seed),
        )
        phi = system.router.human_prob(data.covariates)
        result["confhai_certificates"] = system.certificates
        result["confhai_defer_fraction"] = float(np.mean(phi >= 0.5))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        data_path = os.path.join(args.out, "toy_dataset.csv")
        truth_path = os.path.join(args.out, "toy_truth.csv")
        save_dataset_csv(data, data_path)
        save_truth_csv(truth, truth_path)
        result["dataset_path"] = data_path
        result["truth_path"] = truth_path
    _print_json(result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confdefer",
        description="Confounding-robust policy learning and human/AI routing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset CSV against the schema")
    p.add_argument("csv")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fit-propensity", help="fit the nominal propensity model")
    p.add_argument("csv")
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--regularization", type=float, default=1e-3)
    p.set_defaults(func=cmd_fit_propensity)

    p = sub.add_parser("calibrate-gamma",
                       help="reference sensitivity level from observed covariates")
    p.add_argument("csv")
    p.add_argument("--z-cols", type=int, nargs="+", required=True)
    p.add_argument("--quantile", type=float, default=0.95)
    p.set_defaults(func=cmd_calibrate_gamma)

    p = sub.add_parser("train", help="train one method on a CSV or synthetic data")
    p.add_argument("csv", nargs="?", default=None)
    p.add_argument("--synthetic", action="store_true",
                   help="generate data instead of reading a CSV")
    p.add_argument("--synthetic-n", type=int, default=2000)
    p.add_argument("--synthetic-log-gamma-true", type=float, default=2.5)
    p.add_argument("--synthetic-experts", type=int, default=3)
    p.add_argument("--method", required=True,
                   choices=["human", "ao", "confao", "hai", "confhai", "confhai-person"])
    p.add_argument("--gamma", type=float, default=1.0,
                   help="sensitivity level (raw, >= 1)")
    p.add_argument("--gamma-per-expert", type=float, nargs="+", default=None)
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--baseline", choices=["never-treat", "csv-policy"],
                   default="never-treat")
    p.add_argument("--baseline-path", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--optimizer", choices=["adam", "plain-gd"], default="adam")
    p.add_argument("--init", choices=["zeros", "gaussian"], default="zeros")
    p.add_argument("--objective", choices=["vs-baseline", "vs-human"],
                   default="vs-baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a full experiment grid from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("toy", help="reproduce the single-context illustration")
    p.add_argument("--gamma", type=float, default=0.3)
    p.add_argument("--n", type=int, default=50000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--train", action="store_true",
                   help="also train the robust deferral system")
    p.add_argument("--iterations", type=int, default=600)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.csv and not args.synthetic:
        print("train needs a CSV path or --synthetic", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
