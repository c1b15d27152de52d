"""Experiment runner: sensitivity-level sweeps over methods and seeds.

Each cell of (method x gamma x seed) generates or loads data, fits the
nominal propensity, builds the sensitivity box at the specified level,
trains the method, and evaluates it: ground-truth (oracle) regret on
synthetic data, worst-case certificates everywhere. Cell failures are
recorded in their row and the run continues.

Grid entries are log-gamma values (scalar, or one per expert); per-expert
entries are collapsed to their max for homogeneous methods, which is the
conservative scalar summary.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BaselinePolicy,
    ConstantRouter,
    CostModel,
    GammaSpec,
    LinearPolicy,
    LoggedDataset,
    load_dataset_csv,
    validate,
)
from .msm import weight_bounds
from .objective import (
    hard_destinations,
    personalized_worst_case_regret,
    personalized_worst_case_regret_vs_human,
    worst_case_regret,
    worst_case_regret_vs_human,
)
from .propensity import fit_assignment, fit_nominal_propensity
from .synthgen import generate_synthetic, generate_toy, oracle_regret
from .train import (
    TrainConfig,
    train_ao,
    train_confao,
    train_confhai,
    train_confhai_personalized,
    train_hai,
)

METHODS = ("human", "ao", "confao", "hai", "confhai", "confhai-person")
TEST_SEED_OFFSET = 10_000_019  # decouples the evaluation draw from the training draw


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative sweep description; JSON-serializable.

    ``data`` picks the source: {"source": "synthetic", "n_train", "n_test",
    "log_gamma_true" (scalar or per-expert list), "n_experts"}, or
    {"source": "toy", "gamma", "n_train", "n_test"}, or {"source": "csv",
    "path", "holdout_fraction"}. ``log_gamma_grid`` entries are scalars or
    per-expert lists of log sensitivity levels.
    """

    data: dict
    methods: tuple
    log_gamma_grid: tuple
    seeds: tuple
    train: TrainConfig = TrainConfig()
    cost: float = 0.0
    baseline: str = "never-treat"
    baseline_path: str | None = None
    output_dir: str = "results"
    propensity_regularization: float = 1e-3
    propensity_epsilon: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "log_gamma_grid",
                           tuple(tuple(g) if isinstance(g, (list, tuple)) else float(g)
                                 for g in self.log_gamma_grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.methods:
            raise ValueError("methods must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if not self.log_gamma_grid:
            raise ValueError("log_gamma_grid must be nonempty")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        source = self.data.get("source")
        if source not in ("synthetic", "toy", "csv"):
            raise ValueError(f"unknown data source {source!r}")
        if source == "synthetic":
            n_experts = int(self.data.get("n_experts", 1))
            for g in self.log_gamma_grid:
                if isinstance(g, tuple) and len(g) != n_experts:
                    raise ValueError(
                        f"per-expert grid entry {list(g)} does not match "
                        f"n_experts={n_experts}"
                    )
        if self.baseline not in ("never-treat", "csv-policy"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.baseline == "csv-policy" and not self.baseline_path:
            raise ValueError("csv-policy baseline needs baseline_path")

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ExperimentConfig":
        train = TrainConfig(**payload.get("train", {}))
        kwargs = {k: v for k, v in payload.items() if k != "train"}
        return cls(train=train, **kwargs)

    def to_json_dict(self) -> dict:
        return {
            "data": dict(self.data),
            "methods": list(self.methods),
            "log_gamma_grid": [list(g) if isinstance(g, tuple) else g
                               for g in self.log_gamma_grid],
            "seeds": list(self.seeds),
            "train": {
                "iterations": self.train.iterations,
                "learning_rate": self.train.learning_rate,
                "optimizer": self.train.optimizer,
                "seed": self.train.seed,
                "init": self.train.init,
                "objective": self.train.objective,
            },
            "cost": self.cost,
            "baseline": self.baseline,
            "baseline_path": self.baseline_path,
            "output_dir": self.output_dir,
            "propensity_regularization": self.propensity_regularization,
            "propensity_epsilon": self.propensity_epsilon,
        }


@dataclass
class EvalRow:
    method: str
    gamma_label: str
    seed: int
    regret: float | None = None
    cert_vs_baseline: float | None = None
    cert_vs_human: float | None = None
    frac_human: float | None = None
    frac_destinations: list | None = None
    wall_time_s: float = 0.0
    error: str | None = None


@dataclass
class EvalReport:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    partial: bool = False


def _gamma_label(entry) -> str:
    if isinstance(entry, tuple):
        return json.dumps(list(entry), separators=(",", ":"))
    return json.dumps(entry)


def _gamma_spec(entry, method: str, n_experts: int):
    """Grid entries are log levels; homogeneous methods get the max of a
    per-expert entry."""
    if isinstance(entry, tuple):
        levels = np.exp(np.asarray(entry, dtype=float))
        if method == "confhai-person":
            return GammaSpec.per_expert_levels(levels)
        return GammaSpec.scalar(float(levels.max()))
    level = float(np.exp(entry))
    if method == "confhai-person":
        return GammaSpec.per_expert_levels([level] * max(n_experts, 1))
    return GammaSpec.scalar(level)


def _load_baseline(config: ExperimentConfig, dataset: LoggedDataset) -> BaselinePolicy:
    if config.baseline == "never-treat":
        return BaselinePolicy.never_treat(dataset.m)
    weights = np.loadtxt(config.baseline_path, delimiter=",", ndmin=2)
    return BaselinePolicy(policy=LinearPolicy(weights, m=weights.shape[0] + 1))


def _make_data(config: ExperimentConfig, seed: int):
    """Returns (train_data, eval_data, eval_truth_or_None)."""
    src = config.data["source"]
    if src == "synthetic":
        n_experts = int(config.data.get("n_experts", 1))
        lg = config.data.get("log_gamma_true", 0.0)
        if isinstance(lg, (list, tuple)):
            gammas = np.exp(np.asarray(lg, dtype=float))
            if gammas.size != n_experts:
                raise ValueError("log_gamma_true length must match n_experts")
        else:
            gammas = np.full(n_experts, np.exp(float(lg)))
        train_data, _ = generate_synthetic(int(config.data["n_train"]), gammas, seed)
        test_data, test_truth = generate_synthetic(
            int(config.data.get("n_test", 10000)), gammas, seed + TEST_SEED_OFFSET
        )
        return train_data, test_data, test_truth
    if src == "toy":
        gamma = float(config.data.get("gamma", 0.3))
        train_data, _ = generate_toy(int(config.data["n_train"]), gamma, seed)
        test_data, toy_truth = generate_toy(
            int(config.data.get("n_test", 10000)), gamma, seed + TEST_SEED_OFFSET
        )
        return train_data, test_data, toy_truth.rows
    dataset = load_dataset_csv(config.data["path"])
    report = validate(dataset)
    if not report.ok:
        raise ValueError(f"invalid csv dataset: {report.violations}")
    frac = float(config.data.get("holdout_fraction", 0.2))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n)
    n_hold = max(1, int(round(frac * dataset.n)))
    hold, keep = perm[:n_hold], perm[n_hold:]
    def _subset(idx):
        return LoggedDataset(
            dataset.covariates[idx], dataset.treatments[idx], dataset.risks[idx],
            expert_ids=None if dataset.expert_ids is None else dataset.expert_ids[idx],
            m=dataset.m, K=dataset.K,
        )
    return _subset(keep), _subset(hold), None


def _routing_stats(router, covariates, n_experts):
    dest = hard_destinations(router, covariates)
    frac_human = float(np.mean(dest >= 1))
    fracs = None
    if getattr(router, "personalized", False):
        fracs = (np.bincount(dest, minlength=n_experts + 1) / dest.shape[0]).tolist()
    return frac_human, fracs


def _run_cell(config: ExperimentConfig, method: str, entry, seed: int) -> EvalRow:
    row = EvalRow(method=method, gamma_label=_gamma_label(entry), seed=seed)
    train_data, eval_data, truth = _make_data(config, seed)
    cost = CostModel(config.cost)
    baseline = _load_baseline(config, train_data)
    model = fit_nominal_propensity(
        train_data, config.propensity_regularization, config.propensity_epsilon
    )
    nominal = model.observed_probs(train_data)
    spec = _gamma_spec(entry, method, train_data.K)
    tcfg = TrainConfig(
        iterations=config.train.iterations,
        learning_rate=config.train.learning_rate,
        optimizer=config.train.optimizer,
        seed=seed,
        init=config.train.init,
        objective=config.train.objective,
    )

    if method == "confhai-person":
        if train_data.expert_ids is None:
            raise ValueError("confhai-person needs expert ids in the data")
        bounds = weight_bounds(nominal, spec, train_data.expert_ids)
        assignment = fit_assignment(train_data, "empirical")
        system = train_confhai_personalized(
            train_data, bounds, baseline, cost, assignment, tcfg
        )
        policy, router = system.policy, system.router
        row.cert_vs_baseline = personalized_worst_case_regret(
            train_data, policy, router, baseline, cost, bounds, assignment).total
        row.cert_vs_human = personalized_worst_case_regret_vs_human(
            train_data, policy, router, cost, bounds, assignment).total
    else:
        bounds = weight_bounds(nominal, spec)
        if method == "human":
            policy, router = LinearPolicy.zeros(train_data.d, train_data.m), ConstantRouter(1.0)
        elif method == "ao":
            policy, router = train_ao(train_data, model, tcfg), ConstantRouter(0.0)
        elif method == "confao":
            policy, router = train_confao(train_data, bounds, baseline, tcfg), ConstantRouter(0.0)
        elif method == "hai":
            system = train_hai(train_data, model, cost, tcfg)
            policy, router = system.policy, system.router
        elif method == "confhai":
            system = train_confhai(train_data, bounds, baseline, cost, tcfg)
            policy, router = system.policy, system.router
        else:
            raise ValueError(f"unknown method {method!r}")
        row.cert_vs_baseline = worst_case_regret(
            train_data, policy, router, baseline, cost, bounds).total
        row.cert_vs_human = worst_case_regret_vs_human(
            train_data, policy, router, cost, bounds).total

    if truth is not None:
        eval_baseline = _load_baseline(config, eval_data)
        if method == "human":
            c = cost.per_row(truth.n)
            base_probs = eval_baseline.arm_probs(truth.covariates)
            base_val = base_probs[:, 0] * truth.y0 + base_probs[:, 1] * truth.y1
            row.regret = float(np.mean(truth.expected_human_risk() + c)
                               - np.mean(base_val))
        else:
            row.regret = oracle_regret((policy, router), truth, eval_baseline, cost)
    row.frac_human, row.frac_destinations = _routing_stats(
        router, eval_data.covariates, train_data.K
    )
    return row


def run_experiment(config: ExperimentConfig) -> EvalReport:
    """Run every (method x gamma x seed) cell; failures land in their row."""
    report = EvalReport(config=config)
    for method in config.methods:
        for entry in config.log_gamma_grid:
            for seed in config.seeds:
                start = time.perf_counter()
                try:
                    row = _run_cell(config, method, entry, seed)
                except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                    row = EvalRow(method=method, gamma_label=_gamma_label(entry),
                                  seed=seed, error=f"{type(exc).__name__}: {exc}")
                    report.partial = True
                row.wall_time_s = time.perf_counter() - start
                report.rows.append(row)
    return report


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def emit_report(report: EvalReport, output_dir, formats=("csv", "json"),
                figures: bool = False) -> list:
    """Write results.csv (one row per cell) and summary.json (seed aggregates).

    Wall times stay out of the emitted files so that reruns of the same
    config are byte-identical; they remain on the in-memory rows. With
    ``figures`` set, sweep figures are rendered alongside the tables.
    """
    os.makedirs(output_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(output_dir, "results.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("method,gamma,seed,regret,cert_vs_baseline,cert_vs_human,"
                    "frac_human,frac_destinations,error\n")
            for r in report.rows:
                dests = ""
                if r.frac_destinations is not None:
                    dests = "|".join(repr(float(v)) for v in r.frac_destinations)
                err = (r.error or "").replace(",", ";").replace("\n", " ")
                f.write(f"{r.method},{r.gamma_label.replace(',', ';')},{r.seed},"
                        f"{_fmt(r.regret)},{_fmt(r.cert_vs_baseline)},"
                        f"{_fmt(r.cert_vs_human)},{_fmt(r.frac_human)},{dests},{err}\n")
        written.append(path)
    if "json" in formats:
        path = os.path.join(output_dir, "summary.json")
        cells = []
        for method in report.config.methods:
            for entry in report.config.log_gamma_grid:
                label = _gamma_label(entry)
                rows = [r for r in report.rows
                        if r.method == method and r.gamma_label == label
                        and r.error is None]
                metric = "oracle_regret"
                values = [r.regret for r in rows if r.regret is not None]
                if not values:
                    metric = "cert_vs_baseline"
                    values = [r.cert_vs_baseline for r in rows
                              if r.cert_vs_baseline is not None]
                cell = {
                    "method": method,
                    "gamma": label,
                    "metric": metric,
                    "n_seeds": len(values),
                    "mean": float(np.mean(values)) if values else None,
                    "std": (float(np.std(values, ddof=1)) if len(values) > 1
                            else 0.0 if values else None),
                    "mean_frac_human": (
                        float(np.mean([r.frac_human for r in rows
                                       if r.frac_human is not None]))
                        if any(r.frac_human is not None for r in rows) else None
                    ),
                }
                cells.append(cell)
        payload = {"partial": report.partial, "cells": cells}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
        written.append(path)
    if figures:
        from .plots import render_report_figures

        written.extend(render_report_figures(report, output_dir))
    return written
