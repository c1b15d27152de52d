"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The suite is self-contained but slow (several minutes): criterion 6
runs the full sweep grid single-threaded.
"""

import time

import numpy as np
import pytest

from confdefer import (
    BaselinePolicy,
    ConstantRouter,
    CostModel,
    ExperimentConfig,
    GammaSpec,
    LinearPolicy,
    LinearRouter,
    LoggedDataset,
    TrainConfig,
    fit_assignment,
    fit_nominal_propensity,
    generate_synthetic,
    generate_toy,
    gradient,
    objective_at_weights,
    personalized_worst_case_regret,
    run_experiment,
    solve_lfp,
    solve_lfp_bruteforce,
    team_risk,
    train_confhai,
    weight_bounds,
    worst_case_objective,
    worst_case_regret,
    worst_case_regret_vs_human,
)

NEVER = BaselinePolicy.never_treat()


def _report(num, checks):
    """checks: list of (ok, detail); prints one line and asserts all pass."""
    ok = all(good for good, _ in checks)
    detail = "; ".join(d if good else f"VIOLATED: {d}" for good, d in checks)
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num} failed: {detail}"


def _always_treat(d):
    w = np.zeros(d + 1)
    w[0] = 60.0
    return LinearPolicy(w)


def test_criterion_1_toy_golden_values():
    start = time.perf_counter()
    cost = CostModel(0.0)
    human_vals, ipw_vals, worst_vals, defer_fracs, team_vals = [], [], [], [], []
    for seed in range(5):
        data, toy = generate_toy(50000, 0.3, seed=seed)
        model = fit_nominal_propensity(data)
        nominal = model.observed_probs(data)
        human_vals.append(float(np.mean(data.risks)))
        ipw_vals.append(team_risk(data, _always_treat(1), ConstantRouter(0.0),
                                  cost, 1.0 / nominal))
        bounds = weight_bounds(nominal, 4.0)
        worst = worst_case_regret_vs_human(data, _always_treat(1),
                                           ConstantRouter(0.0), cost, bounds)
        worst_vals.append(worst.per_arm_terms[1])
        system = train_confhai(data, bounds, NEVER, cost,
                               TrainConfig(iterations=600, seed=seed))
        phi = system.router.human_prob(data.covariates)
        defer_fracs.append(float(np.mean(phi >= 0.5)))
        team_vals.append(team_risk(data, system.policy, system.router, cost,
                                   1.0 / nominal, deterministic=True))
    elapsed = time.perf_counter() - start

    human = float(np.mean(human_vals))
    ipw = float(np.mean(ipw_vals))
    worst = float(np.mean(worst_vals))
    defer = float(np.mean(defer_fracs))
    team = float(np.mean(team_vals))
    checks = [
        (abs(human - (-1.2)) <= 0.05, f"human {human:.4f} vs -1.2+-0.05"),
        (abs(ipw - (-1.6)) <= 0.05, f"nominal always-treat {ipw:.4f} vs -1.6+-0.05"),
        (abs(worst - (-1.0)) <= 0.05, f"worst-case always-treat {worst:.4f} vs -1+-0.05"),
        (defer >= 0.99, f"defer fraction {defer:.4f} >= 0.99"),
        (abs(team - (-1.2)) <= 0.05, f"team risk {team:.4f} vs -1.2+-0.05"),
        (elapsed <= 60.0, f"runtime {elapsed:.1f}s <= 60s"),
    ]
    _report(1, checks)


def test_criterion_2_lfp_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(123)
    worst_gap = 0.0
    suffix_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        nominal = rng.uniform(0.02, 1.0, size=n)
        gamma = float(rng.uniform(1.0, 100.0))
        bounds = weight_bounds(nominal, gamma)
        r = rng.normal(scale=rng.uniform(0.2, 5.0), size=n)
        fast = solve_lfp(r, bounds)
        brute = solve_lfp_bruteforce(r, bounds)
        worst_gap = max(worst_gap, abs(fast.value - brute.value))
        order = np.argsort(r, kind="stable")
        w_sorted = fast.weights[order]
        hits_upper = np.isclose(w_sorted, bounds.upper[order])
        hits_lower = np.isclose(w_sorted, bounds.lower[order])
        boundary = int(fast.k_star) - 1
        if not (np.all(hits_lower[:boundary]) and np.all(hits_upper[boundary:])):
            suffix_ok = False
    elapsed = time.perf_counter() - start
    checks = [
        (worst_gap <= 1e-9, f"max |fast-brute| {worst_gap:.2e} <= 1e-9"),
        (suffix_ok, "suffix structure on every instance"),
        (elapsed <= 30.0, f"runtime {elapsed:.1f}s <= 30s"),
    ]
    _report(2, checks)


def test_criterion_3_gradient_correctness():
    rng = np.random.default_rng(321)
    step = 1e-5
    worst = {}
    for kind in ("vs-baseline", "vs-human", "personalized"):
        experts = 2 if kind == "personalized" else 0
        worst_rel = 0.0
        for rep in range(50):
            if rep % 10 == 0:
                x = rng.normal(size=(200, 3))
                t = rng.integers(0, 2, size=200)
                y = rng.normal(size=200)
                h = rng.integers(0, experts, size=200) if experts else None
                data = LoggedDataset(x, t, y, expert_ids=h, m=2, K=experts)
                nominal = rng.uniform(0.1, 0.9, size=200)
                cost = CostModel(0.1)
                if kind == "personalized":
                    spec = GammaSpec.per_expert_levels([2.0, 4.0])
                    bounds = weight_bounds(nominal, spec, data.expert_ids)
                    assignment = fit_assignment(data, "empirical")
                else:
                    bounds = weight_bounds(nominal, 3.0)
                    assignment = None
            policy = LinearPolicy(rng.normal(scale=0.8, size=(1, 4)))
            shape = (2, 4) if kind == "personalized" else (4,)
            router = LinearRouter(rng.normal(scale=0.8, size=shape))
            value = worst_case_objective(kind, data, policy, router, NEVER, cost,
                                         bounds, assignment)
            w = value.worst_case_weights
            pol_grad, rt_grad = gradient(kind, data, policy, router, NEVER, cost,
                                         w, assignment)

            def f(pp, rp):
                return objective_at_weights(
                    kind, data, LinearPolicy(pp), LinearRouter(rp), NEVER, cost,
                    w, assignment,
                ).total

            fd = []
            for idx in np.ndindex(*policy.params.shape):
                up = policy.params.copy()
                up[idx] += step
                dn = policy.params.copy()
                dn[idx] -= step
                fd.append((f(up, router.params) - f(dn, router.params)) / (2 * step))
            for idx in np.ndindex(*router.params.shape):
                up = router.params.copy()
                up[idx] += step
                dn = router.params.copy()
                dn[idx] -= step
                fd.append((f(policy.params, up) - f(policy.params, dn)) / (2 * step))
            numeric = np.asarray(fd)
            analytic = np.concatenate([pol_grad.ravel(), rt_grad.ravel()])
            rel = np.linalg.norm(analytic - numeric) / max(
                np.linalg.norm(numeric), 1e-12
            )
            worst_rel = max(worst_rel, rel)
        worst[kind] = worst_rel
    checks = [(v <= 1e-4, f"{k} worst rel err {v:.2e}") for k, v in worst.items()]
    _report(3, checks)


def test_criterion_4_degenerate_reductions():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(300, 3))
    t = rng.integers(0, 2, size=300)
    y = rng.normal(size=300)
    nominal = rng.uniform(0.2, 0.9, size=300)
    cost = CostModel(0.1)

    data = LoggedDataset(x, t, y, m=2)
    policy = LinearPolicy(rng.normal(size=(1, 4)))
    router = LinearRouter(rng.normal(size=4))
    worst = worst_case_regret(data, policy, router, NEVER, cost,
                              weight_bounds(nominal, 1.0))
    plugin = objective_at_weights("vs-baseline", data, policy, router, NEVER, cost,
                                  1.0 / nominal)
    gap_gamma1 = abs(worst.total - plugin.total)

    pers_data = LoggedDataset(x, t, y, expert_ids=np.zeros(300, dtype=int), m=2, K=1)
    rho = rng.normal(size=4)
    homog = worst_case_regret(pers_data, policy, LinearRouter(rho), NEVER, cost,
                              weight_bounds(nominal, 3.0))
    from confdefer import AssignmentModel

    pers = personalized_worst_case_regret(
        pers_data, policy, LinearRouter(rho[None, :]), NEVER, cost,
        weight_bounds(nominal, GammaSpec.per_expert_levels([3.0]),
                      pers_data.expert_ids),
        AssignmentModel(1, 0.01, frequencies=np.ones(1)),
    )
    gap_k1 = abs(pers.total - homog.total)

    zero = worst_case_regret(data, NEVER, ConstantRouter(0.0), NEVER, cost,
                             weight_bounds(nominal, 5.0))
    checks = [
        (gap_gamma1 <= 1e-12, f"gamma=1 vs plug-in gap {gap_gamma1:.2e} <= 1e-12"),
        (gap_k1 <= 1e-12, f"K=1 personalized gap {gap_k1:.2e} <= 1e-12"),
        (zero.total == 0.0, f"baseline self-regret {zero.total!r} == 0"),
    ]
    _report(4, checks)


def test_criterion_5_generator_msm_tightness():
    from confdefer import tilted_propensity

    # the odds ratio is multiplicative (up to e^4 here), so "within 1e-12"
    # is checked relative to the target level; an absolute 1e-12 on a ratio
    # of ~55 would demand more precision than the double chain carries
    worst_gap = 0.0
    for seed, gammas in ((0, [np.e]), (1, [1.5, np.exp(2.5), np.exp(4.0)])):
        _, truth = generate_synthetic(5000, gammas, seed=seed)
        odds_true = truth.p_true / (1.0 - truth.p_true)
        odds_nom = truth.p_nominal / (1.0 - truth.p_nominal)
        ratio = odds_true / odds_nom
        per_row = truth.gamma_true[truth.expert_ids]
        expected = np.where(truth.u == 1, per_row, 1.0 / per_row)
        worst_gap = max(worst_gap, float(np.max(np.abs(ratio / expected - 1.0))))
    p = np.linspace(1e-6, 1.0 - 1e-6, 2001)
    identity_gap = 0.0
    for u in (0, 1):
        tilt = tilted_propensity(p, 1.0, np.full_like(p, u))
        identity_gap = max(identity_gap, float(np.max(np.abs(tilt - p))))
    checks = [
        (worst_gap <= 1e-12, f"max odds-ratio gap {worst_gap:.2e} <= 1e-12"),
        (identity_gap <= 1e-12, f"gamma=1 tilt gap {identity_gap:.2e} <= 1e-12"),
    ]
    _report(5, checks)


def test_criterion_6_sweep_orderings():
    start = time.perf_counter()
    config = ExperimentConfig(
        data={"source": "synthetic", "n_train": 2000, "n_test": 20000,
              "log_gamma_true": 2.5, "n_experts": 3},
        methods=("human", "confao", "hai", "confhai"),
        log_gamma_grid=(0.01, 1.0, 2.5, 4.0),
        seeds=tuple(range(10)),
        train=TrainConfig(iterations=2000),
        cost=0.0,
        output_dir="unused",
    )
    report = run_experiment(config)
    elapsed = time.perf_counter() - start
    assert not report.partial, [r.error for r in report.rows if r.error]

    def cell(method, gamma):
        label = f"{gamma}"
        vals = [r.regret for r in report.rows
                if r.method == method and r.gamma_label == label]
        return np.asarray(vals)

    confhai_25 = cell("confhai", 2.5)
    human_25 = cell("human", 2.5)
    confao_25 = cell("confao", 2.5)
    confhai_001 = cell("confhai", 0.01)
    hai_001 = cell("hai", 0.01)
    pooled_se = np.sqrt(confhai_001.var(ddof=1) / 10 + hai_001.var(ddof=1) / 10)
    gap_001 = abs(confhai_001.mean() - hai_001.mean())

    checks = [
        (confhai_25.mean() < 0,
         f"confhai@2.5 mean {confhai_25.mean():.3f} < 0"),
        (confhai_25.mean() < human_25.mean(),
         f"confhai {confhai_25.mean():.3f} < human {human_25.mean():.3f}"),
        (confhai_25.mean() < confao_25.mean(),
         f"confhai {confhai_25.mean():.3f} < confao {confao_25.mean():.3f}"),
        (gap_001 <= 2 * pooled_se,
         f"|confhai-hai|@0.01 {gap_001:.3f} <= 2*SE {2 * pooled_se:.3f}"),
        (elapsed <= 600.0, f"runtime {elapsed:.0f}s <= 600s"),
    ]
    _report(6, checks)


def test_criterion_7_personalized_improvement():
    levels = (1.0, 2.5, 4.0)
    config = ExperimentConfig(
        data={"source": "synthetic", "n_train": 2000, "n_test": 20000,
              "log_gamma_true": list(levels), "n_experts": 3},
        methods=("confhai", "confhai-person"),
        log_gamma_grid=(levels,),
        seeds=tuple(range(10)),
        train=TrainConfig(iterations=2000),
        cost=0.0,
        output_dir="unused",
    )
    report = run_experiment(config)
    assert not report.partial, [r.error for r in report.rows if r.error]
    regrets = {}
    for method in ("confhai", "confhai-person"):
        regrets[method] = np.mean([r.regret for r in report.rows
                                   if r.method == method])
    _report(7, [(regrets["confhai-person"] <= regrets["confhai"],
                 f"confhai-person mean {regrets['confhai-person']:.3f} <= "
                 f"confhai mean {regrets['confhai']:.3f}")])


def test_criterion_8_pessimism_monotonicity():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(500, 4))
    t = rng.integers(0, 2, size=500)
    y = rng.normal(size=500)
    data = LoggedDataset(x, t, y, m=2)
    nominal = rng.uniform(0.1, 0.9, size=500)
    policy = LinearPolicy(rng.normal(size=(1, 5)))
    router = LinearRouter(rng.normal(size=5))
    values = [
        worst_case_regret(data, policy, router, NEVER, CostModel(0.1),
                          weight_bounds(nominal, float(g))).total
        for g in (1, 2, 4, 8, 16)
    ]
    _report(8, [(all(b >= a for a, b in zip(values, values[1:])),
                 "values " + ", ".join(f"{v:.4f}" for v in values))])
