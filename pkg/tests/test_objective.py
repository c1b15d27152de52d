import numpy as np
import pytest

from confdefer import (
    AssignmentModel,
    BaselinePolicy,
    ConstantRouter,
    CostModel,
    GammaSpec,
    LinearPolicy,
    LinearRouter,
    LoggedDataset,
    WeightBounds,
    fit_assignment,
    generate_toy,
    gradient,
    hard_destinations,
    objective_at_weights,
    personalized_worst_case_regret,
    team_risk,
    weight_bounds,
    worst_case_objective,
    worst_case_regret,
    worst_case_regret_vs_human,
)

NEVER = BaselinePolicy.never_treat()


def always_treat(d=3):
    w = np.zeros(d + 1)
    w[0] = 60.0
    return LinearPolicy(w)


def random_data(rng, n=200, d=3, m=2, experts=0):
    x = rng.normal(size=(n, d))
    t = rng.integers(0, m, size=n)
    y = rng.normal(size=n)
    h = rng.integers(0, experts, size=n) if experts else None
    return LoggedDataset(x, t, y, expert_ids=h, m=m, K=experts)


def random_bounds(rng, data, gamma=3.0):
    nominal = rng.uniform(0.15, 0.95, size=data.n)
    if isinstance(gamma, GammaSpec):
        return weight_bounds(nominal, gamma, expert_ids=data.expert_ids)
    return weight_bounds(nominal, gamma)


class TestTeamRisk:
    def test_full_deferral_is_mean_cost(self):
        rng = np.random.default_rng(0)
        data = random_data(rng)
        w = rng.uniform(1, 5, data.n)
        value = team_risk(data, always_treat(), ConstantRouter(1.0), CostModel(0.25), w)
        assert value == pytest.approx(np.mean(data.risks + 0.25), abs=1e-12)

    def test_single_arm_hajek_mean_scale_free(self):
        rng = np.random.default_rng(1)
        data = random_data(rng, m=1)
        policy = LinearPolicy.zeros(3, m=2)  # arm probs unused for m=1 sums

        class OneArm:
            m = 1

            def arm_probs(self, x):
                return np.ones((np.atleast_2d(x).shape[0], 1))

        w = rng.uniform(1, 4, data.n)
        v1 = team_risk(data, OneArm(), ConstantRouter(0.0), CostModel(0.0), w)
        v2 = team_risk(data, OneArm(), ConstantRouter(0.0), CostModel(0.0), 7.0 * w)
        expected = np.dot(w, data.risks) / w.sum()
        assert v1 == pytest.approx(expected, abs=1e-12)
        assert v2 == pytest.approx(v1, abs=1e-12)

    def test_toy_nominal_always_treat(self):
        data, toy = generate_toy(50000, 0.3, seed=10)
        value = team_risk(data, always_treat(1), ConstantRouter(0.0), CostModel(0.0),
                          1.0 / toy.rows.p_nominal)
        assert value == pytest.approx(-1.6, abs=0.05)

    def test_rejects_bad_inputs(self):
        rng = np.random.default_rng(2)
        data = random_data(rng, n=20)
        with pytest.raises(ValueError, match="length"):
            team_risk(data, always_treat(), ConstantRouter(0.0), CostModel(0.0),
                      np.ones(7))
        with pytest.raises(ValueError, match="positive"):
            team_risk(data, always_treat(), ConstantRouter(0.0), CostModel(0.0),
                      np.zeros(20))


class TestWorstCaseRegret:
    def test_baseline_as_policy_is_exactly_zero(self):
        rng = np.random.default_rng(3)
        data = random_data(rng)
        bounds = random_bounds(rng, data)
        value = worst_case_regret(data, NEVER, ConstantRouter(0.0), NEVER,
                                  CostModel(0.0), bounds)
        assert value.total == 0.0
        assert value.human_term == 0.0
        assert all(term == 0.0 for term in value.per_arm_terms)

    def test_toy_worst_case_always_treat_arm(self):
        data, toy = generate_toy(50000, 0.3, seed=11)
        bounds = weight_bounds(toy.rows.p_nominal, 4.0)
        value = worst_case_regret(data, always_treat(1), ConstantRouter(0.0), NEVER,
                                  CostModel(0.0), bounds)
        assert value.per_arm_terms[1] == pytest.approx(-1.0, abs=0.05)

    def test_gamma_one_equals_plugin(self):
        rng = np.random.default_rng(4)
        data = random_data(rng)
        nominal = rng.uniform(0.2, 0.95, data.n)
        bounds = weight_bounds(nominal, 1.0)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        router = LinearRouter(rng.normal(size=4))
        worst = worst_case_regret(data, policy, router, NEVER, CostModel(0.1), bounds)
        plugin = objective_at_weights("vs-baseline", data, policy, router, NEVER,
                                      CostModel(0.1), 1.0 / nominal)
        assert worst.total == pytest.approx(plugin.total, abs=1e-12)

    def test_rejects_per_expert_bounds(self):
        rng = np.random.default_rng(5)
        data = random_data(rng, experts=2)
        bounds = random_bounds(rng, data, GammaSpec.per_expert_levels([2.0, 3.0]))
        with pytest.raises(ValueError, match="per-expert"):
            worst_case_regret(data, always_treat(), ConstantRouter(0.0), NEVER,
                              CostModel(0.0), bounds)


class TestWorstCaseVsHuman:
    def test_full_deferral_is_exactly_zero(self):
        rng = np.random.default_rng(6)
        data = random_data(rng)
        bounds = random_bounds(rng, data)
        value = worst_case_regret_vs_human(data, always_treat(), ConstantRouter(1.0),
                                           CostModel(0.3), bounds)
        assert value.total == 0.0

    def test_toy_no_certified_improvement(self):
        data, toy = generate_toy(50000, 0.3, seed=12)
        bounds = weight_bounds(toy.rows.p_nominal, 4.0)
        value = worst_case_regret_vs_human(data, always_treat(1), ConstantRouter(0.0),
                                           CostModel(0.0), bounds)
        assert value.total == pytest.approx(0.2, abs=0.05)

    def test_huge_cost_makes_never_defer_optimal(self):
        rng = np.random.default_rng(7)
        data = random_data(rng, n=150)
        bounds = random_bounds(rng, data)
        cost = CostModel(np.abs(data.risks).max() + 1.0)
        at_zero = worst_case_regret_vs_human(
            data, always_treat(), ConstantRouter(0.0), cost, bounds).total
        for _ in range(20):
            router = LinearRouter(rng.normal(scale=2.0, size=4))
            other = worst_case_regret_vs_human(
                data, always_treat(), router, cost, bounds).total
            assert at_zero <= other + 1e-12


class TestPersonalized:
    def test_single_expert_reduces_to_homogeneous(self):
        rng = np.random.default_rng(8)
        data = random_data(rng, experts=1)
        nominal = rng.uniform(0.2, 0.9, data.n)
        rho = rng.normal(size=4)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        assignment = AssignmentModel(1, 0.01, frequencies=np.ones(1))
        homog = worst_case_regret(
            data, policy, LinearRouter(rho), NEVER, CostModel(0.05),
            weight_bounds(nominal, 3.0),
        )
        pers = personalized_worst_case_regret(
            data, policy, LinearRouter(rho[None, :]), NEVER, CostModel(0.05),
            weight_bounds(nominal, GammaSpec.per_expert_levels([3.0]),
                          data.expert_ids),
            assignment,
        )
        assert pers.total == pytest.approx(homog.total, abs=1e-12)

    def test_never_defer_reduces_to_policy_only_regret(self):
        rng = np.random.default_rng(9)
        data = random_data(rng, experts=3)
        spec = GammaSpec.per_expert_levels([2.0, 2.0, 2.0])
        bounds = random_bounds(rng, data, spec)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        assignment = fit_assignment(data, "empirical")
        pers = personalized_worst_case_regret(
            data, policy, ConstantRouter([1.0, 0.0, 0.0, 0.0]), NEVER,
            CostModel(0.2), bounds, assignment,
        )
        assert pers.human_term == 0.0
        homog_bounds = WeightBounds(bounds.lower, bounds.upper)  # same box
        policy_only = worst_case_regret(
            data, policy, ConstantRouter(0.0), NEVER, CostModel(0.2), homog_bounds
        )
        assert pers.total == pytest.approx(policy_only.total, abs=1e-12)

    def test_wider_expert_boxes_never_shrink_worst_case(self):
        rng = np.random.default_rng(10)
        data = random_data(rng, experts=3)
        nominal = rng.uniform(0.2, 0.9, data.n)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        router = LinearRouter(rng.normal(size=(3, 4)))
        assignment = fit_assignment(data, "empirical")
        tight = weight_bounds(nominal, GammaSpec.per_expert_levels([1.0] * 3),
                              data.expert_ids)
        wide = weight_bounds(nominal,
                             GammaSpec.per_expert_levels([1.0, 1.0, np.e]),
                             data.expert_ids)
        v_tight = personalized_worst_case_regret(
            data, policy, router, NEVER, CostModel(0.0), tight, assignment).total
        v_wide = personalized_worst_case_regret(
            data, policy, router, NEVER, CostModel(0.0), wide, assignment).total
        assert v_wide >= v_tight - 1e-12

    def test_requires_expert_ids_and_assignment(self):
        rng = np.random.default_rng(11)
        data = random_data(rng)
        bounds = WeightBounds(np.ones(data.n), np.full(data.n, 2.0), per_expert=True)
        with pytest.raises(ValueError, match="expert ids"):
            personalized_worst_case_regret(
                data, always_treat(), LinearRouter(np.zeros((2, 4))), NEVER,
                CostModel(0.0), bounds, None,
            )


class TestStructure:
    def test_decomposition_identity(self):
        rng = np.random.default_rng(12)
        data = random_data(rng, experts=2)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        assignment = fit_assignment(data, "empirical")
        cases = [
            worst_case_regret(data, policy, LinearRouter(rng.normal(size=4)), NEVER,
                              CostModel(0.1), random_bounds(rng, data)),
            worst_case_regret_vs_human(data, policy, LinearRouter(rng.normal(size=4)),
                                       CostModel(0.1), random_bounds(rng, data)),
            personalized_worst_case_regret(
                data, policy, LinearRouter(rng.normal(size=(2, 4))), NEVER,
                CostModel(0.1),
                random_bounds(rng, data, GammaSpec.per_expert_levels([2.0, 4.0])),
                assignment,
            ),
            objective_at_weights("vs-baseline", data, policy,
                                 LinearRouter(rng.normal(size=4)), NEVER,
                                 CostModel(0.1), rng.uniform(1, 3, data.n)),
        ]
        for value in cases:
            assert value.total == pytest.approx(
                value.human_term + sum(value.per_arm_terms), abs=1e-12
            )

    def test_pessimism_nondecreasing_in_gamma(self):
        rng = np.random.default_rng(13)
        data = random_data(rng)
        nominal = rng.uniform(0.1, 0.9, data.n)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        router = LinearRouter(rng.normal(size=4))
        values = [
            worst_case_regret(data, policy, router, NEVER, CostModel(0.1),
                              weight_bounds(nominal, g)).total
            for g in (1.0, 2.0, 4.0, 8.0, 16.0)
        ]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_scaling_bounds_leaves_arm_terms_unchanged(self):
        rng = np.random.default_rng(14)
        data = random_data(rng)
        bounds = random_bounds(rng, data)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        router = LinearRouter(rng.normal(size=4))
        base = worst_case_regret(data, policy, router, NEVER, CostModel(0.1), bounds)
        scaled = WeightBounds(5.0 * bounds.lower, 5.0 * bounds.upper)
        other = worst_case_regret(data, policy, router, NEVER, CostModel(0.1), scaled)
        for a, b in zip(base.per_arm_terms, other.per_arm_terms):
            assert b == pytest.approx(a, abs=1e-12)

    def test_empty_arm_contributes_zero(self):
        rng = np.random.default_rng(15)
        data = random_data(rng, n=60)
        keep = data.treatments == 0
        sliced = LoggedDataset(data.covariates[keep], data.treatments[keep],
                               data.risks[keep], m=2)
        bounds = random_bounds(rng, sliced)
        value = worst_case_regret(sliced, always_treat(), ConstantRouter(0.0), NEVER,
                                  CostModel(0.0), bounds)
        assert value.per_arm_terms[1] == 0.0

    def test_worst_case_weights_lie_in_bounds(self):
        rng = np.random.default_rng(16)
        data = random_data(rng)
        bounds = random_bounds(rng, data)
        value = worst_case_regret(data, always_treat(), ConstantRouter(0.3), NEVER,
                                  CostModel(0.0), bounds)
        assert np.all(value.worst_case_weights >= bounds.lower - 1e-12)
        assert np.all(value.worst_case_weights <= bounds.upper + 1e-12)


class TestGradient:
    def fd_gradient(self, kind, data, policy, router, baseline, cost, w, assignment,
                    step=1e-5):
        def value(pp, rp):
            p2 = LinearPolicy(pp, m=policy.m)
            r2 = LinearRouter(rp)
            return objective_at_weights(kind, data, p2, r2, baseline, cost, w,
                                        assignment).total

        fd_p = np.zeros_like(policy.params)
        for idx in np.ndindex(*policy.params.shape):
            up = policy.params.copy()
            up[idx] += step
            dn = policy.params.copy()
            dn[idx] -= step
            fd_p[idx] = (value(up, router.params) - value(dn, router.params)) / (2 * step)
        fd_r = np.zeros_like(router.params)
        for idx in np.ndindex(*router.params.shape):
            up = router.params.copy()
            up[idx] += step
            dn = router.params.copy()
            dn[idx] -= step
            fd_r[idx] = (value(policy.params, up) - value(policy.params, dn)) / (2 * step)
        return fd_p, fd_r

    @pytest.mark.parametrize("kind", ["vs-baseline", "vs-human", "personalized"])
    def test_matches_central_differences(self, kind):
        rng = np.random.default_rng(17)
        experts = 2 if kind == "personalized" else 0
        data = random_data(rng, n=120, m=3, experts=experts)
        baseline = BaselinePolicy.never_treat(3)
        cost = CostModel(0.15)
        if kind == "personalized":
            spec = GammaSpec.per_expert_levels([2.0, 3.5])
            assignment = fit_assignment(data, "empirical")
        else:
            spec, assignment = 3.0, None
        bounds = random_bounds(rng, data, spec)
        for _ in range(5):
            policy = LinearPolicy(rng.normal(scale=0.8, size=(2, 4)), m=3)
            shape = (2, 4) if kind == "personalized" else (4,)
            router = LinearRouter(rng.normal(scale=0.8, size=shape))
            value = worst_case_objective(kind, data, policy, router, baseline, cost,
                                         bounds, assignment)
            w = value.worst_case_weights
            pol_grad, rt_grad = gradient(kind, data, policy, router, baseline, cost,
                                         w, assignment)
            fd_p, fd_r = self.fd_gradient(kind, data, policy, router, baseline, cost,
                                          w, assignment)
            analytic = np.concatenate([pol_grad.ravel(), rt_grad.ravel()])
            numeric = np.concatenate([fd_p.ravel(), fd_r.ravel()])
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric),
                                                           1e-12)
            assert rel <= 1e-4

    def test_matches_central_differences_at_uniform_point(self):
        # the symmetric start: uniform policy equal to the baseline and a
        # router sitting at probability one half
        rng = np.random.default_rng(20)
        data = random_data(rng, n=150)
        bounds = random_bounds(rng, data)
        cost = CostModel(0.1)
        baseline = BaselinePolicy(policy=LinearPolicy(np.zeros((1, 4))))
        policy = LinearPolicy(np.zeros((1, 4)))
        router = LinearRouter(np.zeros(4))
        value = worst_case_objective("vs-baseline", data, policy, router,
                                     baseline, cost, bounds, None)
        pol_grad, rt_grad = gradient("vs-baseline", data, policy, router,
                                     baseline, cost, value.worst_case_weights)
        fd_p, fd_r = self.fd_gradient("vs-baseline", data, policy, router,
                                      baseline, cost, value.worst_case_weights,
                                      None)
        analytic = np.concatenate([pol_grad.ravel(), rt_grad.ravel()])
        numeric = np.concatenate([fd_p.ravel(), fd_r.ravel()])
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric),
                                                       1e-12)
        assert rel <= 1e-4

    def test_tracking_baseline_makes_objective_flat(self):
        # constant risks, zero cost, baseline tied to the evaluated policy,
        # nothing deferred: the objective is identically zero in the policy
        rng = np.random.default_rng(18)
        data = LoggedDataset(rng.normal(size=(80, 2)), rng.integers(0, 2, 80),
                             np.full(80, 1.7), m=2)
        bounds = random_bounds(rng, data)
        step = 1e-5
        theta = rng.normal(size=(1, 3))

        def value_at(params):
            policy = LinearPolicy(params)
            return worst_case_regret(data, policy, ConstantRouter(0.0),
                                     BaselinePolicy(policy=policy), CostModel(0.0),
                                     bounds).total

        for idx in np.ndindex(*theta.shape):
            up = theta.copy()
            up[idx] += step
            dn = theta.copy()
            dn[idx] -= step
            assert abs(value_at(up) - value_at(dn)) / (2 * step) <= 1e-8

    def test_danskin_first_order_consistency(self):
        rng = np.random.default_rng(19)
        data = random_data(rng, n=300)
        bounds = random_bounds(rng, data)
        policy = LinearPolicy(rng.normal(size=(1, 4)))
        router = LinearRouter(rng.normal(size=4))
        value = worst_case_regret(data, policy, router, NEVER, CostModel(0.1), bounds)
        pol_grad, rt_grad = gradient("vs-baseline", data, policy, router, NEVER,
                                     CostModel(0.1), value.worst_case_weights)
        flat = np.concatenate([pol_grad.ravel(), rt_grad.ravel()])
        direction = rng.normal(size=flat.shape)
        direction /= np.linalg.norm(direction)
        for h in (1e-6, 1e-7):
            dp = (direction[:pol_grad.size] * h).reshape(pol_grad.shape)
            dr = direction[pol_grad.size:] * h
            moved = worst_case_regret(
                data, LinearPolicy(policy.params + dp),
                LinearRouter(router.params + dr), NEVER, CostModel(0.1), bounds
            ).total
            predicted = value.total + h * float(np.dot(flat, direction))
            assert abs(moved - predicted) / h <= 0.1


def test_hard_destinations():
    router = LinearRouter(np.array([0.2, 0.0]))
    x = np.zeros((3, 1))
    np.testing.assert_array_equal(hard_destinations(router, x), [1, 1, 1])
    pers = ConstantRouter([0.2, 0.1, 0.7])
    np.testing.assert_array_equal(hard_destinations(pers, np.zeros((2, 1))), [2, 2])
