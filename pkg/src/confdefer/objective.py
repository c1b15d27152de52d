"""Empirical team-risk and regret estimators with their parameter gradients.

Every estimator decomposes into a weight-free human term plus one
self-normalized term per treatment arm. The worst case over the sensitivity
box maximizes each arm's term independently (the arm indicator partitions
rows), so a single sorted line search per arm gives the exact inner maximum.
Gradients treat the inner maximizer as fixed (envelope rule): they are exact
gradients of the objective at the current worst-case weights.

:class:`WorstCaseKernel` fuses one evaluation of value and gradient with all
data-dependent statics precomputed; the training loops call it thousands of
times. The module-level functions are thin wrappers that keep the one-shot
API convenient.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import BaselinePolicy, CostModel, LinearPolicy, LoggedDataset
from .msm import WeightBounds, _lfp_core
from .propensity import AssignmentModel

KINDS = ("vs-baseline", "vs-human", "personalized")
_ALL_KINDS = KINDS + ("personalized-vs-human",)


@dataclass(frozen=True)
class ObjectiveValue:
    """Decomposed estimator value: total = human_term + sum(per_arm_terms)."""

    total: float
    human_term: float
    per_arm_terms: tuple
    worst_case_weights: np.ndarray


def hard_destinations(router, covariates: np.ndarray) -> np.ndarray:
    """Deterministic deployment routing: 0 = algorithm, >= 1 = human (expert id + 1).

    Homogeneous routers threshold the human probability at 0.5 (ties go to
    the human); personalized routers take the argmax destination.
    """
    if getattr(router, "personalized", False):
        return np.argmax(router.dest_probs(covariates), axis=1)
    return (router.human_prob(covariates) >= 0.5).astype(int)


def _check_lengths(dataset: LoggedDataset, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape[0] != dataset.n:
        raise ValueError(f"weights have length {w.shape[0]}, expected {dataset.n}")
    return w


def team_risk(
    dataset: LoggedDataset,
    policy: LinearPolicy,
    router,
    cost: CostModel,
    weights: np.ndarray,
    deterministic: bool = False,
) -> float:
    """Self-normalized estimate of the deferral team's expected risk.

    Rows routed to humans contribute their observed risk plus the query
    cost; the rest contribute the weighted policy-matched risk, normalized
    within each treatment arm. Empty arms are skipped.
    """
    if getattr(router, "personalized", False):
        raise ValueError("team_risk expects a homogeneous (scalar-output) router")
    w = _check_lengths(dataset, weights)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    x, t, y = dataset.covariates, dataset.treatments, dataset.risks
    phi = router.human_prob(x)
    if deterministic:
        phi = (phi >= 0.5).astype(float)
    c = cost.per_row(dataset.n)
    pi_obs = policy.arm_probs(x)[np.arange(dataset.n), t]
    total = float(np.mean(phi * (y + c)))
    for arm in range(dataset.m):
        idx = t == arm
        if not idx.any():
            continue
        num = float(np.sum(w[idx] * pi_obs[idx] * (1.0 - phi[idx]) * y[idx]))
        total += num / float(np.sum(w[idx]))
    return total


class WorstCaseKernel:
    """Reusable evaluator of one worst-case objective on one dataset.

    Precomputes everything that does not depend on the policy/router
    parameters (design matrix, per-arm row indices, bound slices, baseline
    and cost terms), then :meth:`evaluate` runs a single forward pass, one
    line search per arm, and optionally the backward pass.
    """

    def __init__(self, kind, dataset, baseline, cost, bounds, assignment=None):
        if kind not in _ALL_KINDS:
            raise ValueError(f"unknown objective kind {kind!r}")
        self.kind = kind
        self.dataset = dataset
        personalized = kind in ("personalized", "personalized-vs-human")
        if personalized and not bounds.per_expert:
            raise ValueError("personalized objective needs per-expert bounds")
        if not personalized and bounds.per_expert:
            raise ValueError("per-expert bounds passed in homogeneous mode")
        if bounds.n != dataset.n:
            raise ValueError("bounds do not match dataset rows")

        n = dataset.n
        self.n = n
        self.m = dataset.m
        self.t = dataset.treatments
        self.y = dataset.risks.astype(float)
        self.z = dataset.design_matrix()
        self.c = cost.per_row(n)
        self.yc = self.y + self.c
        self.arm_rows = [np.nonzero(self.t == arm)[0] for arm in range(self.m)]
        self.arm_lower = [bounds.lower[idx] for idx in self.arm_rows]
        self.arm_upper = [bounds.upper[idx] for idx in self.arm_rows]

        if kind in ("vs-baseline", "personalized"):
            probs = baseline.arm_probs(dataset.covariates)
            self.pic_obs = probs[np.arange(n), self.t]
        else:
            self.pic_obs = None

        if personalized:
            if dataset.expert_ids is None:
                raise ValueError("personalized objective needs expert ids")
            if assignment is None:
                raise ValueError("personalized objective needs an assignment model")
            self.d0 = assignment.row_probs(dataset)
            self.hcol = 1 + dataset.expert_ids
        self.personalized = personalized

    def _policy_forward(self, policy):
        """Returns (treated-arm probability or full matrix, observed-arm probability)."""
        if getattr(policy, "m", self.m) != self.m:
            raise ValueError(f"policy has {policy.m} arms, dataset {self.m}")
        params = getattr(policy, "params", None)
        if params is not None and self.m == 2:
            p1 = expit(self.z @ params[0])
            pi_obs = np.where(self.t == 1, p1, 1.0 - p1)
            return p1, pi_obs
        if params is not None:
            logits = np.hstack([np.zeros((self.n, 1)), self.z @ params.T])
            logits -= logits.max(axis=1, keepdims=True)
            q = np.exp(logits)
            q /= q.sum(axis=1, keepdims=True)
        else:
            q = policy.arm_probs(self.dataset.covariates)
        return q, q[np.arange(self.n), self.t]

    def _router_forward(self, router):
        params = getattr(router, "params", None)
        if self.personalized:
            if not getattr(router, "personalized", False):
                raise ValueError("personalized objective needs a K+1-way router")
            if params is not None:
                if params.shape[0] != self.dataset.K:
                    raise ValueError(
                        f"router has {params.shape[0] + 1} destinations, "
                        f"expected {self.dataset.K + 1}"
                    )
                logits = np.hstack([np.zeros((self.n, 1)), self.z @ params.T])
                logits -= logits.max(axis=1, keepdims=True)
                dest = np.exp(logits)
                dest /= dest.sum(axis=1, keepdims=True)
                return dest
            dest = router.dest_probs(self.dataset.covariates)
            if dest.shape[1] != self.dataset.K + 1:
                raise ValueError(
                    f"router has {dest.shape[1]} destinations, "
                    f"expected {self.dataset.K + 1}"
                )
            return dest
        if getattr(router, "personalized", False):
            raise ValueError(f"{self.kind} objective expects a homogeneous router")
        if params is not None:
            return expit(self.z @ params)
        return router.human_prob(self.dataset.covariates)

    def evaluate(self, policy, router, want_grad: bool = False):
        """Worst-case value at (policy, router); optionally its gradients.

        Returns (ObjectiveValue, policy_gradient, router_gradient); the
        gradients are None unless requested (and the router gradient is None
        for routers without parameters).
        """
        n, y, yc, t, z = self.n, self.y, self.yc, self.t, self.z
        pol_fwd, pi_obs = self._policy_forward(policy)
        route = self._router_forward(router)

        if self.personalized:
            algo_prob = route[:, 0]
            phi_h = route[np.arange(n), self.hcol]
            if self.kind == "personalized":
                human = float(np.mean(phi_h / self.d0 * yc))
                r = (algo_prob * pi_obs - self.pic_obs) * y
            else:
                human = float(np.mean((phi_h / self.d0 - 1.0) * yc))
                r = algo_prob * pi_obs * y
        else:
            phi = route
            algo_prob = 1.0 - phi
            if self.kind == "vs-baseline":
                human = float(np.mean(phi * yc))
                r = (algo_prob * pi_obs - self.pic_obs) * y
            else:
                human = float(np.mean((phi - 1.0) * yc))
                r = algo_prob * pi_obs * y

        terms = []
        weights = np.empty(n)
        drow = np.empty(n)
        for arm in range(self.m):
            idx = self.arm_rows[arm]
            if idx.size == 0:
                terms.append(0.0)
                continue
            value, w_arm, _ = _lfp_core(r[idx], self.arm_lower[arm], self.arm_upper[arm])
            weights[idx] = w_arm
            drow[idx] = w_arm.sum()
            terms.append(value)
        result = ObjectiveValue(human + sum(terms), human, tuple(terms), weights)
        if not want_grad:
            return result, None, None

        g = weights * algo_prob * y / drow
        if not np.all(np.isfinite(g)):
            bad = int(np.nonzero(~np.isfinite(g))[0][0])
            raise FloatingPointError(f"non-finite gradient contribution at row {bad}")
        if pol_fwd.ndim == 1:
            p1 = pol_fwd
            col = p1 * (g * (t == 1) - g * pi_obs)
            policy_grad = (z.T @ col)[None, :]
        else:
            q = pol_fwd
            e_pol = -q * (g * pi_obs)[:, None]
            e_pol[np.arange(n), t] += g * pi_obs
            policy_grad = e_pol[:, 1:].T @ z

        router_grad = None
        if hasattr(router, "params"):
            if self.personalized:
                dest = route
                v = np.zeros_like(dest)
                v[:, 0] = weights * pi_obs * y / drow
                v[np.arange(n), self.hcol] += yc / (n * self.d0)
                vdot = (v * dest).sum(axis=1)
                e_rt = dest * (v - vdot[:, None])
                router_grad = e_rt[:, 1:].T @ z
            else:
                u = yc / n - weights * pi_obs * y / drow
                if not np.all(np.isfinite(u)):
                    bad = int(np.nonzero(~np.isfinite(u))[0][0])
                    raise FloatingPointError(
                        f"non-finite gradient contribution at row {bad}"
                    )
                router_grad = z.T @ (u * phi * algo_prob)
        return result, policy_grad, router_grad


def worst_case_regret(
    dataset: LoggedDataset,
    policy,
    router,
    baseline: BaselinePolicy,
    cost: CostModel,
    bounds: WeightBounds,
) -> ObjectiveValue:
    """Worst-case self-normalized regret of the deferral system vs a baseline.

    The human term is weight-free; each arm's term is maximized over the
    sensitivity box by the sorted line search. A total below zero certifies
    improvement over the baseline at the assumed sensitivity level.
    """
    kernel = WorstCaseKernel("vs-baseline", dataset, baseline, cost, bounds)
    return kernel.evaluate(policy, router)[0]


def worst_case_regret_vs_human(
    dataset: LoggedDataset,
    policy,
    router,
    cost: CostModel,
    bounds: WeightBounds,
) -> ObjectiveValue:
    """Worst-case regret of the deferral system vs the incumbent humans
    (the all-deferred system); negative totals certify improvement."""
    kernel = WorstCaseKernel("vs-human", dataset, None, cost, bounds)
    return kernel.evaluate(policy, router)[0]


def personalized_worst_case_regret(
    dataset: LoggedDataset,
    policy,
    router,
    baseline: BaselinePolicy,
    cost: CostModel,
    bounds: WeightBounds,
    assignment: AssignmentModel,
) -> ObjectiveValue:
    """Worst-case regret with expert-specific routing and sensitivity levels.

    The human term reweights each row by the router-to-logged-assignment
    ratio; the arm terms use each row's expert-specific bounds.
    """
    kernel = WorstCaseKernel("personalized", dataset, baseline, cost, bounds, assignment)
    return kernel.evaluate(policy, router)[0]


def personalized_worst_case_regret_vs_human(
    dataset: LoggedDataset,
    policy,
    router,
    cost: CostModel,
    bounds: WeightBounds,
    assignment: AssignmentModel,
) -> ObjectiveValue:
    """Personalized analogue of the vs-human certificate: worst-case regret
    of the routed system against the logged assignment rule (which routed
    every instance to an expert)."""
    kernel = WorstCaseKernel(
        "personalized-vs-human", dataset, None, cost, bounds, assignment
    )
    return kernel.evaluate(policy, router)[0]


def worst_case_objective(
    kind: str,
    dataset: LoggedDataset,
    policy,
    router,
    baseline,
    cost: CostModel,
    bounds: WeightBounds,
    assignment: AssignmentModel | None = None,
) -> ObjectiveValue:
    """Dispatch to the worst-case estimator for the given objective kind."""
    if kind not in KINDS:
        raise ValueError(f"unknown objective kind {kind!r}")
    kernel = WorstCaseKernel(kind, dataset, baseline, cost, bounds, assignment)
    return kernel.evaluate(policy, router)[0]


def _row_r(kind, dataset, policy, router, baseline, cost, assignment):
    """Per-row coefficient of the weighted arm terms, plus the human term."""
    n = dataset.n
    y = dataset.risks
    t = dataset.treatments
    pi_obs = policy.arm_probs(dataset.covariates)[np.arange(n), t]
    c = cost.per_row(n)
    if kind in ("personalized", "personalized-vs-human"):
        if dataset.expert_ids is None:
            raise ValueError("personalized objective needs expert ids")
        if assignment is None:
            raise ValueError("personalized objective needs an assignment model")
        if not getattr(router, "personalized", False):
            raise ValueError("personalized objective needs a K+1-way router")
        dest = router.dest_probs(dataset.covariates)
        d0 = assignment.row_probs(dataset)
        phi_h = dest[np.arange(n), 1 + dataset.expert_ids]
        if kind == "personalized-vs-human":
            human = float(np.mean((phi_h / d0 - 1.0) * (y + c)))
            r = dest[:, 0] * pi_obs * y
        else:
            pic_obs = baseline.arm_probs(dataset.covariates)[np.arange(n), t]
            human = float(np.mean(phi_h / d0 * (y + c)))
            r = (dest[:, 0] * pi_obs - pic_obs) * y
        return r, human
    if getattr(router, "personalized", False):
        raise ValueError(f"{kind} objective expects a homogeneous router")
    phi = router.human_prob(dataset.covariates)
    if kind == "vs-baseline":
        pic_obs = baseline.arm_probs(dataset.covariates)[np.arange(n), t]
        human = float(np.mean(phi * (y + c)))
        r = ((1.0 - phi) * pi_obs - pic_obs) * y
    elif kind == "vs-human":
        human = float(np.mean((phi - 1.0) * (y + c)))
        r = (1.0 - phi) * pi_obs * y
    else:
        raise ValueError(f"unknown objective kind {kind!r}")
    return r, human


def objective_at_weights(
    kind: str,
    dataset: LoggedDataset,
    policy,
    router,
    baseline,
    cost: CostModel,
    weights: np.ndarray,
    assignment: AssignmentModel | None = None,
) -> ObjectiveValue:
    """Same decomposition as the worst-case estimators but at fixed weights.

    This is the plug-in value when called with nominal inverse propensities,
    and the envelope objective the gradients differentiate when called with
    the current inner maximizer.
    """
    w = _check_lengths(dataset, weights)
    r, human = _row_r(kind, dataset, policy, router, baseline, cost, assignment)
    terms = []
    t = dataset.treatments
    for arm in range(dataset.m):
        idx = t == arm
        if not idx.any():
            terms.append(0.0)
            continue
        terms.append(float(np.sum(r[idx] * w[idx]) / np.sum(w[idx])))
    return ObjectiveValue(human + sum(terms), human, tuple(terms), w)


def gradient(
    kind: str,
    dataset: LoggedDataset,
    policy: LinearPolicy,
    router,
    baseline,
    cost: CostModel,
    weights: np.ndarray,
    assignment: AssignmentModel | None = None,
):
    """Exact gradient of the fixed-weight objective in (policy, router) params.

    ``weights`` should be the current inner maximizer; by the envelope rule
    the result is then a supergradient of the worst-case objective. Returns
    (policy_gradient, router_gradient); the router gradient is None for
    routers without parameters.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown objective kind {kind!r}")
    w = _check_lengths(dataset, weights)
    n = dataset.n
    x, t, y = dataset.covariates, dataset.treatments, dataset.risks
    z = dataset.design_matrix()
    c = cost.per_row(n)
    q = policy.arm_probs(x)
    pi_obs = q[np.arange(n), t]

    arm_den = np.bincount(t, weights=w, minlength=dataset.m)
    d_row = arm_den[t]  # every logged row's arm is populated, so d_row > 0

    personalized = kind == "personalized"
    if personalized:
        dest = router.dest_probs(x)
        algo_prob = dest[:, 0]
    else:
        phi = router.human_prob(x)
        algo_prob = 1.0 - phi

    # d total / d pi(t_i | x_i), with weights fixed
    g = w * algo_prob * y / d_row
    if not np.all(np.isfinite(g)):
        bad = int(np.nonzero(~np.isfinite(g))[0][0])
        raise FloatingPointError(f"non-finite gradient contribution at row {bad}")

    # softmax backprop for the policy (arm 0's logit is pinned)
    v_dot = g * pi_obs
    e_pol = -q * v_dot[:, None]
    e_pol[np.arange(n), t] += g * pi_obs
    policy_grad = e_pol[:, 1:].T @ z

    router_grad = None
    if personalized:
        if hasattr(router, "params"):
            d0 = assignment.row_probs(dataset)
            v = np.zeros_like(dest)
            v[:, 0] = w * pi_obs * y / d_row
            v[np.arange(n), 1 + dataset.expert_ids] += (y + c) / (n * d0)
            vdot = (v * dest).sum(axis=1)
            e_rt = dest * (v - vdot[:, None])
            router_grad = e_rt[:, 1:].T @ z
    else:
        # identical human-term derivative for vs-baseline and vs-human
        u = (y + c) / n - w * pi_obs * y / d_row
        if not np.all(np.isfinite(u)):
            bad = int(np.nonzero(~np.isfinite(u))[0][0])
            raise FloatingPointError(f"non-finite gradient contribution at row {bad}")
        if hasattr(router, "params"):
            router_grad = z.T @ (u * phi * (1.0 - phi))
    return policy_grad, router_grad
