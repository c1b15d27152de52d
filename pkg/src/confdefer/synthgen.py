"""Synthetic confounded logs with ground truth, and oracle evaluation.

The generator simulates human decision-makers who see an unobserved binary
signal of whether treating lowers risk: their treatment odds are tilted by a
factor gamma (upward when treating helps, downward otherwise) around a
logistic nominal propensity, so every generated row sits exactly on the
sensitivity-model boundary. Stored potential outcomes make ground-truth
(oracle) evaluation possible, which real logs never allow.

A two-point toy variant with a single context reproduces the worked
illustration used by the golden tests.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import CostModel, LoggedDataset, _read_only
from .objective import hard_destinations

COVARIATE_DIM = 5
XI_MEAN_SHIFT = np.array([1.0, 0.5, 1.0, 0.0, 1.0])
TREAT_EFFECT = np.array([1.5, 1.0, 1.5, 1.0, 0.5])
NOMINAL_COEF = np.array([0.0, 0.75, 0.5, 0.0, 1.0, 0.0])  # intercept first
RISK_BASE = 2.5
XI_RISK_SHIFT = 1.5
XI_TREAT_SHIFT = -1.0  # 0.5 * alpha with alpha = -2


def tilted_propensity(nominal: np.ndarray, gamma, u: np.ndarray) -> np.ndarray:
    """True treatment probability whose odds are gamma * nominal odds when
    u = 1 and nominal odds / gamma when u = 0."""
    p = np.asarray(nominal, dtype=float)
    g = np.asarray(gamma, dtype=float)
    u = np.asarray(u, dtype=float)
    num = (g * u + 1.0 - u) * p
    den = (1.0 + 2.0 * (g - 1.0) * p - g) * u + g + (1.0 - g) * p
    return num / den


@dataclass(frozen=True)
class SyntheticTruth:
    """Per-row ground truth for a generated log.

    Holds both potential outcomes, the latent mixture indicator xi, the
    confounder u = [treating is strictly better], nominal and true logging
    propensities, and the per-expert tilt levels, so oracle evaluation can
    redraw human decisions from the true behavior.
    """

    covariates: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    p_nominal: np.ndarray
    p_true: np.ndarray
    gamma_true: np.ndarray
    expert_ids: np.ndarray | None = None

    def __post_init__(self):
        for name in ("covariates", "y0", "y1", "xi", "u", "p_nominal",
                     "p_true", "gamma_true"):
            object.__setattr__(self, name,
                               _read_only(np.asarray(getattr(self, name), dtype=float)))
        if self.expert_ids is not None:
            object.__setattr__(self, "expert_ids",
                               _read_only(np.asarray(self.expert_ids, dtype=int)))

    @property
    def n(self) -> int:
        return self.y0.shape[0]

    def expected_human_risk(self, expert: np.ndarray | None = None) -> np.ndarray:
        """Mean risk per row if a human decides.

        ``expert`` selects each row's decision-maker; None averages over a
        uniformly drawn expert, matching logs where experts are queried at
        random.
        """
        if expert is None:
            acc = np.zeros(self.n)
            for g in self.gamma_true:
                p = tilted_propensity(self.p_nominal, g, self.u)
                acc += p * self.y1 + (1.0 - p) * self.y0
            return acc / len(self.gamma_true)
        g = self.gamma_true[np.asarray(expert, dtype=int)]
        p = tilted_propensity(self.p_nominal, g, self.u)
        return p * self.y1 + (1.0 - p) * self.y0


@dataclass(frozen=True)
class ToyTruth:
    """Truth for the single-context toy example; gamma = 0 means no confounding."""

    gamma: float
    implied_gamma: float
    rows: SyntheticTruth


def generate_toy(n: int, gamma: float, seed: int) -> tuple[LoggedDataset, ToyTruth]:
    """Single-context log with a binary confounder.

    When the confounder u is 1 the potential risks are (y0, y1) = (0, -2),
    otherwise (-1, 0); humans treat with probability 0.5 + gamma when u = 1
    and 0.5 - gamma when u = 0, so the nominal treatment rate is exactly 0.5
    and the implied sensitivity level is (0.5 + gamma) / (0.5 - gamma).
    """
    if not 0.0 <= gamma < 0.5:
        raise ValueError(f"toy gamma must lie in [0, 0.5), got {gamma}")
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    u = (rng.random(n) < 0.5).astype(int)
    p_true = np.where(u == 1, 0.5 + gamma, 0.5 - gamma)
    t = (rng.random(n) < p_true).astype(int)
    y1 = np.where(u == 1, -2.0, 0.0)
    y0 = np.where(u == 1, 0.0, -1.0)
    y = np.where(t == 1, y1, y0)
    x = np.zeros((n, 1))
    implied = (0.5 + gamma) / (0.5 - gamma)
    dataset = LoggedDataset(x, t, y, m=2)
    rows = SyntheticTruth(
        covariates=x, y0=y0, y1=y1, xi=np.zeros(n), u=u,
        p_nominal=np.full(n, 0.5), p_true=p_true,
        gamma_true=np.array([implied]),
    )
    return dataset, ToyTruth(gamma=float(gamma), implied_gamma=float(implied), rows=rows)


def generate_synthetic(
    n: int,
    gamma_true,
    seed: int,
    beta0: np.ndarray | None = None,
) -> tuple[LoggedDataset, SyntheticTruth]:
    """Confounded log over 5 covariates with one tilt level per expert.

    Covariates are a two-component Gaussian mixture indexed by xi; risk under
    treatment adds a covariate-driven effect plus a mixture shift; a single
    noise draw is shared by both potential outcomes. Experts are assigned
    uniformly at random and each treats according to the tilted propensity
    at their own gamma.
    """
    gammas = np.asarray(gamma_true, dtype=float).ravel()
    if gammas.size < 1:
        raise ValueError("need at least one expert gamma")
    if np.any(gammas < 1.0) or not np.all(np.isfinite(gammas)):
        raise ValueError("expert gammas must be finite and >= 1")
    if n < 1:
        raise ValueError("need n >= 1")
    if beta0 is None:
        beta0 = np.zeros(COVARIATE_DIM)
    beta0 = np.asarray(beta0, dtype=float).ravel()
    if beta0.shape[0] != COVARIATE_DIM:
        raise ValueError(f"beta0 must have {COVARIATE_DIM} entries")

    rng = np.random.default_rng(seed)
    xi = (rng.random(n) < 0.5).astype(int)
    x = rng.normal(0.0, 1.0, size=(n, COVARIATE_DIM))
    x += (2.0 * xi - 1.0)[:, None] * XI_MEAN_SHIFT
    noise = rng.normal(0.0, 1.0, size=n)

    y0 = x @ beta0 + RISK_BASE + XI_RISK_SHIFT * xi + noise
    y1 = y0 + x @ TREAT_EFFECT + XI_TREAT_SHIFT * xi
    u = (y1 < y0).astype(int)

    p_nominal = expit(NOMINAL_COEF[0] + x @ NOMINAL_COEF[1:])
    experts = rng.integers(0, gammas.size, size=n)
    p_true = tilted_propensity(p_nominal, gammas[experts], u)
    t = (rng.random(n) < p_true).astype(int)
    y = np.where(t == 1, y1, y0)

    dataset = LoggedDataset(x, t, y, expert_ids=experts, m=2, K=gammas.size)
    truth = SyntheticTruth(
        covariates=x, y0=y0, y1=y1, xi=xi, u=u,
        p_nominal=p_nominal, p_true=p_true,
        gamma_true=gammas, expert_ids=experts,
    )
    return dataset, truth


def save_truth_csv(truth: SyntheticTruth, path) -> None:
    """Side-car ground-truth CSV: y0,y1,xi,u,pnominal,ptrue,h."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("y0,y1,xi,u,pnominal,ptrue,h\n")
        experts = truth.expert_ids
        for i in range(truth.n):
            h = int(experts[i]) if experts is not None else 0
            f.write(
                f"{truth.y0[i]!r},{truth.y1[i]!r},{int(truth.xi[i])},"
                f"{int(truth.u[i])},{truth.p_nominal[i]!r},{truth.p_true[i]!r},{h}\n"
            )


def _system_parts(system):
    policy = getattr(system, "policy", None)
    router = getattr(system, "router", None)
    if policy is not None:
        return policy, router
    if isinstance(system, tuple):
        return system
    if hasattr(system, "arm_probs"):
        return system, None  # bare policy: never defer
    raise TypeError("system must be a trained system, (policy, router), or a policy")


def _policy_value(policy, truth: SyntheticTruth) -> np.ndarray:
    probs = policy.arm_probs(truth.covariates)
    if probs.shape[1] != 2:
        raise ValueError("oracle evaluation stores two potential outcomes (m = 2)")
    return probs[:, 0] * truth.y0 + probs[:, 1] * truth.y1


def oracle_team_value(system, truth: SyntheticTruth, cost: CostModel,
                      deterministic: bool = True) -> float:
    """Ground-truth mean risk (plus human costs) of the routed system.

    Rows routed to a human use the expected risk under that human's true
    tilted behavior (the redraw expectation in closed form); rows kept by
    the algorithm use the policy-weighted potential outcomes.
    """
    policy, router = _system_parts(system)
    n = truth.n
    c = cost.per_row(n)
    algo_val = _policy_value(policy, truth)
    if router is None:
        return float(np.mean(algo_val))
    if deterministic:
        dest = hard_destinations(router, truth.covariates)
        if getattr(router, "personalized", False):
            human_val = np.where(
                dest >= 1,
                truth.expected_human_risk(np.maximum(dest - 1, 0)),
                0.0,
            )
        else:
            human_val = truth.expected_human_risk()
        routed = np.where(dest >= 1, human_val + c, algo_val)
        return float(np.mean(routed))
    if getattr(router, "personalized", False):
        dprobs = router.dest_probs(truth.covariates)
        val = dprobs[:, 0] * algo_val
        for h in range(dprobs.shape[1] - 1):
            val += dprobs[:, 1 + h] * (truth.expected_human_risk(np.full(n, h)) + c)
        return float(np.mean(val))
    phi = router.human_prob(truth.covariates)
    return float(np.mean(phi * (truth.expected_human_risk() + c) + (1 - phi) * algo_val))


def oracle_regret(system, truth: SyntheticTruth, baseline, cost: CostModel,
                  deterministic: bool = True) -> float:
    """Ground-truth regret of the routed system against a baseline policy.

    Requires a fresh draw with stored potential outcomes; negative values
    mean the deferral system truly improves on the baseline.
    """
    probs = baseline.arm_probs(truth.covariates)
    base_val = probs[:, 0] * truth.y0 + probs[:, 1] * truth.y1
    team = oracle_team_value(system, truth, cost, deterministic=deterministic)
    return team - float(np.mean(base_val))


@dataclass(frozen=True)
class RouteQuantities:
    """Truth-conditional quantities needed by the closed-form routing rule.

    The latent state s indexes whatever the humans can see that the
    algorithm cannot; rows hold P(state), P(treat | state), and the mean
    potential outcomes per state, alongside the covariates the policy sees.
    """

    covariates: np.ndarray  # (n, d)
    mix_probs: np.ndarray   # (n, S)
    p_treat: np.ndarray     # (n, S)
    y0_mean: np.ndarray     # (n, S)
    y1_mean: np.ndarray     # (n, S)


def toy_route_quantities(gamma: float, n: int = 1) -> RouteQuantities:
    ones = np.ones((n, 1))
    return RouteQuantities(
        covariates=np.zeros((n, 1)),
        mix_probs=np.hstack([0.5 * ones, 0.5 * ones]),
        p_treat=np.hstack([(0.5 - gamma) * ones, (0.5 + gamma) * ones]),
        y0_mean=np.hstack([-1.0 * ones, 0.0 * ones]),
        y1_mean=np.hstack([0.0 * ones, -2.0 * ones]),
    )


def synthetic_route_quantities(covariates: np.ndarray, gamma: float,
                               beta0: np.ndarray | None = None) -> RouteQuantities:
    """Routing quantities for the 5-covariate generator, mixing over xi.

    The confounder is a deterministic function of (x, xi), so conditioning
    on the latent mixture component is equivalent to conditioning on what
    the human sees.
    """
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    if beta0 is None:
        beta0 = np.zeros(COVARIATE_DIM)
    p_xi1 = expit(2.0 * (x @ XI_MEAN_SHIFT))
    mix = np.stack([1.0 - p_xi1, p_xi1], axis=1)
    p_nom = expit(NOMINAL_COEF[0] + x @ NOMINAL_COEF[1:])
    y0_s = np.stack([x @ beta0 + RISK_BASE, x @ beta0 + RISK_BASE + XI_RISK_SHIFT], axis=1)
    effect = np.stack([x @ TREAT_EFFECT, x @ TREAT_EFFECT + XI_TREAT_SHIFT], axis=1)
    u_s = (effect < 0).astype(float)
    p_treat = np.stack(
        [tilted_propensity(p_nom, gamma, u_s[:, 0]),
         tilted_propensity(p_nom, gamma, u_s[:, 1])], axis=1
    )
    return RouteQuantities(covariates=x, mix_probs=mix, p_treat=p_treat,
                           y0_mean=y0_s, y1_mean=y0_s + effect)


def oracle_route(quantities: RouteQuantities, policy, cost: CostModel) -> np.ndarray:
    """True-optimal routing: boolean per row, True = send to the human.

    Sends to the human exactly when the human's expected risk plus cost,
    under the true (confounder-aware) behavior, is below the policy's
    expected risk given only the covariates.
    """
    q = quantities
    n = q.mix_probs.shape[0]
    human_risk = np.sum(
        q.mix_probs * (q.p_treat * q.y1_mean + (1.0 - q.p_treat) * q.y0_mean), axis=1
    )
    human_side = human_risk + cost.per_row(n)
    y0_marg = np.sum(q.mix_probs * q.y0_mean, axis=1)
    y1_marg = np.sum(q.mix_probs * q.y1_mean, axis=1)
    probs = policy.arm_probs(q.covariates)
    algo_side = probs[:, 0] * y0_marg + probs[:, 1] * y1_marg
    return human_side < algo_side
