"""Training loops: the confounding-robust deferral system and its baselines.

The robust trainers alternate an exact inner maximization (worst-case
weights at the current parameters, one sorted line search per arm) with one
gradient step on the policy and router at those fixed weights. Because the
alternation need not descend monotonically, the returned system is the
best evaluated iterate, and its certificates are recomputed from scratch at
the returned parameters.

Baselines: plug-in inverse-propensity policy training (ao), the same robust
machinery with the router frozen to never defer (confao), joint plug-in
policy+router training without self-normalization (hai), and the
human-only value.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import (
    BaselinePolicy,
    ConstantRouter,
    CostModel,
    LinearPolicy,
    LinearRouter,
    LoggedDataset,
)
from .msm import WeightBounds
from .objective import (
    WorstCaseKernel,
    personalized_worst_case_regret,
    personalized_worst_case_regret_vs_human,
    worst_case_regret,
    worst_case_regret_vs_human,
)
from .propensity import AssignmentModel, PropensityModel

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Raised when a training objective blows up; carries the trace so far."""

    def __init__(self, message: str, trace):
        self.trace = np.asarray(trace, dtype=float)
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every trainer; defaults favor determinism."""

    iterations: int = 2000
    learning_rate: float = 0.05
    optimizer: str = "adam"
    seed: int = 0
    init: str = "zeros"
    objective: str = "vs-baseline"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be > 0")
        if self.optimizer not in ("adam", "plain-gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("zeros", "gaussian"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.objective not in ("vs-baseline", "vs-human", "personalized"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class TrainedSystem:
    """Trained policy + router with the objective trace and final certificates."""

    policy: LinearPolicy
    router: object
    objective_trace: np.ndarray
    certificates: dict

    def to_json_dict(self) -> dict:
        router_weights = None
        if hasattr(self.router, "params"):
            router_weights = self.router.params.tolist()
        return {
            "policy_weights": self.policy.params.tolist(),
            "router_weights": router_weights,
            "objective_trace": self.objective_trace.tolist(),
            "certificates": self.certificates,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TrainedSystem":
        pw = np.asarray(payload["policy_weights"], dtype=float)
        policy = LinearPolicy(pw, m=pw.shape[0] + 1)
        rw = payload.get("router_weights")
        router = LinearRouter(np.asarray(rw, dtype=float)) if rw is not None else None
        return cls(
            policy=policy,
            router=router,
            objective_trace=np.asarray(payload["objective_trace"], dtype=float),
            certificates=dict(payload["certificates"]),
        )


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _PlainGd:
    def __init__(self, shape, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def _make_optimizer(config: TrainConfig, shape):
    if config.optimizer == "adam":
        return _Adam(shape, config.learning_rate)
    return _PlainGd(shape, config.learning_rate)


def _init_array(config: TrainConfig, rng, shape) -> np.ndarray:
    if config.init == "zeros":
        return np.zeros(shape)
    return rng.normal(0.0, 0.01, size=shape)


def _check_value(total: float, trace) -> None:
    if not np.isfinite(total) or total > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"training objective diverged (value {total!r} at iteration {len(trace)})",
            trace,
        )


def _check_params(trace, *arrays) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise DivergenceError(
                f"parameters diverged at iteration {len(trace)}", trace
            )


def _run_minimax(
    kind: str,
    dataset: LoggedDataset,
    bounds: WeightBounds,
    baseline,
    cost: CostModel,
    config: TrainConfig,
    router,
    assignment: AssignmentModel | None,
    train_router: bool,
):
    """Alternating loop shared by the robust trainers; returns best iterate."""
    rng = np.random.default_rng(config.seed)
    pol_params = _init_array(config, rng, (dataset.m - 1, dataset.d + 1))
    rt_params = _init_array(config, rng, router.params.shape) if train_router else None
    pol_opt = _make_optimizer(config, pol_params.shape)
    rt_opt = _make_optimizer(config, rt_params.shape) if train_router else None
    kernel = WorstCaseKernel(kind, dataset, baseline, cost, bounds, assignment)

    trace = []
    best_val = np.inf
    best_policy = pol_params
    best_router = rt_params
    for _ in range(config.iterations):
        _check_params(trace, pol_params, rt_params)
        policy = LinearPolicy(pol_params, m=dataset.m)
        if train_router:
            router = LinearRouter(rt_params)
        value, pol_grad, rt_grad = kernel.evaluate(policy, router, want_grad=True)
        _check_value(value.total, trace)
        trace.append(value.total)
        if value.total < best_val:
            best_val = value.total
            best_policy = pol_params
            best_router = rt_params
        pol_params = pol_opt.step(pol_params, pol_grad)
        if train_router:
            rt_params = rt_opt.step(rt_params, rt_grad)

    policy = LinearPolicy(best_policy, m=dataset.m)
    if train_router:
        router = LinearRouter(best_router)
    return policy, router, np.asarray(trace)


def train_confhai(
    dataset: LoggedDataset,
    bounds: WeightBounds,
    baseline: BaselinePolicy,
    cost: CostModel,
    config: TrainConfig = TrainConfig(),
) -> TrainedSystem:
    """Jointly train the policy and homogeneous router on the worst-case regret.

    The configured objective picks the comparison target: "vs-baseline"
    certifies improvement over ``baseline``, "vs-human" over the incumbent
    all-deferred system. Certificates for both targets are recomputed at the
    returned parameters.
    """
    if config.objective not in ("vs-baseline", "vs-human"):
        raise ValueError("train_confhai expects objective vs-baseline or vs-human")
    router = LinearRouter.zeros(dataset.d)
    policy, router, trace = _run_minimax(
        config.objective, dataset, bounds, baseline, cost, config, router,
        assignment=None, train_router=True,
    )
    certificates = {
        "vs_baseline": worst_case_regret(
            dataset, policy, router, baseline, cost, bounds).total,
        "vs_human": worst_case_regret_vs_human(
            dataset, policy, router, cost, bounds).total,
    }
    return TrainedSystem(policy, router, trace, certificates)


def train_confhai_personalized(
    dataset: LoggedDataset,
    bounds: WeightBounds,
    baseline: BaselinePolicy,
    cost: CostModel,
    assignment: AssignmentModel,
    config: TrainConfig = TrainConfig(objective="personalized"),
) -> TrainedSystem:
    """Train the policy and a per-expert router on the personalized objective."""
    if dataset.expert_ids is None:
        raise ValueError("personalized training needs expert ids")
    router = LinearRouter.zeros(dataset.d, n_experts=dataset.K)
    policy, router, trace = _run_minimax(
        "personalized", dataset, bounds, baseline, cost, config, router,
        assignment=assignment, train_router=True,
    )
    certificates = {
        "vs_baseline": personalized_worst_case_regret(
            dataset, policy, router, baseline, cost, bounds, assignment).total,
        "vs_human": personalized_worst_case_regret_vs_human(
            dataset, policy, router, cost, bounds, assignment).total,
    }
    return TrainedSystem(policy, router, trace, certificates)


def train_confao(
    dataset: LoggedDataset,
    bounds: WeightBounds,
    baseline: BaselinePolicy,
    config: TrainConfig = TrainConfig(),
) -> LinearPolicy:
    """Confounding-robust policy with no deferral: the router is frozen at
    never-defer, so only the policy is trained on the worst-case regret."""
    router = ConstantRouter(0.0)
    policy, _, _ = _run_minimax(
        "vs-baseline", dataset, bounds, baseline, CostModel(0.0), config, router,
        assignment=None, train_router=False,
    )
    return policy


class _PluginKernel:
    """Mean plug-in team objective (not self-normalized) and its gradients."""

    def __init__(self, dataset, cost, inv_prop):
        self.dataset = dataset
        self.n = dataset.n
        self.t = dataset.treatments
        self.y = dataset.risks.astype(float)
        self.z = dataset.design_matrix()
        self.yc = self.y + cost.per_row(self.n)
        self.wy = np.asarray(inv_prop, dtype=float) * self.y

    def evaluate(self, policy, router):
        n, t, y, z = self.n, self.t, self.y, self.z
        q = policy.arm_probs(self.dataset.covariates)
        pi_obs = q[np.arange(n), t]
        params = getattr(router, "params", None)
        if params is not None:
            phi = expit(z @ params)
        else:
            phi = router.human_prob(self.dataset.covariates)
        value = float(np.mean(phi * self.yc + (1.0 - phi) * pi_obs * self.wy))

        g = (1.0 - phi) * self.wy / n
        e_pol = -q * (g * pi_obs)[:, None]
        e_pol[np.arange(n), t] += g * pi_obs
        pol_grad = e_pol[:, 1:].T @ z

        u = (self.yc - pi_obs * self.wy) / n
        rt_grad = z.T @ (u * phi * (1.0 - phi)) if params is not None else None
        return value, pol_grad, rt_grad


def train_hai(
    dataset: LoggedDataset,
    propensity: PropensityModel,
    cost: CostModel,
    config: TrainConfig = TrainConfig(),
) -> TrainedSystem:
    """Plug-in deferral training that trusts the fitted propensity.

    Minimizes the mean of phi*(y+c) + (1-phi)*pi(t|x)/p_hat(t|x)*y jointly
    in policy and router; the weighted part is deliberately not
    self-normalized. Certificates are recomputed at the degenerate
    (gamma = 1) sensitivity box.
    """
    rng = np.random.default_rng(config.seed)
    pol_params = _init_array(config, rng, (dataset.m - 1, dataset.d + 1))
    rt_params = _init_array(config, rng, (dataset.d + 1,))
    pol_opt = _make_optimizer(config, pol_params.shape)
    rt_opt = _make_optimizer(config, rt_params.shape)
    inv_prop = 1.0 / propensity.observed_probs(dataset)
    kernel = _PluginKernel(dataset, cost, inv_prop)

    trace = []
    best_val = np.inf
    best_policy = pol_params
    best_router = rt_params
    for _ in range(config.iterations):
        _check_params(trace, pol_params, rt_params)
        value, pol_grad, rt_grad = kernel.evaluate(
            LinearPolicy(pol_params, m=dataset.m), LinearRouter(rt_params)
        )
        _check_value(value, trace)
        trace.append(value)
        if value < best_val:
            best_val = value
            best_policy = pol_params
            best_router = rt_params
        pol_params = pol_opt.step(pol_params, pol_grad)
        rt_params = rt_opt.step(rt_params, rt_grad)

    policy = LinearPolicy(best_policy, m=dataset.m)
    router = LinearRouter(best_router)
    nominal_box = WeightBounds(inv_prop, inv_prop)
    certificates = {
        "vs_baseline": worst_case_regret(
            dataset, policy, router, BaselinePolicy.never_treat(dataset.m),
            cost, nominal_box).total,
        "vs_human": worst_case_regret_vs_human(
            dataset, policy, router, cost, nominal_box).total,
    }
    return TrainedSystem(policy, router, np.asarray(trace), certificates)


def train_ao(
    dataset: LoggedDataset,
    propensity: PropensityModel,
    config: TrainConfig = TrainConfig(),
) -> LinearPolicy:
    """Plug-in inverse-propensity policy training with no deferral."""
    rng = np.random.default_rng(config.seed)
    pol_params = _init_array(config, rng, (dataset.m - 1, dataset.d + 1))
    pol_opt = _make_optimizer(config, pol_params.shape)
    router = ConstantRouter(0.0)
    inv_prop = 1.0 / propensity.observed_probs(dataset)
    kernel = _PluginKernel(dataset, CostModel(0.0), inv_prop)

    trace = []
    best_val = np.inf
    best_policy = pol_params
    for _ in range(config.iterations):
        _check_params(trace, pol_params)
        value, pol_grad, _ = kernel.evaluate(
            LinearPolicy(pol_params, m=dataset.m), router
        )
        _check_value(value, trace)
        trace.append(value)
        if value < best_val:
            best_val = value
            best_policy = pol_params
        pol_params = pol_opt.step(pol_params, pol_grad)
    return LinearPolicy(best_policy, m=dataset.m)


def evaluate_human_only(dataset: LoggedDataset, cost: CostModel) -> float:
    """Mean observed risk plus query cost: the value of deferring everything."""
    if dataset.n < 1:
        raise ValueError("cannot evaluate an empty dataset")
    return float(np.mean(dataset.risks + cost.per_row(dataset.n)))
