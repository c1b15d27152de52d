"""Domain types shared by every other module.

A :class:`LoggedDataset` holds the observational log (covariates, chosen
treatment, observed risk, optional expert id). Policies and routers are
linear-logit decision functions; validation is report-style so that raw CSV
loads can be inspected before they are used.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


def add_intercept(covariates: np.ndarray) -> np.ndarray:
    """Return the design matrix [1 | X]."""
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return np.hstack([np.ones((x.shape[0], 1)), x])


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _read_only(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LoggedDataset:
    """Observational log of (covariates, treatment, risk, optional expert id).

    Risks are real-valued, lower is better. Treatments are 0-indexed in
    {0,...,m-1}; expert ids, when present, are 0-indexed in {0,...,K-1}.
    Arrays are frozen after construction; semantic checks (ranges, finiteness,
    empty arms) live in :func:`validate`, not in the constructor, so malformed
    files can be loaded and then inspected.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    risks: np.ndarray
    expert_ids: np.ndarray | None = None
    m: int = 0
    K: int = 0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        t = np.asarray(self.treatments, dtype=int).ravel()
        y = np.asarray(self.risks, dtype=float).ravel()
        object.__setattr__(self, "covariates", _read_only(x))
        object.__setattr__(self, "treatments", _read_only(t))
        object.__setattr__(self, "risks", _read_only(y))
        if self.expert_ids is not None:
            h = np.asarray(self.expert_ids, dtype=int).ravel()
            object.__setattr__(self, "expert_ids", _read_only(h))
        if self.m <= 0:
            inferred = int(t.max()) + 1 if t.size else 0
            object.__setattr__(self, "m", max(inferred, 1))
        if self.K <= 0:
            if self.expert_ids is None:
                object.__setattr__(self, "K", 0)
            else:
                h = self.expert_ids
                object.__setattr__(self, "K", int(h.max()) + 1 if h.size else 1)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def design_matrix(self) -> np.ndarray:
        return add_intercept(self.covariates)

    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.treatments, minlength=self.m)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        if self.ok and not self.warnings:
            return "ok"
        lines = ["ok" if self.ok else "invalid"]
        lines += [f"violation: {v}" for v in self.violations]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def validate(dataset: LoggedDataset) -> ValidationReport:
    """Check dataset invariants; returns a report instead of raising.

    Violations make the report not-ok; empty treatment arms are only a
    warning because estimators skip them (an arm with no logged rows
    contributes zero to every per-arm sum).
    """
    violations: list[str] = []
    warnings: list[str] = []
    if dataset.n < 1:
        violations.append("dataset is empty (n = 0)")
    if dataset.d < 1:
        violations.append("covariate dimension d must be >= 1")
    if dataset.treatments.shape[0] != dataset.n:
        violations.append("treatments length does not match covariate rows")
    if dataset.risks.shape[0] != dataset.n:
        violations.append("risks length does not match covariate rows")
    if not np.all(np.isfinite(dataset.covariates)):
        violations.append("non-finite covariate values")
    if not np.all(np.isfinite(dataset.risks)):
        violations.append("non-finite risk values")
    t = dataset.treatments
    if t.size and (t.min() < 0 or t.max() >= dataset.m):
        violations.append(
            f"treatment out of range: values must lie in [0, {dataset.m})"
        )
    if dataset.expert_ids is not None:
        h = dataset.expert_ids
        if h.shape[0] != dataset.n:
            violations.append("expert_ids length does not match covariate rows")
        if h.size and (h.min() < 0 or h.max() >= dataset.K):
            violations.append(
                f"expert id out of range: values must lie in [0, {dataset.K})"
            )
    if not violations and dataset.n:
        counts = dataset.arm_counts()
        for arm, c in enumerate(counts):
            if c == 0:
                warnings.append(f"empty treatment arm {arm}")
        if dataset.expert_ids is not None:
            hcounts = np.bincount(dataset.expert_ids, minlength=dataset.K)
            for k, c in enumerate(hcounts):
                if c == 0:
                    warnings.append(f"empty expert {k}")
    return ValidationReport(ok=not violations, violations=violations, warnings=warnings)


@dataclass(frozen=True)
class GammaSpec:
    """Sensitivity level(s) for the marginal sensitivity model.

    Either a single scalar gamma >= 1 applied to every row, or one gamma per
    expert (requires expert ids on the dataset).
    """

    value: float | None = None
    per_expert: np.ndarray | None = None

    def __post_init__(self):
        if (self.value is None) == (self.per_expert is None):
            raise ValueError("GammaSpec takes exactly one of value / per_expert")
        if self.value is not None:
            v = float(self.value)
            if not np.isfinite(v) or v < 1.0:
                raise ValueError(f"gamma must be finite and >= 1, got {v}")
            object.__setattr__(self, "value", v)
        else:
            g = np.asarray(self.per_expert, dtype=float).ravel()
            if g.size < 1:
                raise ValueError("per-expert gamma list must be nonempty")
            if not np.all(np.isfinite(g)) or np.any(g < 1.0):
                raise ValueError("per-expert gammas must be finite and >= 1")
            object.__setattr__(self, "per_expert", _read_only(g))

    @classmethod
    def scalar(cls, gamma: float) -> "GammaSpec":
        return cls(value=gamma)

    @classmethod
    def per_expert_levels(cls, gammas) -> "GammaSpec":
        return cls(per_expert=np.asarray(gammas, dtype=float))

    @property
    def is_per_expert(self) -> bool:
        return self.per_expert is not None

    def row_gammas(self, n: int, expert_ids: np.ndarray | None) -> np.ndarray:
        if not self.is_per_expert:
            return np.full(n, self.value)
        if expert_ids is None:
            raise ValueError("per-expert gamma requires expert ids")
        return self.per_expert[np.asarray(expert_ids, dtype=int)]


@dataclass(frozen=True)
class CostModel:
    """Per-query human cost: a constant (default 0) or per-row values, all >= 0."""

    constant: float = 0.0
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.values is not None:
            v = np.asarray(self.values, dtype=float).ravel()
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError("per-row costs must be finite and >= 0")
            object.__setattr__(self, "values", _read_only(v))
        else:
            c = float(self.constant)
            if not np.isfinite(c) or c < 0:
                raise ValueError(f"cost must be finite and >= 0, got {c}")

    def per_row(self, n: int) -> np.ndarray:
        if self.values is None:
            return np.full(n, float(self.constant))
        if self.values.shape[0] != n:
            raise ValueError(
                f"per-row costs have length {self.values.shape[0]}, expected {n}"
            )
        return self.values


class LinearPolicy:
    """Linear-logit treatment policy over m arms.

    Parameters are stored as an (m-1, d+1) matrix (intercept column first);
    arm 0's logit is pinned to 0, which removes the redundant softmax
    direction. For m = 2 this is a single weight vector with sigmoid
    semantics: P(arm 1 | x) = sigmoid(w . [1, x]).
    """

    def __init__(self, params: np.ndarray, m: int = 2):
        p = np.asarray(params, dtype=float)
        if p.ndim == 1:
            p = p[None, :]
        if m < 2:
            raise ValueError("policy needs at least 2 arms")
        if p.shape[0] != m - 1:
            raise ValueError(f"params must have {m - 1} rows for m={m}, got {p.shape[0]}")
        if not np.all(np.isfinite(p)):
            raise ValueError("policy parameters must be finite")
        self.params = _read_only(p.copy())
        self.m = m

    @classmethod
    def zeros(cls, d: int, m: int = 2) -> "LinearPolicy":
        return cls(np.zeros((m - 1, d + 1)), m=m)

    @property
    def sigmoid_weights(self) -> np.ndarray:
        if self.m != 2:
            raise ValueError("sigmoid weights only defined for binary policies")
        return self.params[0]

    def arm_probs(self, covariates: np.ndarray) -> np.ndarray:
        """Probability of each arm for every input row, shape (n, m)."""
        z = add_intercept(covariates)
        logits = np.hstack([np.zeros((z.shape[0], 1)), z @ self.params.T])
        return softmax_rows(logits)

    def copy(self) -> "LinearPolicy":
        return LinearPolicy(self.params, m=self.m)


class LinearRouter:
    """Linear-logit routing function.

    Homogeneous mode (1-D params): sigmoid probability of routing to the
    human pool. Personalized mode ((K, d+1) params): softmax over K+1
    destinations, index 0 = algorithm (logit pinned to 0), index 1+h =
    expert h.
    """

    def __init__(self, params: np.ndarray):
        p = np.asarray(params, dtype=float)
        if not np.all(np.isfinite(p)):
            raise ValueError("router parameters must be finite")
        if p.ndim not in (1, 2):
            raise ValueError("router params must be a vector or a (K, d+1) matrix")
        self.params = _read_only(p.copy())

    @classmethod
    def zeros(cls, d: int, n_experts: int = 0) -> "LinearRouter":
        if n_experts == 0:
            return cls(np.zeros(d + 1))
        return cls(np.zeros((n_experts, d + 1)))

    @property
    def personalized(self) -> bool:
        return self.params.ndim == 2

    @property
    def n_experts(self) -> int:
        return self.params.shape[0] if self.personalized else 0

    def human_prob(self, covariates: np.ndarray) -> np.ndarray:
        """Total probability of routing to humans, shape (n,)."""
        if self.personalized:
            return 1.0 - self.dest_probs(covariates)[:, 0]
        z = add_intercept(covariates)
        return expit(z @ self.params)

    def dest_probs(self, covariates: np.ndarray) -> np.ndarray:
        """Destination distribution, shape (n, K+1); column 0 is the algorithm."""
        if not self.personalized:
            raise ValueError("destination probabilities need a personalized router")
        z = add_intercept(covariates)
        logits = np.hstack([np.zeros((z.shape[0], 1)), z @ self.params.T])
        return softmax_rows(logits)

    def copy(self) -> "LinearRouter":
        return LinearRouter(self.params)


class ConstantRouter:
    """Router with input-independent routing probabilities.

    A scalar p gives homogeneous routing with P(human) = p; a vector over
    K+1 destinations gives a constant personalized distribution.
    """

    def __init__(self, value):
        v = np.asarray(value, dtype=float)
        if v.ndim == 0:
            p = float(v)
            if not 0.0 <= p <= 1.0:
                raise ValueError("routing probability must lie in [0, 1]")
            self._p = p
            self._dist = None
        else:
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ValueError("destination distribution must be a probability vector")
            self._p = None
            self._dist = v

    @property
    def personalized(self) -> bool:
        return self._dist is not None

    @property
    def n_experts(self) -> int:
        return self._dist.shape[0] - 1 if self.personalized else 0

    def human_prob(self, covariates: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(covariates).shape[0]
        if self.personalized:
            return np.full(n, 1.0 - self._dist[0])
        return np.full(n, self._p)

    def dest_probs(self, covariates: np.ndarray) -> np.ndarray:
        if not self.personalized:
            raise ValueError("destination probabilities need a personalized router")
        n = np.atleast_2d(covariates).shape[0]
        return np.tile(self._dist, (n, 1))


class BaselinePolicy:
    """Comparison policy: a fixed deterministic arm or a wrapped linear policy."""

    def __init__(self, arm: int | None = None, policy: LinearPolicy | None = None, m: int = 2):
        if (arm is None) == (policy is None):
            raise ValueError("BaselinePolicy takes exactly one of arm / policy")
        if arm is not None and not 0 <= arm < m:
            raise ValueError(f"fixed arm {arm} out of range for m={m}")
        self.arm = arm
        self.policy = policy
        self.m = policy.m if policy is not None else m

    @classmethod
    def never_treat(cls, m: int = 2) -> "BaselinePolicy":
        return cls(arm=0, m=m)

    def arm_probs(self, covariates: np.ndarray) -> np.ndarray:
        if self.policy is not None:
            return self.policy.arm_probs(covariates)
        n = np.atleast_2d(covariates).shape[0]
        probs = np.zeros((n, self.m))
        probs[:, self.arm] = 1.0
        return probs


def save_dataset_csv(dataset: LoggedDataset, path) -> None:
    """Write the log in the canonical CSV schema x0,...,x{d-1},t,y[,h]."""
    cols = [f"x{j}" for j in range(dataset.d)] + ["t", "y"]
    if dataset.expert_ids is not None:
        cols.append("h")
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for i in range(dataset.n):
            parts = [repr(float(v)) for v in dataset.covariates[i]]
            parts.append(str(int(dataset.treatments[i])))
            parts.append(repr(float(dataset.risks[i])))
            if dataset.expert_ids is not None:
                parts.append(str(int(dataset.expert_ids[i])))
            f.write(",".join(parts) + "\n")


def load_dataset_csv(path, m: int = 0, n_experts: int = 0) -> LoggedDataset:
    """Read a dataset from the canonical CSV schema.

    The header must be exactly x0,...,x{d-1},t,y and optionally a trailing h
    column; a missing h column means homogeneous-expert mode. Arm and expert
    counts are inferred from the data unless given explicitly.
    """
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        names = [c.strip() for c in header.split(",")]
        has_experts = names[-1] == "h"
        feat_names = names[:-3] if has_experts else names[:-2]
        expected = [f"x{j}" for j in range(len(feat_names))]
        tail = ["t", "y", "h"] if has_experts else ["t", "y"]
        if feat_names != expected or names[len(feat_names):] != tail:
            raise ValueError(
                f"CSV header must be x0,...,x{{d-1}},t,y[,h]; got {header!r}"
            )
        d = len(feat_names)
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise ValueError(f"line {lineno}: expected {len(names)} fields")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError("CSV contains a header but no data rows")
    data = np.asarray(rows, dtype=float)
    x = data[:, :d]
    t = data[:, d].astype(int)
    y = data[:, d + 1]
    h = data[:, d + 2].astype(int) if has_experts else None
    return LoggedDataset(x, t, y, expert_ids=h, m=m, K=n_experts)
