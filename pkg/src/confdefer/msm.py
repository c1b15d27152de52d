"""Marginal-sensitivity-model weight intervals and the exact inner maximum.

Under the sensitivity model, each row's true inverse propensity lies in an
interval around its nominal value; the worst case of any self-normalized
(ratio-of-sums) objective over that box is a linear fractional program whose
optimum sits at a corner with threshold structure: after sorting rows by
their coefficient r, some suffix takes the upper bound and the rest the
lower bound. ``solve_lfp`` scans all n+1 thresholds with prefix sums;
``solve_lfp_bruteforce`` enumerates corners and is the test oracle.
"""

from dataclasses import dataclass

import numpy as np

from .core import GammaSpec, _read_only

BRUTEFORCE_MAX_N = 20


@dataclass(frozen=True)
class WeightBounds:
    """Per-row interval [lower_i, upper_i] on inverse true propensities.

    Instances built by :func:`weight_bounds` always satisfy lower >= 1 (a
    nominal propensity in (0, 1] and gamma >= 1 guarantee it); the dataclass
    itself only requires 0 < lower <= upper so that rescaled boxes can be
    constructed in scale-invariance checks.
    """

    lower: np.ndarray
    upper: np.ndarray
    per_expert: bool = False

    def __post_init__(self):
        a = np.asarray(self.lower, dtype=float).ravel()
        b = np.asarray(self.upper, dtype=float).ravel()
        if a.shape != b.shape:
            raise ValueError("lower/upper must have identical shape")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("bounds must be finite")
        if np.any(a <= 0):
            raise ValueError("lower bounds must be positive")
        if np.any(a > b + 1e-12):
            raise ValueError("need lower <= upper for every row")
        object.__setattr__(self, "lower", _read_only(a))
        object.__setattr__(self, "upper", _read_only(b))

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def take(self, idx) -> "WeightBounds":
        return WeightBounds(self.lower[idx], self.upper[idx], per_expert=self.per_expert)


def weight_bounds(
    nominal: np.ndarray,
    gamma: GammaSpec | float,
    expert_ids: np.ndarray | None = None,
) -> WeightBounds:
    """Interval on inverse true propensities implied by sensitivity level gamma.

    ``nominal`` holds each row's nominal propensity of its observed arm,
    in (0, 1]. With wt = 1/nominal, the interval is
    [1 + (wt-1)/gamma, 1 + gamma*(wt-1)], using the row's expert-specific
    gamma when the spec is per-expert.
    """
    p = np.asarray(nominal, dtype=float).ravel()
    if np.any(p <= 0):
        raise ValueError("nominal propensities must be positive")
    if np.any(p > 1 + 1e-12):
        raise ValueError("nominal propensities must be <= 1")
    if not isinstance(gamma, GammaSpec):
        gamma = GammaSpec.scalar(float(gamma))
    if gamma.is_per_expert and expert_ids is None:
        raise ValueError("per-expert gamma requires expert ids")
    g = gamma.row_gammas(p.shape[0], expert_ids)
    excess = 1.0 / p - 1.0
    lower = 1.0 + excess / g
    upper = 1.0 + g * excess
    return WeightBounds(lower, upper, per_expert=gamma.is_per_expert)


@dataclass(frozen=True)
class LfpSolution:
    """Maximizer of sum(r*W)/sum(W) over a box.

    ``weights`` are in original row order; ``k_star`` is the 1-indexed
    threshold in the ascending-r order: sorted positions >= k_star take the
    upper bound, earlier positions the lower bound (k_star = n+1 means all
    lower).
    """

    weights: np.ndarray
    value: float
    k_star: int


def _lfp_core(r: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Sorted line search over all thresholds; returns (value, weights, k_star)."""
    n = r.shape[0]
    order = np.argsort(r, kind="stable")
    rs = r[order]
    asort = a[order]
    bsort = b[order]

    # prefix[k] sums the first k sorted rows; lambda(k) switches row k-1
    # (0-indexed) and onward to the upper bound.
    pa_num = np.concatenate([[0.0], np.cumsum(asort * rs)])
    pa_den = np.concatenate([[0.0], np.cumsum(asort)])
    pb_num = np.concatenate([[0.0], np.cumsum(bsort * rs)])
    pb_den = np.concatenate([[0.0], np.cumsum(bsort)])
    num = pa_num.copy()
    num[:-1] += pb_num[-1] - pb_num[:-1]  # entry j: threshold k = j+1
    den = pa_den.copy()
    den[:-1] += pb_den[-1] - pb_den[:-1]  # last entry (k = n+1): all lower
    lam = num / den

    j = int(np.argmax(lam))
    k_star = j + 1
    w_sorted = asort.copy()
    w_sorted[k_star - 1:] = bsort[k_star - 1:]
    weights = np.empty(n)
    weights[order] = w_sorted
    value = float(np.dot(weights, r) / weights.sum())
    return value, weights, k_star


def solve_lfp(r: np.ndarray, bounds: WeightBounds) -> LfpSolution:
    """Exact maximum of the weighted mean sum(r_i W_i)/sum(W_i) over the box.

    Sorts r ascending (stable, so ties keep original order) and evaluates
    every threshold value lambda(k) with prefix sums, returning the largest.
    O(n log n).
    """
    r = np.asarray(r, dtype=float).ravel()
    n = r.shape[0]
    if n < 1:
        raise ValueError("need at least one row")
    if n != bounds.n:
        raise ValueError(f"r has {n} rows but bounds have {bounds.n}")
    if not np.all(np.isfinite(r)):
        raise ValueError("r must be finite")
    value, weights, k_star = _lfp_core(r, bounds.lower, bounds.upper)
    return LfpSolution(weights=weights, value=value, k_star=k_star)


def solve_lfp_bruteforce(r: np.ndarray, bounds: WeightBounds) -> LfpSolution:
    """Corner enumeration oracle for :func:`solve_lfp`; test-scale only (n <= 20)."""
    r = np.asarray(r, dtype=float).ravel()
    n = r.shape[0]
    if n > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force capped at n={BRUTEFORCE_MAX_N}, got {n}")
    if n < 1:
        raise ValueError("need at least one row")
    if n != bounds.n:
        raise ValueError(f"r has {n} rows but bounds have {bounds.n}")

    a, b = bounds.lower, bounds.upper
    best_val = -np.inf
    best_w = None
    total = 1 << n
    chunk = 1 << 14
    bits = np.arange(n)
    for start in range(0, total, chunk):
        masks = np.arange(start, min(start + chunk, total), dtype=np.int64)
        choose_upper = (masks[:, None] >> bits) & 1
        w = np.where(choose_upper == 1, b, a)
        vals = (w @ r) / w.sum(axis=1)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val = float(vals[i])
            best_w = w[i].copy()
    order = np.argsort(r, kind="stable")
    upper_in_sorted = np.isclose(best_w[order], b[order]) & (b[order] > a[order])
    idx = np.nonzero(upper_in_sorted)[0]
    k_star = int(idx[0]) + 1 if idx.size else n + 1
    return LfpSolution(weights=best_w, value=best_val, k_star=k_star)
