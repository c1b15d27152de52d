"""Nominal propensity and expert-assignment models fitted from the log.

Both models are multinomial-logistic fits trained by deterministic
full-batch gradient descent with backtracking line search (covariates are
standardized internally and coefficients mapped back, so fits are affine
invariant when unregularized). Predictions are clipped into [eps, 1-eps]
and renormalized, which keeps every inverse weight finite.

``calibrate_gamma`` produces a data-driven reference point for the
sensitivity level by measuring how much dropping a covariate group moves
the fitted propensity odds.
"""

import numpy as np

from .core import LoggedDataset, add_intercept, validate

MAX_ITER = 5000
GRAD_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """Raised when the logistic fit does not reach the gradient tolerance."""

    def __init__(self, grad_norm: float, iterations: int):
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(
            f"logistic fit did not converge after {iterations} iterations "
            f"(gradient norm {grad_norm:.3e} > {GRAD_TOL:.0e})"
        )


def clip_probs(probs: np.ndarray, eps: float) -> np.ndarray:
    """Project row distributions into the box [eps, 1-eps], keeping row sums 1.

    Entries are pinned to the floor/cap and the remaining mass is shared
    proportionally among the free entries (exact water-filling, at most a
    few passes).
    """
    p = np.asarray(probs, dtype=float)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    n, c = p.shape
    if not 0.0 < eps < 0.5:
        raise ValueError(f"clipping floor must lie in (0, 0.5), got {eps}")
    if c == 1:
        out = np.ones_like(p)  # a single class always has probability 1
        return out[0] if squeeze else out
    if c * eps > 1.0 + 1e-12:
        raise ValueError(f"floor {eps} infeasible for {c} classes")
    lo, hi = eps, 1.0 - eps
    base = np.maximum(p, 1e-300)
    pin_lo = np.zeros((n, c), dtype=bool)
    pin_hi = np.zeros((n, c), dtype=bool)
    scale = np.ones(n)
    for _ in range(2 * c + 2):
        free = ~(pin_lo | pin_hi)
        mass = 1.0 - lo * pin_lo.sum(axis=1) - hi * pin_hi.sum(axis=1)
        free_sum = np.where(free, base, 0.0).sum(axis=1)
        scale = np.divide(mass, free_sum, out=np.zeros(n), where=free_sum > 0)
        scaled = base * scale[:, None]
        new_lo = free & (scaled < lo * (1.0 - 1e-12))
        if new_lo.any():
            pin_lo |= new_lo
            continue
        new_hi = free & (scaled > hi * (1.0 + 1e-12))
        if new_hi.any():
            pin_hi |= new_hi
            continue
        break
    out = np.where(pin_lo, lo, np.where(pin_hi, hi, base * scale[:, None]))
    return out[0] if squeeze else out


def _fit_multinomial(
    covariates: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    regularization: float,
    max_iter: int = MAX_ITER,
    tol: float = GRAD_TOL,
):
    """L2-regularized multinomial-logistic MLE; class 0's logit is pinned to 0.

    Returns (coef on original features, mean training log-loss, iterations).
    The loss is the mean negative log-likelihood plus reg/2 * ||slopes||^2 on
    standardized features (intercepts unpenalized).
    """
    x = np.asarray(covariates, dtype=float)
    y = np.asarray(labels, dtype=int).ravel()
    n = x.shape[0]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z = add_intercept((x - mu) / sd)
    p = z.shape[1]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    pen = np.ones((n_classes - 1, p))
    pen[:, 0] = 0.0

    def value(w):
        logits = np.hstack([np.zeros((n, 1)), z @ w.T])
        lmax = logits.max(axis=1, keepdims=True)
        lse = (lmax + np.log(np.exp(logits - lmax).sum(axis=1, keepdims=True)))[:, 0]
        nll = (lse - logits[np.arange(n), y]).mean()
        return nll + 0.5 * regularization * np.sum((w * pen) ** 2), lse, logits

    def grad(w, lse, logits):
        probs = np.exp(logits - lse[:, None])
        return (probs - onehot)[:, 1:].T @ z / n + regularization * w * pen

    w = np.zeros((n_classes - 1, p))
    f, lse, logits = value(w)
    g = grad(w, lse, logits)
    step = 1.0
    stalled = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        gsq = float(np.sum(g * g))
        if np.sqrt(gsq) <= tol:
            iterations -= 1
            break
        step = min(step * 2.0, 1e6)
        while True:
            w_new = w - step * g
            f_new, lse_new, logits_new = value(w_new)
            if f_new <= f - 1e-4 * step * gsq:
                break
            step *= 0.5
            if step < 1e-20:
                stalled = True
                break
        if stalled:
            break
        w, f = w_new, f_new
        g = grad(w, lse_new, logits_new)

    grad_norm = float(np.linalg.norm(g))
    if grad_norm > tol:
        raise ConvergenceError(grad_norm, iterations)

    slopes = w[:, 1:] / sd
    intercepts = w[:, 0] - slopes @ mu
    coef = np.hstack([intercepts[:, None], slopes])
    train_log_loss = float(f - 0.5 * regularization * np.sum((w * pen) ** 2))
    return coef, train_log_loss, iterations


class PropensityModel:
    """Fitted nominal propensity over m treatment arms.

    ``coef`` has shape (m-1, d+1) on the original feature scale, intercept
    first, arm 0's logit pinned to 0. Predictions are clipped into
    [epsilon, 1-epsilon] and renormalized.
    """

    def __init__(self, coef: np.ndarray, m: int, epsilon: float,
                 train_log_loss: float = float("nan"), iterations: int = 0):
        coef = np.atleast_2d(np.asarray(coef, dtype=float))
        if coef.shape[0] != m - 1:
            raise ValueError(f"coef needs {m - 1} rows for m={m}")
        if not 0.0 < epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        self.coef = coef
        self.m = m
        self.epsilon = float(epsilon)
        self.train_log_loss = train_log_loss
        self.iterations = iterations

    def predict_proba(self, covariates: np.ndarray) -> np.ndarray:
        z = add_intercept(covariates)
        logits = np.hstack([np.zeros((z.shape[0], 1)), z @ self.coef.T])
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return clip_probs(e / e.sum(axis=1, keepdims=True), self.epsilon)

    def observed_probs(self, dataset: LoggedDataset) -> np.ndarray:
        """Clipped propensity of each row's logged arm."""
        probs = self.predict_proba(dataset.covariates)
        return probs[np.arange(dataset.n), dataset.treatments]


class AssignmentModel:
    """Distribution over experts that generated the logged assignments.

    Empirical mode stores per-expert frequencies (constant in x); logistic
    mode wraps a multinomial fit. Either way predictions are clipped into
    [epsilon, 1-epsilon].
    """

    def __init__(self, n_experts: int, epsilon: float,
                 frequencies: np.ndarray | None = None,
                 coef: np.ndarray | None = None):
        if (frequencies is None) == (coef is None):
            raise ValueError("AssignmentModel takes exactly one of frequencies / coef")
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.n_experts = n_experts
        self.epsilon = float(epsilon)
        if frequencies is not None:
            freq = np.asarray(frequencies, dtype=float).ravel()
            if freq.shape[0] != n_experts:
                raise ValueError("frequency vector length must equal expert count")
            self.frequencies = clip_probs(freq / freq.sum(), self.epsilon)
            self.coef = None
        else:
            self.frequencies = None
            self.coef = np.atleast_2d(np.asarray(coef, dtype=float))

    def expert_probs(self, covariates: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(covariates).shape[0]
        if self.frequencies is not None:
            return np.tile(self.frequencies, (n, 1))
        z = add_intercept(covariates)
        logits = np.hstack([np.zeros((n, 1)), z @ self.coef.T])
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return clip_probs(e / e.sum(axis=1, keepdims=True), self.epsilon)

    def row_probs(self, dataset: LoggedDataset) -> np.ndarray:
        """d0(h_i | x_i): probability of each row's logged expert."""
        if dataset.expert_ids is None:
            raise ValueError("dataset has no expert ids")
        probs = self.expert_probs(dataset.covariates)
        return probs[np.arange(dataset.n), dataset.expert_ids]


def fit_nominal_propensity(
    dataset: LoggedDataset,
    regularization: float = 1e-3,
    epsilon: float = 0.01,
) -> PropensityModel:
    """Fit the nominal propensity by regularized multinomial logistic regression.

    Deterministic given data and settings. The training log-loss can never
    exceed log(m): optimization starts at the uniform model and only
    descends. Raises :class:`ConvergenceError` if the gradient-norm stop is
    not reached within the iteration cap.
    """
    report = validate(dataset)
    if not report.ok:
        raise ValueError(f"invalid dataset: {report.violations}")
    counts = dataset.arm_counts()
    if np.any(counts == 0):
        empty = np.nonzero(counts == 0)[0].tolist()
        raise ValueError(f"cannot fit propensity with empty treatment arms {empty}")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    coef, log_loss, iters = _fit_multinomial(
        dataset.covariates, dataset.treatments, dataset.m, regularization
    )
    return PropensityModel(coef, dataset.m, epsilon,
                           train_log_loss=log_loss, iterations=iters)


def fit_assignment(
    dataset: LoggedDataset,
    mode: str = "empirical",
    regularization: float = 1e-3,
    epsilon: float = 0.01,
) -> AssignmentModel:
    """Fit the expert-assignment distribution from the log.

    mode="empirical" uses per-expert frequencies (the default: logs where
    experts are queried at random); mode="logistic" fits a multinomial
    model on the covariates.
    """
    if dataset.expert_ids is None:
        raise ValueError("dataset has no expert ids")
    counts = np.bincount(dataset.expert_ids, minlength=dataset.K)
    if np.any(counts == 0):
        empty = np.nonzero(counts == 0)[0].tolist()
        raise ValueError(f"cannot fit assignment with empty experts {empty}")
    if mode == "empirical":
        return AssignmentModel(dataset.K, epsilon, frequencies=counts.astype(float))
    if mode == "logistic":
        if dataset.K == 1:
            return AssignmentModel(dataset.K, epsilon, frequencies=np.ones(1))
        coef, _, _ = _fit_multinomial(
            dataset.covariates, dataset.expert_ids, dataset.K, regularization
        )
        return AssignmentModel(dataset.K, epsilon, coef=coef)
    raise ValueError(f"unknown assignment mode {mode!r}")


def _all_clipped(observed: np.ndarray, eps: float) -> bool:
    at_floor = np.abs(observed - eps) <= 1e-12
    at_cap = np.abs(observed - (1.0 - eps)) <= 1e-12
    return bool(np.all(at_floor | at_cap))


def calibrate_gamma_report(
    dataset: LoggedDataset,
    z_columns,
    quantile: float = 0.95,
    regularization: float = 1e-3,
    epsilon: float = 0.01,
) -> dict:
    """Reference sensitivity level from the impact of observed covariates.

    Fits the propensity twice (all covariates, and with the ``z_columns``
    group removed) and computes each row's odds ratio between the two fits
    at the logged arm. The report holds the chosen quantile of
    max(ratio, 1/ratio) plus a per-row summary.
    """
    z_cols = sorted(set(int(c) for c in z_columns))
    if not z_cols:
        raise ValueError("z_columns must be nonempty")
    if any(c < 0 or c >= dataset.d for c in z_cols):
        raise ValueError(f"z_columns out of range for d={dataset.d}")
    if len(z_cols) >= dataset.d:
        raise ValueError("z_columns must be a strict subset of the covariates")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")

    full = fit_nominal_propensity(dataset, regularization, epsilon)
    keep = [j for j in range(dataset.d) if j not in z_cols]
    reduced_data = LoggedDataset(
        dataset.covariates[:, keep], dataset.treatments, dataset.risks,
        expert_ids=dataset.expert_ids, m=dataset.m, K=dataset.K,
    )
    reduced = fit_nominal_propensity(reduced_data, regularization, epsilon)

    p_full = full.observed_probs(dataset)
    p_red = reduced.observed_probs(reduced_data)
    if _all_clipped(p_full, epsilon) or _all_clipped(p_red, epsilon):
        raise RuntimeError("degenerate propensity fit: all predictions clipped")

    ratio = ((1.0 - p_red) * p_full) / (p_red * (1.0 - p_full))
    sym = np.maximum(ratio, 1.0 / ratio)
    gamma_ref = float(max(np.quantile(sym, quantile), 1.0))
    return {
        "gamma_ref": gamma_ref,
        "quantile": quantile,
        "per_row_ratio_summary": {
            "min": float(sym.min()),
            "median": float(np.median(sym)),
            "max": float(sym.max()),
        },
    }


def calibrate_gamma(
    dataset: LoggedDataset,
    z_columns,
    quantile: float = 0.95,
    regularization: float = 1e-3,
    epsilon: float = 0.01,
) -> float:
    """Reference gamma (always >= 1); see :func:`calibrate_gamma_report`."""
    return calibrate_gamma_report(
        dataset, z_columns, quantile, regularization, epsilon
    )["gamma_ref"]
