"""Propensity scores, greedy 1-to-1 nearest-neighbour matching and covariate balance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

SCORE_TOL = 1e-8
MAX_ITER = 100
# |coefficient| beyond this is taken as divergence towards perfect separation
DIVERGENCE = 30.0
SMD_RULE = 0.1


class SeparationError(ValueError):
    pass


class RankDeficiencyError(ValueError):
    def __init__(self, columns: list[str]):
        super().__init__(f"design is rank deficient; collinear column(s): {', '.join(columns)}")
        self.columns = columns


@dataclass
class PropensityFit:
    coef: np.ndarray  # intercept first
    scores: np.ndarray
    n_iter: int
    converged: bool


def _check_rank(X: np.ndarray, columns: list[str]) -> None:
    D = np.column_stack([np.ones(X.shape[0]), X])
    bad = []
    rank = 1
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(D[:, : j + 2])
        if r == rank:
            bad.append(columns[j])
        rank = r
    if bad:
        raise RankDeficiencyError(bad)


def fit_propensity(X, t, columns: list[str] | None = None, ridge: float = 0.0) -> PropensityFit:
    """Logistic regression of t on [1, X] by iteratively reweighted least squares.

    Stops once the largest absolute score-vector entry is below ``SCORE_TOL``
    or after ``MAX_ITER`` iterations.  ``ridge`` adds ``ridge * |beta|^2 / 2``
    to the negative log-likelihood (intercept unpenalized), which keeps the
    fit finite under separation.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(t).ravel()
    if not np.all(np.isin(t, (0, 1))):
        raise ValueError("treatment must be coded 0/1")
    if t.sum() == 0 or t.sum() == t.size:
        raise ValueError("both treatment arms must be non-empty")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    columns = columns or [f"X{j + 1}" for j in range(X.shape[1])]
    if ridge == 0:
        _check_rank(X, columns)

    D = np.column_stack([np.ones(X.shape[0]), X])
    pen = np.full(D.shape[1], ridge)
    pen[0] = 0.0
    beta = np.zeros(D.shape[1])
    beta[0] = np.log(t.mean() / (1 - t.mean()))
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        p = expit(D @ beta)
        score = D.T @ (t - p) - pen * beta
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        w = p * (1 - p)
        info = (D * w[:, None]).T @ D + np.diag(pen)
        try:
            beta = beta + np.linalg.solve(info, score)
        except np.linalg.LinAlgError as e:
            raise SeparationError("information matrix became singular; rerun with a ridge penalty") from e
        if np.max(np.abs(beta)) > DIVERGENCE:
            raise SeparationError(
                "coefficients diverge, the arms look perfectly separated; rerun with a ridge penalty"
            )
    scores = expit(D @ beta)
    return PropensityFit(beta, scores, it, converged)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (treated index, control index)
    retained: np.ndarray  # boolean mask of matched units
    scores: np.ndarray
    balance: BalanceTable | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def nearest_neighbor_match(scores, t, caliper: float | None = None) -> MatchResult:
    """Greedy 1-to-1 matching without replacement.

    Treated units are taken in decreasing order of score (lower index first
    on ties); each takes the unmatched control with the closest score, the
    lower control index winning ties.  With a ``caliper`` a treated unit whose
    best control lies further away stays unmatched.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    t = np.asarray(t).ravel()
    if scores.size != t.size:
        raise ValueError("scores and treatment differ in length")
    if np.any((scores <= 0) | (scores >= 1)):
        raise ValueError("scores must lie strictly inside (0, 1)")
    treated = np.flatnonzero(t == 1)
    controls = np.flatnonzero(t == 0)
    if treated.size == 0 or controls.size == 0:
        raise ValueError("both treatment arms must be non-empty")

    ctrl_scores = scores[controls]
    free = np.ones(controls.size, dtype=bool)
    pairs = []
    for i in treated[np.lexsort((treated, -scores[treated]))]:
        if not free.any():
            break
        d = np.where(free, np.abs(ctrl_scores - scores[i]), np.inf)
        j = int(np.argmin(d))  # controls are in index order, so ties go to the lower index
        if caliper is not None and d[j] > caliper:
            continue
        pairs.append((int(i), int(controls[j])))
        free[j] = False

    retained = np.zeros(t.size, dtype=bool)
    for a, b in pairs:
        retained[a] = retained[b] = True
    return MatchResult(pairs, retained, scores)


@dataclass
class BalanceTable:
    columns: list[str]
    smd_before: np.ndarray
    smd_after: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def rows(self):
        for c, b, a, d in zip(self.columns, self.smd_before, self.smd_after, self.degenerate):
            yield {"covariate": c, "smd_before": b, "smd_after": a, "degenerate": bool(d)}

    def balanced(self, threshold: float = SMD_RULE) -> bool:
        return bool(np.all(np.abs(self.smd_after[~self.degenerate]) < threshold))


def _var(x: np.ndarray) -> float:
    return float(x.var(ddof=1)) if x.size > 1 else 0.0


def _smd(x, t, sel, sd):
    d = x[sel & (t == 1)].mean() - x[sel & (t == 0)].mean()
    if sd > 0:
        return d / sd, False
    return (0.0, False) if d == 0 else (np.nan, True)


def balance_table(X, t, match: MatchResult, columns: list[str] | None = None) -> BalanceTable:
    """Standardized mean differences before and after matching.

    The denominator is the pooled pre-match SD, sqrt((var_treated + var_control) / 2),
    and is kept fixed for the matched sample.  The propensity score is
    appended as a final row.  A zero denominator gives SMD 0 when the means
    agree and NaN with the degenerate flag otherwise.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(t).ravel()
    columns = list(columns or [f"X{j + 1}" for j in range(X.shape[1])]) + ["propensity"]
    M = np.column_stack([X, match.scores])
    everyone = np.ones(t.size, dtype=bool)
    before, after, degen = [], [], []
    for j in range(M.shape[1]):
        x = M[:, j]
        sd = np.sqrt(0.5 * (_var(x[t == 1]) + _var(x[t == 0])))
        b, db = _smd(x, t, everyone, sd)
        a, da = _smd(x, t, match.retained, sd) if match.pairs else (np.nan, False)
        before.append(b)
        after.append(a)
        degen.append(db or da)
    return BalanceTable(columns, np.array(before), np.array(after), np.array(degen))


def match_dataset(X, t, columns=None, ridge: float = 0.0, caliper: float | None = None) -> MatchResult:
    fit = fit_propensity(X, t, columns, ridge)
    res = nearest_neighbor_match(fit.scores, t, caliper)
    res.balance = balance_table(X, t, res, columns)
    return res
