"""Posterior partition summaries: similarity matrix, loss-based point estimate, ARI."""

from __future__ import annotations

from pathlib import Path

import numpy as np

LOSSES = ("binder", "vi")
# below this many units the point estimate is found by enumerating all set partitions
EXHAUSTIVE_MAX_N = 8
_TIE_TOL = 1e-9


class Partition:
    """Cluster labels for n units; equality is equality of the co-clustering relation."""

    def __init__(self, labels):
        self.labels = np.asarray(labels).ravel()

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n_clusters(self) -> int:
        return np.unique(self.labels).size

    def canonical(self) -> np.ndarray:
        return canonical_labels(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Partition):
            other = Partition(other)
        return self.n == other.n and np.array_equal(self.canonical(), other.canonical())

    def __repr__(self) -> str:
        return f"Partition(n={self.n}, clusters={self.n_clusters})"


def _labels(p) -> np.ndarray:
    return p.labels if isinstance(p, Partition) else np.asarray(p).ravel()


def canonical_labels(labels) -> np.ndarray:
    """Relabel to 0..K-1 in order of first appearance."""
    labels = _labels(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv.ravel()]


def build_psm(draws) -> np.ndarray:
    """Posterior similarity matrix from an (R, n) array of allocations.

    Each draw is one-hot encoded on its occupied labels only, so the cost is
    one (n x sum_r K_r) product.
    """
    draws = np.asarray(draws)
    if draws.ndim != 2 or draws.shape[0] == 0:
        raise ValueError("need at least one draw of shape (R, n)")
    R, n = draws.shape
    blocks = []
    for s in draws:
        _, inv = np.unique(s, return_inverse=True)
        k = inv.max() + 1
        onehot = np.zeros((n, k), dtype=np.float32)
        onehot[np.arange(n), inv.ravel()] = 1.0
        blocks.append(onehot)
    B = np.hstack(blocks)
    psm = (B @ B.T).astype(float) / R
    np.fill_diagonal(psm, 1.0)
    return psm


def _onehot(labels: np.ndarray) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    inv = inv.ravel()
    M = np.zeros((labels.size, inv.max() + 1))
    M[np.arange(labels.size), inv] = 1.0
    return M


def expected_binder(labels, psm: np.ndarray) -> float:
    """Posterior expected Binder loss, sum over pairs i<j of |1[c_i = c_j] - psm_ij|."""
    M = _onehot(_labels(labels))
    n = M.shape[0]
    within = float(np.sum(M * (psm @ M)))  # sum_{i,j same} psm_ij, diagonal included
    sizes = M.sum(axis=0)
    same_pairs = 0.5 * (float(np.sum(sizes**2)) - n)
    psm_pairs = 0.5 * (float(psm.sum()) - float(np.trace(psm)))
    within_pairs = 0.5 * (within - float(np.trace(psm)))
    return psm_pairs + same_pairs - 2.0 * within_pairs


def expected_vi_lb(labels, psm: np.ndarray) -> float:
    """Lower bound to the posterior expected variation of information (base-2 logs)."""
    labels = _labels(labels)
    M = _onehot(labels)
    A = psm @ M
    own = np.sum(M * A, axis=1)
    size = M @ M.sum(axis=0)
    return float(np.mean(np.log2(size) + np.log2(psm.sum(axis=1)) - 2.0 * np.log2(own)))


def expected_loss(labels, psm: np.ndarray, loss: str = "vi") -> float:
    if loss == "binder":
        return expected_binder(labels, psm)
    if loss == "vi":
        return expected_vi_lb(labels, psm)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def set_partitions(n: int):
    """All set partitions of n items as restricted-growth label tuples, lexicographic order."""
    if n == 0:
        yield ()
        return

    def rec(prefix: list[int], k: int):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for c in range(k + 1):
            prefix.append(c)
            yield from rec(prefix, max(k, c + 1))
            prefix.pop()

    yield from rec([0], 1)


def _argmin_lex(cands: list[np.ndarray], losses: np.ndarray) -> np.ndarray:
    best = losses.min()
    tied = [tuple(c) for c, v in zip(cands, losses) if v <= best + _TIE_TOL]
    return np.array(min(tied))


def _unique_candidates(draws: np.ndarray) -> np.ndarray:
    canon = np.array([canonical_labels(d) for d in draws])
    return np.unique(canon, axis=0)


def _greedy_merge(labels: np.ndarray, psm: np.ndarray, loss: str) -> tuple[np.ndarray, float]:
    """Merge cluster pairs while the expected loss decreases."""
    cur = canonical_labels(labels)
    cur_loss = expected_loss(cur, psm, loss)
    while True:
        K = cur.max() + 1
        best, best_loss = None, cur_loss
        for a in range(K):
            for b in range(a + 1, K):
                cand = canonical_labels(np.where(cur == b, a, cur))
                v = expected_loss(cand, psm, loss)
                if v < best_loss - _TIE_TOL:
                    best, best_loss = cand, v
        if best is None:
            return cur, cur_loss
        cur, cur_loss = best, best_loss


def point_estimate_partition(psm: np.ndarray, candidates=None, loss: str = "vi") -> Partition:
    """Partition minimizing the posterior expected loss.

    Up to ``EXHAUSTIVE_MAX_N`` units every set partition is scored.  Otherwise
    the search covers the distinct candidate draws plus greedy pairwise merges
    of the best one.  Ties go to the lexicographically smallest canonical
    labelling.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    psm = np.asarray(psm, dtype=float)
    n = psm.shape[0]
    if n <= EXHAUSTIVE_MAX_N:
        cands = [np.array(c) for c in set_partitions(n)]
        losses = np.array([expected_loss(c, psm, loss) for c in cands])
        return Partition(_argmin_lex(cands, losses) + 1)

    if candidates is None or len(candidates) == 0:
        raise ValueError("candidate draws must be non-empty")
    cands = list(_unique_candidates(np.asarray(candidates)))
    losses = np.array([expected_loss(c, psm, loss) for c in cands])
    start = _argmin_lex(cands, losses)
    merged, _ = _greedy_merge(start, psm, loss)
    return Partition(canonical_labels(merged) + 1)


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def contingency_table(a, b) -> np.ndarray:
    a, b = _labels(a), _labels(b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia.ravel(), ib.ravel()), 1)
    return table


def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index.

    Reported raw, so it can fall below zero.  When the expected and maximum
    index coincide (both partitions trivial in the same way) the partitions
    are identical and 1.0 is returned.
    """
    a, b = _labels(a), _labels(b)
    if a.size != b.size:
        raise ValueError(f"partitions have different sizes: {a.size} vs {b.size}")
    n = a.size
    table = contingency_table(a, b)
    index = int(_comb2(table).sum())
    sa = int(_comb2(table.sum(axis=1)).sum())
    sb = int(_comb2(table.sum(axis=0)).sum())
    total = n * (n - 1) // 2
    if total == 0:
        return 1.0
    expected = sa * sb / total
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def write_partition(path, labels) -> None:
    Path(path).write_text("label\n" + "".join(f"{int(v)}\n" for v in _labels(labels)))


def read_partition(path) -> Partition:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if lines and not lines[0].lstrip("-").isdigit():
        lines = lines[1:]
    return Partition(np.array([int(v) for v in lines]))
