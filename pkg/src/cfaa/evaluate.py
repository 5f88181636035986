"""Sampled top-k ranking metrics and the proxy A-distance diagnostic."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import TEST, DomainData


@dataclass
class RankedCase:
    user: int
    positive: int
    candidates: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(np.unique(self.candidates)) != len(self.candidates):
            raise ValueError(f"duplicate candidates for user {self.user}")
        if (self.candidates == self.positive).sum() != 1:
            raise ValueError(f"positive {self.positive} must appear exactly once")
        if self.scores.shape != self.candidates.shape:
            raise ValueError("one score per candidate required")

    def rank(self) -> int:
        """1-based rank of the positive; ties go to the lower item index."""
        pos = int(np.flatnonzero(self.candidates == self.positive)[0])
        s = self.scores[pos]
        ahead = (self.scores > s) | ((self.scores == s) & (self.candidates < self.positive))
        return int(ahead.sum()) + 1


def rank_metrics(cases, k: int = 10) -> dict:
    """User-averaged HR@k, Recall@k and NDCG@k over sampled-candidate cases."""
    per_user = defaultdict(list)
    for c in cases:
        if len(c.candidates) < k:
            raise ValueError(f"case for user {c.user} has fewer than k={k} candidates")
        per_user[c.user].append(c.rank())
    if not per_user:
        return {"HR": 0.0, "Recall": 0.0, "NDCG": 0.0, "users": 0}
    hr, rec, ndcg = [], [], []
    for ranks in per_user.values():
        r = np.asarray(ranks)
        hit = r <= k
        hr.append(float(hit.any()))
        rec.append(hit.mean())
        ndcg.append(np.where(hit, 1.0 / np.log2(r + 1.0), 0.0).mean())
    return {"HR": float(np.mean(hr)), "Recall": float(np.mean(rec)),
            "NDCG": float(np.mean(ndcg)), "users": len(per_user)}


def candidate_lists(data: DomainData, split: int = TEST, n_negatives: int = 99,
                    seed: int = 0):
    """``(user, positive, candidates)`` for every held-out positive.

    Negatives are drawn uniformly from items the user has no positive
    interaction with in any split.
    """
    ds = data.ds
    rows = np.flatnonzero(ds.mask(split) & (ds.labels == 1))
    liked = defaultdict(set)
    pos_all = ds.labels == 1
    for u, i in zip(ds.users[pos_all], ds.items[pos_all]):
        liked[int(u)].add(int(i))
    rng = np.random.default_rng([seed, 31])
    out = []
    for r in rows:
        u, i = int(ds.users[r]), int(ds.items[r])
        pool = np.setdiff1d(np.arange(ds.n_items), np.fromiter(liked[u], dtype=np.int64))
        take = min(n_negatives, len(pool))
        negs = rng.choice(pool, size=take, replace=False)
        out.append((u, i, np.concatenate([[i], np.sort(negs)])))
    return out


def score_cases(lists, score_fn) -> list:
    """Attach scores; ``score_fn(users, items)`` scores aligned index arrays."""
    if not lists:
        return []
    users = np.concatenate([np.full(len(c), u) for u, _, c in lists])
    items = np.concatenate([c for _, _, c in lists])
    scores = score_fn(users, items)
    out, off = [], 0
    for u, i, c in lists:
        out.append(RankedCase(u, i, c, scores[off:off + len(c)]))
        off += len(c)
    return out


# --------------------------------------------------------------------------
# proxy A-distance


@dataclass
class DiscrepancyReport:
    accuracy: float
    error: float
    d_A: float
    sides: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "error": self.error, "d_A": self.d_A}
        for name, rep in self.sides.items():
            out.update({f"{name}_{k}": v for k, v in rep.as_dict().items()})
        return out


def _fit_logistic(X, y, iters: int = 300, l2: float = 1e-4):
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(Xb.T @ Xb / n).max() + l2
    lr = 1.0 / lip
    w = np.zeros(d + 1)
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-np.clip(Xb @ w, -500, 500)))
        g = Xb.T @ (p - y) / n + l2 * np.r_[w[:-1], 0.0]
        w -= lr * g
    return w


def proxy_a_distance(E_S, E_T, folds: int = 5, seed: int = 0, iters: int = 300) -> DiscrepancyReport:
    """Cross-validated linear domain probe; ``d_A = 2 (1 - 2 err)``.

    The larger side is subsampled to the size of the smaller one and both
    sides share one fold permutation, so swapping the arguments flips the
    labels without changing the folds.
    """
    E_S = np.asarray(E_S, dtype=np.float64)
    E_T = np.asarray(E_T, dtype=np.float64)
    if E_S.ndim != 2 or E_T.ndim != 2 or E_S.shape[1] != E_T.shape[1]:
        raise ValueError(f"embedding widths differ: {E_S.shape} vs {E_T.shape}")
    n = min(len(E_S), len(E_T))
    if n < folds:
        raise ValueError(f"need at least {folds} samples per side")
    rng = np.random.default_rng([seed, 41])
    take = np.sort(rng.permutation(max(len(E_S), len(E_T)))[:n])
    S = E_S[take] if len(E_S) > n else E_S
    T = E_T[take] if len(E_T) > n else E_T
    fold = rng.permutation(n) % folds
    errors = 0
    for f in range(folds):
        tr, te = fold != f, fold == f
        X = np.vstack([S[tr], T[tr]])
        y = np.r_[np.zeros(tr.sum()), np.ones(tr.sum())]
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        w = _fit_logistic((X - mu) / sd, y, iters)
        for part, label in ((S[te], 0), (T[te], 1)):
            z = ((part - mu) / sd) @ w[:-1] + w[-1]
            errors += int(((z > 0).astype(int) != label).sum())
    err = errors / (2 * n)
    return DiscrepancyReport(accuracy=1.0 - err, error=err, d_A=2.0 * (1.0 - 2.0 * err))


def domain_discrepancy(user_S, user_T, item_S, item_T, folds: int = 5, seed: int = 0):
    """User-side and item-side probes; the top level averages the two."""
    u = proxy_a_distance(user_S, user_T, folds, seed)
    v = proxy_a_distance(item_S, item_T, folds, seed)
    err = 0.5 * (u.error + v.error)
    return DiscrepancyReport(1.0 - err, err, 2.0 * (1.0 - 2.0 * err), {"user": u, "item": v})
