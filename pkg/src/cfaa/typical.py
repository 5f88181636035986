"""Typical-sample selection: entropy-regularized soft 1-D clustering per attribution.

For every column ``q`` of a batch ``Z`` (N x D) we look for ``K`` proxy
values ``M[:, q]`` and soft assignments ``Psi_q`` (N x K, rows on the
simplex) minimising

    sum_ij Psi_ij (Z_iq - M_jq)^2 + alpha * sum_ij Psi_ij log Psi_ij

by exact block updates: a row softmax of ``-zeta / alpha`` for ``Psi`` and
a ``Psi``-weighted mean for ``M``.  Columns are solved independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd

EMPTY_MASS = 1e-300


@dataclass
class SelectionProblem:
    Z: np.ndarray
    K: int
    alpha: float = 0.1
    tol: float = 1e-6
    max_iter: int = 50
    seed: int = 0

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2:
            raise ValueError(f"Z must be N x D, got shape {self.Z.shape}")
        if not np.isfinite(self.Z).all():
            raise nd.NonFiniteError("Z contains NaN or Inf")
        n = self.Z.shape[0]
        if not 1 <= self.K <= n:
            raise ValueError(f"need 1 <= K <= N, got K={self.K}, N={n}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class SelectionResult:
    M: np.ndarray               # K x D
    Psi: np.ndarray             # D x N x K
    objective_trace: np.ndarray  # iterations x D, NaN once a column has stopped
    iterations: np.ndarray      # per-column count
    frozen_events: int = 0
    Z: np.ndarray = field(default=None, repr=False)

    @property
    def zeta(self) -> np.ndarray:
        """Squared distances ``(Z_iq - M_jq)^2`` laid out D x N x K."""
        return _zeta(self.Z, self.M)

    def psi(self, q: int) -> np.ndarray:
        return self.Psi[q]

    def trace(self, q: int) -> np.ndarray:
        col = self.objective_trace[:, q]
        return col[~np.isnan(col)]


def _zeta(Z, M):
    # D x N x K
    return (Z.T[:, :, None] - M.T[:, None, :]) ** 2


def _assign(zeta, alpha):
    logits = -zeta / alpha
    logits = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    log_psi = logits - log_norm
    psi = np.maximum(np.exp(log_psi), np.finfo(np.float64).tiny)
    return psi, log_psi


def _proxies(Z, psi, M_old):
    # psi: D x N x K ; returns K x D and the empty-mass mask (D x K)
    mass = psi.sum(axis=1)
    weighted = (psi * Z.T[:, :, None]).sum(axis=1)
    empty = mass < EMPTY_MASS
    safe = np.where(empty, 1.0, mass)
    M = np.where(empty, M_old.T, weighted / safe)
    return M.T.copy(), empty


def _objective(zeta, psi, log_psi, alpha):
    ent = psi * np.where(psi > np.finfo(np.float64).tiny, log_psi, 0.0)
    return (psi * zeta).sum(axis=(1, 2)) + alpha * ent.sum(axis=(1, 2))


def update_assignments(z_col, proxies, alpha: float) -> np.ndarray:
    """Row-stochastic soft assignment of each value to the proxies."""
    z = np.asarray(z_col, dtype=np.float64).ravel()
    m = np.asarray(proxies, dtype=np.float64).ravel()
    if m.size == 0:
        raise ValueError("need at least one proxy")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    zeta = (z[:, None] - m[None, :]) ** 2
    return _assign(zeta[None], alpha)[0][0]


def update_proxies(z_col, psi_q, proxies=None):
    """Assignment-weighted means; returns ``(proxies, empty_mask)``.

    Proxies whose column mass is below ``EMPTY_MASS`` keep their previous
    value (``proxies``, or NaN if none was given) and are flagged.
    """
    z = np.asarray(z_col, dtype=np.float64).ravel()
    psi = np.asarray(psi_q, dtype=np.float64)
    old = np.full(psi.shape[1], np.nan) if proxies is None else np.asarray(proxies, float).ravel()
    M, empty = _proxies(z[:, None], psi[None], old[:, None])
    return M[:, 0], empty[0]


def initial_proxies(Z: np.ndarray, K: int) -> np.ndarray:
    """K evenly spaced order statistics of each column (K x D)."""
    n = Z.shape[0]
    ranks = np.rint(np.linspace(0, n - 1, K)).astype(int)
    return np.sort(Z, axis=0)[ranks]


def select_typical_samples(problem: SelectionProblem) -> SelectionResult:
    """Alternate assignment and proxy updates column by column.

    Each iteration records the objective right after the assignment step,
    where it equals ``-alpha * sum_i logsumexp_j(-zeta_ij / alpha)``; the
    proxies are then refreshed from the new assignments.  A column stops
    once the relative change of its objective falls below ``tol``.
    """
    Z, K, alpha = problem.Z, problem.K, problem.alpha
    D = Z.shape[1]
    Zt = Z.T[:, :, None]                      # D x N x 1
    M = initial_proxies(Z, K)
    psi = np.empty((D, Z.shape[0], K))
    active = np.ones(D, dtype=bool)
    prev = np.full(D, np.inf)
    iters = np.zeros(D, dtype=int)
    rows = []
    frozen = 0
    tiny = np.finfo(np.float64).tiny
    for _ in range(problem.max_iter):
        cols = np.flatnonzero(active)
        z = Zt[cols]
        logits = z - M.T[cols][:, None, :]
        logits *= logits
        logits *= -1.0 / alpha
        top = logits.max(axis=2, keepdims=True)
        logits -= top
        e = np.exp(logits, out=logits)
        norm = e.sum(axis=2, keepdims=True)
        p = np.maximum(e / norm, tiny)
        obj = -alpha * (np.log(norm) + top).sum(axis=(1, 2))
        psi[cols] = p
        mass = p.sum(axis=1)
        num = (p * z).sum(axis=1)
        empty = mass < EMPTY_MASS
        frozen += int(empty.sum())
        M[:, cols] = np.where(empty, M.T[cols], num / np.where(empty, 1.0, mass)).T
        row = np.full(D, np.nan)
        row[cols] = obj
        rows.append(row)
        iters[cols] += 1
        rel = np.abs(prev[cols] - obj) / np.maximum(np.abs(obj), 1e-300)
        prev[cols] = obj
        active[cols[rel < problem.tol]] = False
        if not active.any():
            break
    return SelectionResult(M=M, Psi=psi, objective_trace=np.array(rows),
                           iterations=iters, frozen_events=frozen, Z=Z)


def typical_samples(Z, result: SelectionResult) -> nd.Node:
    """Tape node for the proxies with ``Psi`` held constant.

    ``M_jq = sum_i W_ijq Z_iq`` where ``W`` is ``Psi`` normalised over ``i``.
    """
    psi = result.Psi
    mass = psi.sum(axis=1, keepdims=True)
    W = psi / np.where(mass < EMPTY_MASS, 1.0, mass)  # D x N x K

    def fwd(z):
        return np.einsum("qik,iq->kq", W, z)

    def vjp(g, z, out):
        return (np.einsum("qik,kq->iq", W, g),)

    return nd.primitive("typical_samples", fwd, vjp, Z)


def select(Z, K: int, alpha: float = 0.1, tol: float = 1e-6, max_iter: int = 50):
    """Solve on ``Z``'s value and return ``(M node, SelectionResult)``."""
    Z = Z if isinstance(Z, nd.Node) else nd.constant(Z)
    res = select_typical_samples(SelectionProblem(Z.value, K, alpha, tol, max_iter))
    return typical_samples(Z, res), res
