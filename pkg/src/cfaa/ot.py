"""Per-attribution entropic optimal transport between typical samples.

All solvers work on K x D proxy matrices at once: column ``q`` of the
source proxies is transported onto column ``q`` of the target proxies
under uniform ``1/K`` marginals with squared-difference ground cost.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd

EPS_FRACTION = 0.05


@dataclass
class Coupling:
    pi: np.ndarray       # K x K, or D x K x K for batched solves
    cost: np.ndarray
    epsilon: float | np.ndarray
    iterations_used: int | np.ndarray
    converged: bool | np.ndarray

    def marginal_error(self) -> float:
        K = self.pi.shape[-1]
        rows = np.abs(self.pi.sum(axis=-1) - 1.0 / K).max()
        cols = np.abs(self.pi.sum(axis=-2) - 1.0 / K).max()
        return float(max(rows, cols))


def cost_matrices(src, tgt) -> np.ndarray:
    """``C[q, i, j] = (src[i, q] - tgt[j, q])**2`` for K x D inputs."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    return (src.T[:, :, None] - tgt.T[:, None, :]) ** 2


def default_epsilon(cost: np.ndarray) -> np.ndarray:
    """``0.05 * mean(cost)`` per attribution, floored to stay positive."""
    eps = EPS_FRACTION * cost.mean(axis=(-2, -1))
    return np.maximum(eps, 1e-12)


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def _row_potential(kern, g, log_a):
    # f making every row of exp(kern + f + g) sum to a
    return log_a - _lse(kern + g[:, None, :], axis=2)


def _sinkhorn_log(kern, log_a, tol, max_iter, g=None):
    """Plain log-domain scaling; each attribution stops at ``tol``."""
    D, K, _ = kern.shape
    g = np.zeros((D, K)) if g is None else g.copy()
    active = np.ones(D, dtype=bool)
    used = np.zeros(D, dtype=int)
    for _ in range(max_iter):
        if not active.any():
            break
        kk = kern[active]
        f = _row_potential(kk, g[active], log_a)
        g[active] = log_a - _lse(kk + f[:, :, None], axis=1)
        used[active] += 1
        f = _row_potential(kk, g[active], log_a)
        cols = np.exp(_lse(kk + f[:, :, None], axis=1) + g[active])
        done = np.abs(cols - np.exp(log_a)).max(axis=1) < tol
        active[np.flatnonzero(active)[done]] = False
    return g, used


def _sinkhorn_scaling(kern, log_a, tol, max_iter, tau=50.0, g0=None):
    """Scaling iterations on a kernel re-based at running log potentials.

    Potentials are absorbed into the kernel whenever a scaling leaves
    ``exp(+-tau)``, which keeps small ``epsilon`` from underflowing.  Returns
    ``None`` if the re-based kernel still degenerates, so the caller can fall
    back to the pure log-domain loop.
    """
    D, K, _ = kern.shape
    a = np.exp(log_a)
    if g0 is None:
        # c-transform start: every row and column of the re-based kernel holds a 1
        f = -kern.max(axis=2)
        g = -(kern + f[:, :, None]).max(axis=1)
    else:
        g = g0.copy()
        f = _row_potential(kern, g, log_a)
    Kt = np.exp(kern + f[:, :, None] + g[:, None, :])
    u = np.ones((D, K))
    v = np.ones((D, K))
    active = np.ones(D, dtype=bool)
    used = np.zeros(D, dtype=int)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            Ka = Kt[idx]
            ui = a / np.einsum("qij,qj->qi", Ka, v[idx])
            ktu = np.einsum("qij,qi->qj", Ka, ui)
            vi = a / ktu
            if not (np.isfinite(ui).all() and np.isfinite(vi).all()):
                return None
            u[idx], v[idx] = ui, vi
            used[idx] += 1
            # columns are exact after the v update; rows drift until converged
            rows = ui * np.einsum("qij,qj->qi", Ka, vi)
            done = np.abs(rows - a).max(axis=1) < tol
            lu, lv = np.log(ui), np.log(vi)
            big = (np.abs(lu).max(axis=1) > tau) | (np.abs(lv).max(axis=1) > tau)
            if big.any():
                b = idx[big]
                f[b] += lu[big]
                g[b] += lv[big]
                Kt[b] = np.exp(kern[b] + f[b][:, :, None] + g[b][:, None, :])
                u[b] = 1.0
                v[b] = 1.0
            active[idx[done]] = False
    g = g + np.log(v)
    return g if np.isfinite(g).all() else None, used


def _semidual_value(kern, g, log_a):
    f = _row_potential(kern, g, log_a)
    return np.exp(log_a) * (f.sum(axis=1) + g.sum(axis=1))


def _column_residual(kern, g, log_a):
    f = _row_potential(kern, g, log_a)
    pi = np.exp(kern + f[:, :, None] + g[:, None, :])
    return pi, np.exp(log_a) - pi.sum(axis=1)


def _newton_polish(kern, g, log_a, tol, max_steps=30):
    """Damped Newton ascent on the semi-dual in the column potential ``g``.

    Rows of the plan are exact by construction; the step solves the
    column-marginal system with the last potential pinned (the dual is
    invariant to a constant shift).  A step is accepted when it raises the
    dual or shrinks the marginal residual; attributions that stall are left
    as they are.  Returns the polished ``g`` and the steps taken.
    """
    D, K, _ = kern.shape
    a = np.exp(log_a)
    steps = np.zeros(D, dtype=int)
    g = g.copy()
    if K == 1:
        return g, steps
    live = np.ones(D, dtype=bool)
    eye = np.eye(K)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(max_steps):
            pi, resid = _column_residual(kern, g, log_a)
            err = np.abs(resid).max(axis=1)
            live &= err >= tol
            idx = np.flatnonzero(live)
            if idx.size == 0:
                break
            P, r = pi[idx], resid[idx]
            H = P.sum(axis=1)[:, :, None] * eye - np.matmul(P.transpose(0, 2, 1), P) / a
            try:
                step = np.linalg.solve(H[:, :-1, :-1], r[:, :-1, None])[..., 0]
            except np.linalg.LinAlgError:
                break
            step = np.concatenate([step, np.zeros((idx.size, 1))], axis=1)
            step[~np.isfinite(step).all(axis=1)] = 0.0
            kk, g0 = kern[idx], g[idx]
            base = _semidual_value(kk, g0, log_a)
            t = np.ones(idx.size)
            pending = np.ones(idx.size, dtype=bool)
            for _ in range(40):
                trial = g0 + t[:, None] * step
                _, r_new = _column_residual(kk, trial, log_a)
                gain = _semidual_value(kk, trial, log_a) - base
                ok = np.isfinite(gain) & ((gain >= -1e-12 * (np.abs(base) + 1.0))
                                          | (np.abs(r_new).max(axis=1) < err[idx]))
                pending &= ~ok
                if not pending.any():
                    break
                t = np.where(pending, 0.5 * t, t)
            t[pending] = 0.0
            live[idx[pending]] = False
            g[idx] = g0 + t[:, None] * step
            steps[idx[~pending]] += 1
    return g, steps


def _anneal(cost, eps, log_a, factor=0.5, sweeps=50, stage_tol=1e-4):
    """Warm start for ``eps`` below the default scale by epsilon-scaling.

    Runs a few log-domain sweeps at geometrically decreasing regularisation,
    from the default ``EPS_FRACTION * mean(cost)`` down to ``eps``, carrying
    the column potential (in cost units) from stage to stage.  Returns
    ``(g, sweeps used)`` with ``g`` in units of the target ``eps``, or
    ``(None, 0)`` where no annealing is needed.
    """
    D = cost.shape[0]
    start = default_epsilon(cost)
    if not (eps < factor * start).any():
        return None, np.zeros(D, dtype=int)
    G = np.zeros(cost.shape[:2])
    used = np.zeros(D, dtype=int)
    level = start.copy()
    while (level > eps).any():
        level = np.maximum(eps, level)
        run = level > eps
        kern = -cost[run] / level[run][:, None, None]
        g, n = _sinkhorn_log(kern, log_a, stage_tol, sweeps, g=G[run] / level[run][:, None])
        G[run] = g * level[run][:, None]
        used[run] += n
        level = np.where(run, level * factor, level)
    return G / eps[:, None], used


def sinkhorn_batch(cost: np.ndarray, epsilon=None, tol: float = 1e-6,
                   max_iter: int = 200, polish: bool = True) -> Coupling:
    """Entropic OT on a stack of D cost matrices (D x K x K).

    Small ``epsilon`` is approached by epsilon-scaling from the default
    scale.  Stabilised scaling iterations then run until the row marginals
    are within ``tol`` or ``max_iter`` is spent, with a pure log-domain
    loop as fallback if the re-based kernel degenerates.  Scaling converges
    only linearly when ``epsilon`` is small against the cost spread, so
    attributions are finished with damped Newton steps on the semi-dual
    (``polish``).  ``converged`` is False where the final plan misses
    ``tol`` on either marginal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    D, K, _ = cost.shape
    if K < 1:
        raise ValueError("need K >= 1")
    eps = default_epsilon(cost) if epsilon is None else np.broadcast_to(
        np.asarray(epsilon, dtype=np.float64), (D,)).copy()
    if (eps <= 0).any():
        raise ValueError("epsilon must be positive")
    kern = -cost / eps[:, None, None]
    log_a = -np.log(K)
    g0, used = _anneal(cost, eps, log_a)
    out = _sinkhorn_scaling(kern, log_a, tol, max_iter, g0=g0)
    if out is None or out[0] is None:
        out = _sinkhorn_log(kern, log_a, tol, max_iter, g=g0)
    g, more = out
    used = used + more
    if polish:
        g, extra = _newton_polish(kern, g, log_a, 1e-2 * tol)
        used = used + extra
    f = _row_potential(kern, g, log_a)
    pi = np.exp(kern + f[:, :, None] + g[:, None, :])
    rows = np.abs(pi.sum(axis=2) - 1.0 / K).max(axis=1)
    cols = np.abs(pi.sum(axis=1) - 1.0 / K).max(axis=1)
    return Coupling(pi=pi, cost=cost, epsilon=eps, iterations_used=used,
                    converged=np.maximum(rows, cols) < tol)


def sinkhorn_coupling(src, tgt, epsilon=None, tol: float = 1e-6,
                      max_iter: int = 200) -> Coupling:
    """Entropic OT plan between two 1-D samples of equal size K."""
    src = np.asarray(src, dtype=np.float64).ravel()
    tgt = np.asarray(tgt, dtype=np.float64).ravel()
    if src.size != tgt.size:
        raise ValueError("source and target need the same number of samples")
    c = sinkhorn_batch(cost_matrices(src[:, None], tgt[:, None]), epsilon, tol, max_iter)
    return Coupling(pi=c.pi[0], cost=c.cost[0], epsilon=float(c.epsilon[0]),
                    iterations_used=int(c.iterations_used[0]),
                    converged=bool(c.converged[0]))


def ot_distance(src, tgt, epsilon=None, tol: float = 1e-6, max_iter: int = 200) -> float:
    """``(1/K^2) * sum_ij pi_ij (src_i - tgt_j)^2`` with pi from Sinkhorn."""
    c = sinkhorn_coupling(src, tgt, epsilon, tol, max_iter)
    K = c.pi.shape[0]
    return float((c.pi * c.cost).sum() / K**2)


def transport_costs(src, tgt, pi: np.ndarray) -> nd.Node:
    """Tape node (1 x D) of ``sum_ij pi[q,i,j] (src_iq - tgt_jq)^2``; pi is frozen."""
    pi = np.array(pi, dtype=np.float64, copy=True)

    def fwd(a, b):
        return (pi * cost_matrices(a, b)).sum(axis=(1, 2))[None, :]

    def vjp(g, a, b, out):
        diff = a.T[:, :, None] - b.T[:, None, :]      # D x K x K
        w = 2.0 * pi * diff * g[0][:, None, None]
        return w.sum(axis=2).T, -w.sum(axis=1).T

    return nd.primitive("transport_costs", fwd, vjp, src, tgt)


def attribution_distances(M_src, M_tgt, epsilon=None, tol: float = 1e-6,
                          max_iter: int = 200):
    """Per-attribution d_O as a 1 x D node, plus the batched coupling."""
    M_src = M_src if isinstance(M_src, nd.Node) else nd.constant(M_src)
    M_tgt = M_tgt if isinstance(M_tgt, nd.Node) else nd.constant(M_tgt)
    if M_src.shape != M_tgt.shape:
        raise nd.ShapeError(f"proxy shapes differ: {M_src.shape} vs {M_tgt.shape}")
    K = M_src.shape[0]
    coupling = sinkhorn_batch(cost_matrices(M_src.value, M_tgt.value), epsilon, tol, max_iter)
    d = nd.scale(transport_costs(M_src, M_tgt, coupling.pi), 1.0 / K**2)
    return d, coupling


def vertical_loss(M_S_user, M_T_user, M_S_item, M_T_item, epsilon=None,
                  tol: float = 1e-6, max_iter: int = 200) -> nd.Node:
    """Mean over attributions of the user-side plus item-side OT distances."""
    shapes = {getattr(m, "shape", np.shape(m)) for m in (M_S_user, M_T_user, M_S_item, M_T_item)}
    if len(shapes) != 1:
        raise nd.ShapeError(f"typical-sample matrices must share K x D, got {shapes}")
    du, _ = attribution_distances(M_S_user, M_T_user, epsilon, tol, max_iter)
    dv, _ = attribution_distances(M_S_item, M_T_item, epsilon, tol, max_iter)
    D = du.shape[1]
    return nd.scale(nd.total(nd.add(du, dv)), 1.0 / D)
