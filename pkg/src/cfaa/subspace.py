"""Attribution subspace graphs and their Gaussian Wasserstein alignment.

Each batch ``Z`` (N x D) is explained by a zero-diagonal self-expression
matrix ``B`` (``Z ~ Z B``) with a nuclear-norm surrogate penalty
``nu * Tr(B^T Phi B)``.  ``B`` is symmetrised into an attribution graph whose
Laplacian pseudoinverse is read as the covariance of a zero-mean Gaussian;
two domains are compared with the squared Bures-Wasserstein distance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd


@dataclass
class SelfExpression:
    B: np.ndarray
    Theta: np.ndarray
    Phi: np.ndarray       # the Phi that B is optimal for
    Xi: np.ndarray
    nu: float
    delta: float
    iterations: int
    converged: bool
    Z: np.ndarray = None

    @property
    def gamma(self) -> np.ndarray:
        """Diagonal multipliers recovered from the stationarity condition."""
        G = self.Z.T @ self.Z
        r = G @ self.B - G + self.nu * self.Xi @ self.B
        return -np.diag(r)

    def stationarity_residual(self) -> float:
        G = self.Z.T @ self.Z
        r = G @ self.B - G + self.nu * self.Xi @ self.B + np.diag(self.gamma)
        return float(np.linalg.norm(r))


@dataclass
class AttributionGraph:
    A: np.ndarray
    Deg: np.ndarray
    L: np.ndarray
    L_pinv: np.ndarray


def _inverse(P: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(P)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.inv(P + 1e-10 * np.eye(P.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Z^T Z + nu * Xi is singular") from exc


def _closed_form(G, Theta, rule):
    on = np.eye(G.shape[0], dtype=bool)
    if rule == "ratio":
        return np.where(on, 0.0, -Theta / np.diag(Theta)[None, :])
    TG = Theta @ G
    gamma = np.diag(TG) / np.diag(Theta)
    return np.where(on, 0.0, TG - Theta * gamma[None, :])


def solve_self_expression(Z, nu: float = 0.1, delta: float = 1e-6, tol: float = 1e-6,
                          max_iter: int = 30, rule: str = "kkt") -> SelfExpression:
    """Alternate the ``B`` and ``Phi`` updates until ``max |dB| < tol``.

    ``rule="kkt"`` solves the zero-diagonal least-squares problem exactly
    for the current ``Phi``: ``B = Theta (G - diag(gamma))`` with ``gamma``
    fixed by ``diag(B) = 0``.  ``rule="ratio"`` uses ``B_ij = -Theta_ij /
    Theta_jj``, which coincides with it whenever ``Phi`` is diagonal.
    """
    Z = np.asarray(Z, dtype=np.float64)
    N, D = Z.shape
    if nu <= 0:
        raise ValueError("nu must be positive")
    if N < 2 or D < 2:
        raise ValueError(f"need N >= 2 and D >= 2, got {Z.shape}")
    if rule not in ("kkt", "ratio"):
        raise ValueError(f"unknown rule {rule!r}")
    G = Z.T @ Z
    Phi = np.eye(D)
    B = np.zeros((D, D))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Xi = Phi + Phi.T
        Theta = _inverse(G + nu * Xi)
        B_new = _closed_form(G, Theta, rule)
        step = np.abs(B_new - B).max()
        B = B_new
        if step < tol:
            converged = True
            break
        if it == max_iter:
            break
        Phi = nd.psd_function(B @ B.T + delta * np.eye(D), "pinv_sqrt", tol=0.0)
    return SelfExpression(B=B, Theta=Theta, Phi=Phi, Xi=Xi, nu=nu, delta=delta,
                          iterations=it, converged=converged, Z=Z)


def self_expression_node(Z: nd.Node, sol: SelfExpression, rule: str = "kkt") -> nd.Node:
    """``B`` as a tape node of ``Z`` with ``Phi`` frozen at ``sol.Phi``."""
    D = sol.B.shape[0]
    off = 1.0 - np.eye(D)
    G = nd.matmul(nd.transpose(Z), Z)
    Theta = nd.inverse(nd.add(G, nd.constant(sol.nu * sol.Xi)))
    if rule == "ratio":
        B = nd.neg(nd.div(Theta, nd.diag_part(Theta)))
    else:
        TG = nd.matmul(Theta, G)
        gamma = nd.div(nd.diag_part(TG), nd.diag_part(Theta))
        B = nd.sub(TG, nd.mul(Theta, gamma))
    return nd.mul(B, off)


def build_attribution_graph(B) -> AttributionGraph:
    B = nd.as_matrix(B)
    A = 0.5 * (np.abs(B) + np.abs(B.T))
    Deg = np.diag(A.sum(axis=1))
    L = Deg - A
    return AttributionGraph(A=A, Deg=Deg, L=L, L_pinv=nd.psd_function(L, "pinv"))


def laplacian_pinv_node(B: nd.Node) -> nd.Node:
    """``L^+`` of the attribution graph of ``B`` on the tape."""
    A = nd.scale(nd.add(nd.absolute(B), nd.absolute(nd.transpose(B))), 0.5)
    L = nd.sub(nd.diag_embed(nd.row_sum(A)), A)
    return nd.psd_fn(L, "pinv")


def bures_distance(sigma_s, sigma_t, tol: float = nd.PINV_RTOL) -> float:
    """Squared Bures-Wasserstein distance between two PSD covariances."""
    S = nd.as_matrix(sigma_s)
    T = nd.as_matrix(sigma_t)
    if S.shape != T.shape:
        raise nd.ShapeError(f"covariance shapes differ: {S.shape} vs {T.shape}")
    rs = nd.psd_function(S, "sqrt", tol)
    cross = nd.psd_function(rs @ T @ rs, "sqrt", tol)
    return max(float(np.trace(S) + np.trace(T) - 2.0 * np.trace(cross)), 0.0)


def bures_node(S: nd.Node, T: nd.Node, tol: float = nd.PINV_RTOL) -> nd.Node:
    rs = nd.psd_fn(S, "sqrt", tol)
    cross = nd.psd_fn(nd.matmul(nd.matmul(rs, T), rs), "sqrt", tol)
    d = nd.sub(nd.add(nd.trace(S), nd.trace(T)), nd.scale(nd.trace(cross), 2.0))
    # clamp at zero; the gradient passes only where the value is positive
    return nd.clip(d, 0.0, np.inf)


def graph_covariance(Z, nu: float = 0.1, delta: float = 1e-6, tol: float = 1e-6,
                     max_iter: int = 30, rule: str = "kkt"):
    """Solve self-expression on ``Z`` and return ``(L^+ node, solution)``."""
    Z = Z if isinstance(Z, nd.Node) else nd.constant(Z)
    sol = solve_self_expression(Z.value, nu, delta, tol, max_iter, rule)
    return laplacian_pinv_node(self_expression_node(Z, sol, rule)), sol


def wasserstein_sum(pairs) -> nd.Node:
    """Sum of squared Bures distances over ``(cov_source, cov_target)`` pairs."""
    terms = [bures_node(s, t) for s, t in pairs]
    out = terms[0]
    for t in terms[1:]:
        out = nd.add(out, t)
    return out


def horizontal_loss(U_S, U_T, V_S, V_T, nu: float = 0.1, delta: float = 1e-6,
                    tol: float = 1e-6, max_iter: int = 30, rule: str = "kkt") -> nd.Node:
    """User-side plus item-side graph Wasserstein loss as a scalar node."""
    widths = {getattr(z, "shape", np.shape(z))[1] for z in (U_S, U_T, V_S, V_T)}
    if len(widths) != 1:
        raise nd.ShapeError(f"embedding widths differ: {sorted(widths)}")
    covs = [graph_covariance(z, nu, delta, tol, max_iter, rule)[0] for z in (U_S, U_T, V_S, V_T)]
    return wasserstein_sum([(covs[0], covs[1]), (covs[2], covs[3])])
