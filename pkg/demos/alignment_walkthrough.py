"""Walk through both alignment losses on one toy batch.

Two batches of embeddings are drawn, the target one rotated and shifted.
The script prints the typical samples of one attribution, the transport
plan between source and target proxies, the self-expression coefficients,
and the resulting vertical and horizontal losses.

    python demos/alignment_walkthrough.py
"""
import numpy as np

from cfaa import ndmath as nd
from cfaa import ot, subspace, typical

rng = np.random.default_rng(0)
N, D, K = 32, 4, 4
mix = rng.normal(size=(D, D))
Z_S = rng.normal(size=(N, D)) @ mix
angle = np.pi / 3
R = np.eye(D)
R[:2, :2] = [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
Z_T = rng.normal(size=(N, D)) @ mix @ R.T + 0.5

np.set_printoptions(precision=4, suppress=True)

# vertical: per-attribution proxies, then 1-D optimal transport between them
M_S, res_S = typical.select(Z_S, K, alpha=0.1)
M_T, res_T = typical.select(Z_T, K, alpha=0.1)
print("source proxies of attribution 0:", M_S.value[:, 0])
print("target proxies of attribution 0:", M_T.value[:, 0])
print("selection iterations per attribution:", res_S.iterations)
c = ot.sinkhorn_coupling(M_S.value[:, 0], M_T.value[:, 0])
print("transport plan for attribution 0 (rows sum to 1/K):\n", c.pi)
print("marginal error:", c.marginal_error())
print("d_O per attribution:", ot.attribution_distances(M_S.value, M_T.value)[0].value.ravel())

# horizontal: self-expression graph per domain, Bures distance of Laplacian pseudoinverses
sol = subspace.solve_self_expression(Z_S)
print("self-expression coefficients B (zero diagonal):\n", sol.B)
print("stationarity residual:", sol.stationarity_residual())

# both losses on a user/item pair of batches, with gradients
U_S, U_T = nd.param(Z_S), nd.param(Z_T)
V_S, V_T = nd.param(rng.normal(size=(N, D))), nd.param(rng.normal(size=(N, D)) * 2)
Ms = [typical.select(z, K)[0] for z in (U_S, U_T, V_S, V_T)]
L_O = ot.vertical_loss(*Ms)
L_A = subspace.horizontal_loss(U_S, U_T, V_S, V_T)
print(f"L_O = {L_O.item():.6f}   L_A = {L_A.item():.6f}")
nd.backward(nd.add(nd.scale(L_O, 0.5), nd.scale(L_A, 0.8)))
print("gradient norm on the target user batch:", np.linalg.norm(U_T.grad))
