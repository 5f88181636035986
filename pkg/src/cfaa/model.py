"""Rating prediction towers, the joint objective and one Adam step.

Parameters live in a flat ``dict[str, np.ndarray]``.  Tower parameters are
prefixed by their role (``src_user``, ``src_item``, ``tgt_user``,
``tgt_item``); the predictor head is shared across domains under ``head``.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndmath as nd
from . import ot, subspace, typical

log = logging.getLogger(__name__)

TOWERS = ("src_user", "src_item", "tgt_user", "tgt_item")
PRED_CLAMP = 1e-7
_P_LO, _P_HI = np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg

ARMS = {
    "base": (False, False),
    "v": (True, False),
    "h": (False, True),
    "full": (True, True),
}


@dataclass
class LossWeights:
    lambda_O: float = 0.5
    lambda_A: float = 0.8

    def __post_init__(self):
        if self.lambda_O < 0 or self.lambda_A < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def for_arm(cls, arm: str, lambda_O: float = 0.5, lambda_A: float = 0.8) -> "LossWeights":
        if arm not in ARMS:
            raise ValueError(f"unknown ablation arm {arm!r}; expected one of {sorted(ARMS)}")
        use_o, use_a = ARMS[arm]
        return cls(lambda_O if use_o else 0.0, lambda_A if use_a else 0.0)


@dataclass
class TrainConfig:
    D: int = 16
    batch_size: int = 128
    K: int | None = None          # None -> batch_size // 2
    alpha: float = 0.1
    nu: float = 0.1
    epsilon: float | None = None  # None -> 0.05 * mean cost per attribution
    delta: float = 1e-6
    select_tol: float = 1e-6
    select_max_iter: int = 50
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 200
    lambda_O: float = 0.5
    lambda_A: float = 0.8
    arm: str = "full"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    head_hidden: int | None = None
    nonlinearity: str = "tanh"
    seed: int = 0

    @property
    def proxies(self) -> int:
        return self.K if self.K is not None else max(1, self.batch_size // 2)

    @property
    def weights(self) -> LossWeights:
        return LossWeights.for_arm(self.arm, self.lambda_O, self.lambda_A)


@dataclass
class LossReport:
    L_C: float
    L_O: float
    L_A: float
    L: float
    step: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, config: TrainConfig) -> "AdamState":
        return cls(config.lr, config.beta1, config.beta2, config.eps_adam, 0,
                   {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def update(self, params: dict, grads: dict) -> dict:
        self.step += 1
        t = self.step
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**t)
            vhat = self.v[k] / (1 - self.beta2**t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


# --------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(sizes: dict, d_rev: int, config: TrainConfig) -> dict:
    """Seeded initial parameters.

    ``sizes`` maps each tower name to ``(n_entities, history_width)``.
    The ID and history widths both equal ``config.D``.
    """
    rng = np.random.default_rng(config.seed)
    D = config.D
    d_id = d_hist = D
    params = {}
    for name in TOWERS:
        n, width = sizes[name]
        d_in = d_id + d_hist + d_rev
        params[f"{name}.E"] = _glorot(rng, n, d_id)
        params[f"{name}.F_W"] = _glorot(rng, width, d_hist)
        params[f"{name}.F_b"] = np.zeros((1, d_hist))
        params[f"{name}.G1_W"] = _glorot(rng, d_in, D)
        params[f"{name}.G1_b"] = np.zeros((1, D))
        params[f"{name}.G2_W"] = _glorot(rng, D, D)
        params[f"{name}.G2_b"] = np.zeros((1, D))
    hidden = config.head_hidden or D
    params["head.W1"] = _glorot(rng, 2 * D, hidden)
    params["head.b1"] = np.zeros((1, hidden))
    params["head.W2"] = _glorot(rng, hidden, 1)
    params["head.b2"] = np.zeros((1, 1))
    return params


def _act(x, kind):
    if kind != "tanh":
        raise ValueError(f"unsupported nonlinearity {kind!r}")
    return nd.tanh(x)


def tower_params(params: dict, name: str) -> dict:
    pre = name + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def embed_entities(ids, histories, reviews, tower: dict, nonlinearity: str = "tanh") -> nd.Node:
    """``G(E[id] (+) F(history) (+) review)`` for a batch of entities.

    ``tower`` maps ``E``, ``F_W``, ``F_b``, ``G1_W``, ``G1_b``, ``G2_W``,
    ``G2_b`` to arrays or nodes.
    """
    t = {k: v if isinstance(v, nd.Node) else nd.constant(v) for k, v in tower.items()}
    ids = np.asarray(ids, dtype=np.int64)
    n_entities = t["E"].shape[0]
    bad = ids[(ids < 0) | (ids >= n_entities)]
    if bad.size:
        raise IndexError(f"entity index {int(bad[0])} out of range [0, {n_entities})")
    reviews = np.asarray(reviews, dtype=np.float64)
    d_rev = t["G1_W"].shape[0] - t["E"].shape[1] - t["F_W"].shape[1]
    if reviews.ndim != 2 or reviews.shape[1] != d_rev:
        raise ValueError(f"review width {reviews.shape[-1]} does not match tower width {d_rev}")
    e = nd.take_rows(t["E"], ids)
    c = nd.add(nd.matmul(nd.constant(histories), t["F_W"]), t["F_b"])
    x = nd.hconcat(e, c, nd.constant(reviews))
    h = _act(nd.add(nd.matmul(x, t["G1_W"]), t["G1_b"]), nonlinearity)
    return nd.add(nd.matmul(h, t["G2_W"]), t["G2_b"])


def predict_ratings(U, V, head: dict, nonlinearity: str = "tanh") -> nd.Node:
    """Row-wise probability from the shared head on ``u (+) v`` (N x 1)."""
    U = U if isinstance(U, nd.Node) else nd.constant(U)
    V = V if isinstance(V, nd.Node) else nd.constant(V)
    if U.shape != V.shape:
        raise nd.ShapeError(f"user/item batches differ: {U.shape} vs {V.shape}")
    h = {k: v if isinstance(v, nd.Node) else nd.constant(v) for k, v in head.items()}
    x = nd.hconcat(U, V)
    z = _act(nd.add(nd.matmul(x, h["W1"]), h["b1"]), nonlinearity)
    # keep saturated outputs strictly inside (0, 1)
    return nd.clip(nd.sigmoid(nd.add(nd.matmul(z, h["W2"]), h["b2"])), _P_LO, _P_HI)


def rating_loss(pred_S, truth_S, pred_T) -> nd.Node:
    """Binary cross-entropy on the source plus the positive-only target term."""
    r = np.asarray(truth_S, dtype=np.float64).reshape(-1, 1)
    if not np.isin(r, (0.0, 1.0)).all():
        raise ValueError("source truth must be binary")
    pS = nd.clip(pred_S, PRED_CLAMP, 1 - PRED_CLAMP)
    pT = nd.clip(pred_T, PRED_CLAMP, 1 - PRED_CLAMP)
    src = nd.add(nd.mul(r, nd.log(pS)), nd.mul(1.0 - r, nd.log(nd.sub(1.0, pS))))
    return nd.neg(nd.add(nd.total(src), nd.total(nd.log(pT))))


def total_loss(L_C: float, L_O: float, L_A: float, w: LossWeights) -> float:
    return L_C + w.lambda_O * L_O + w.lambda_A * L_A


def _total_loss_node(L_C, L_O, L_A, w: LossWeights) -> nd.Node:
    return nd.add(nd.add(L_C, nd.scale(L_O, w.lambda_O)), nd.scale(L_A, w.lambda_A))


# --------------------------------------------------------------------------
# objective


def alignment_losses(U_S, U_T, V_S, V_T, config: TrainConfig, vertical=True,
                     horizontal=True):
    """``(L_O, L_A)`` nodes; a disabled branch is the constant 0."""
    if vertical:
        K = config.proxies
        Ms = [typical.select(z, K, config.alpha, config.select_tol, config.select_max_iter)[0]
              for z in (U_S, U_T, V_S, V_T)]
        L_O = ot.vertical_loss(*Ms, epsilon=config.epsilon, tol=config.sinkhorn_tol,
                               max_iter=config.sinkhorn_max_iter)
    else:
        L_O = nd.constant(0.0)
    if horizontal:
        L_A = subspace.horizontal_loss(U_S, U_T, V_S, V_T, nu=config.nu, delta=config.delta)
    else:
        L_A = nd.constant(0.0)
    return L_O, L_A


def objective(params: dict, batch, config: TrainConfig, report_all: bool = False):
    """Build the joint loss graph for one batch.

    Returns ``(root, leaves, parts)`` where ``leaves`` maps parameter names to
    their tape nodes and ``parts`` holds the ``L_C``, ``L_O``, ``L_A`` nodes.
    Alignment branches with zero weight are skipped unless ``report_all``.
    """
    leaves = {k: nd.param(v) for k, v in params.items()}
    act = config.nonlinearity

    def emb(name, side):
        return embed_entities(side.ids, side.histories, side.reviews,
                              tower_params(leaves, name), act)

    U_S = emb("src_user", batch.source.user)
    V_S = emb("src_item", batch.source.item)
    U_T = emb("tgt_user", batch.target.user)
    V_T = emb("tgt_item", batch.target.item)
    head = tower_params(leaves, "head")
    L_C = rating_loss(predict_ratings(U_S, V_S, head, act), batch.source.labels,
                      predict_ratings(U_T, V_T, head, act))
    w = config.weights
    L_O, L_A = alignment_losses(U_S, U_T, V_S, V_T, config,
                                vertical=report_all or w.lambda_O > 0,
                                horizontal=report_all or w.lambda_A > 0)
    root = _total_loss_node(L_C, L_O, L_A, w)
    return root, leaves, {"L_C": L_C, "L_O": L_O, "L_A": L_A,
                          "U_S": U_S, "V_S": V_S, "U_T": U_T, "V_T": V_T}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def train_step(params: dict, batch, adam: AdamState, config: TrainConfig,
               report_all: bool = False):
    """One forward, backward and Adam update; returns ``(params, LossReport)``."""
    try:
        root, leaves, parts = objective(params, batch, config, report_all)
    except nd.NonFiniteError as exc:
        raise NonFiniteLoss(f"non-finite value in forward pass: {exc}", {}) from exc
    comps = {k: parts[k].item() for k in ("L_C", "L_O", "L_A")}
    w = config.weights
    L = total_loss(comps["L_C"], comps["L_O"], comps["L_A"], w)
    if not np.isfinite(L):
        raise NonFiniteLoss("non-finite loss", comps)
    nd.backward(root)
    grads = {k: n.grad for k, n in leaves.items()}
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NonFiniteLoss(f"non-finite gradient in {bad[:3]}", comps)
    new_params = adam.update(params, grads)
    return new_params, LossReport(step=adam.step, L=L, **comps)


# --------------------------------------------------------------------------
# full-catalogue embeddings


def entity_embeddings(params: dict, name: str, histories, reviews,
                      nonlinearity: str = "tanh") -> np.ndarray:
    n = params[f"{name}.E"].shape[0]
    node = embed_entities(np.arange(n), histories, reviews, tower_params(params, name),
                          nonlinearity)
    return node.value


def score_pairs(params: dict, U: np.ndarray, V: np.ndarray, nonlinearity: str = "tanh"):
    return predict_ratings(U, V, tower_params(params, "head"), nonlinearity).value.ravel()


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"CFAA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_arrays(buf, arrays: dict):
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *a.shape))
        buf.write(a.tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def _read_arrays(buf) -> dict:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, ln).decode("utf-8")
        rows, cols = struct.unpack("<II", _read_exact(buf, 8))
        out[name] = np.frombuffer(_read_exact(buf, 8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
    return out


def save_checkpoint(path, params: dict, adam: AdamState, config: dict) -> None:
    """Write parameters, Adam state and a config snapshot to ``path``."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_arrays(buf, params)
    buf.write(struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
    _write_arrays(buf, adam.m)
    _write_arrays(buf, adam.v)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, adam, config)`` from a checkpoint file."""
    buf = io.BytesIO(Path(path).read_bytes())
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (ln,) = struct.unpack("<I", _read_exact(buf, 4))
    config = json.loads(_read_exact(buf, ln).decode("utf-8"))
    params = _read_arrays(buf)
    step, lr, b1, b2, eps = struct.unpack("<Q4d", _read_exact(buf, 40))
    m = _read_arrays(buf)
    v = _read_arrays(buf)
    return params, AdamState(lr, b1, b2, eps, step, m, v), config
