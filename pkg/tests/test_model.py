import io

import numpy as np
import pytest

from cfaa import data, experiment, model
from cfaa import ndmath as nd
from cfaa.model import LossWeights, TrainConfig

from conftest import toy_benchmark


def zero_tower(n, width, d_rev, D):
    return {"E": np.zeros((n, D)), "F_W": np.zeros((width, D)), "F_b": np.zeros((1, D)),
            "G1_W": np.zeros((2 * D + d_rev, D)), "G1_b": np.zeros((1, D)),
            "G2_W": np.zeros((D, D)), "G2_b": np.zeros((1, D))}


# --------------------------------------------------------------------------
# towers and head


def test_zero_fusion_weights_give_zero_embeddings(rng):
    tower = zero_tower(5, 7, 3, 4)
    tower["E"] = rng.normal(size=(5, 4))
    tower["F_W"] = rng.normal(size=(7, 4))
    out = model.embed_entities([0, 3, 4], rng.random((3, 7)), rng.normal(size=(3, 3)), tower)
    assert out.shape == (3, 4)
    assert np.all(out.value == 0.0)


def test_embedding_shape_contract(rng):
    bench = toy_benchmark()
    params = model.init_params(bench.sizes(), bench.d_rev, TrainConfig(D=4))
    ids = np.array([0, 2, 2, 5])
    hist = bench.source.user_hist[ids]
    out = model.embed_entities(ids, hist, bench.source.reviews.users[ids],
                               model.tower_params(params, "src_user"))
    assert out.shape == (4, 4)


def test_hand_computed_forward_single_entity():
    # D = 2, one entity, one history slot, one review feature
    tower = {
        "E": np.array([[1.0, -1.0]]),
        "F_W": np.array([[0.5, 2.0]]),
        "F_b": np.array([[0.0, -1.0]]),
        "G1_W": np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.5], [2.0, -1.0]]),
        "G1_b": np.array([[0.1, -0.2]]),
        "G2_W": np.array([[1.0, 2.0], [-1.0, 0.5]]),
        "G2_b": np.array([[0.0, 0.3]]),
    }
    hist = np.array([[1.0]])
    review = np.array([[0.25]])
    c = np.array([0.5, 1.0])                       # F(history)
    x = np.array([1.0, -1.0, 0.5, 1.0, 0.25])      # E ⊕ C ⊕ H
    h1 = np.tanh([1.0 + 0.5 + 0.5 + 0.1, -1.0 + 0.5 + 0.5 - 0.25 - 0.2])
    expected = [h1[0] - h1[1], 2 * h1[0] + 0.5 * h1[1] + 0.3]
    assert np.allclose(x @ tower["G1_W"] + tower["G1_b"], [[2.1, -0.45]])
    assert np.allclose(hist @ tower["F_W"] + tower["F_b"], [c])
    out = model.embed_entities([0], hist, review, tower).value
    assert np.allclose(out, [expected], rtol=0, atol=1e-15)


def test_out_of_range_index_names_offender(rng):
    tower = zero_tower(5, 7, 3, 4)
    with pytest.raises(IndexError, match="7"):
        model.embed_entities([0, 7], rng.random((2, 7)), rng.normal(size=(2, 3)), tower)
    with pytest.raises(IndexError, match="-1"):
        model.embed_entities([-1], rng.random((1, 7)), rng.normal(size=(1, 3)), tower)


def test_review_width_mismatch_rejected(rng):
    tower = zero_tower(5, 7, 3, 4)
    with pytest.raises(ValueError, match="review width"):
        model.embed_entities([0], rng.random((1, 7)), rng.normal(size=(1, 2)), tower)


def test_zero_head_gives_one_half(rng):
    head = {"W1": np.zeros((8, 3)), "b1": np.zeros((1, 3)), "W2": np.zeros((3, 1)), "b2": np.zeros((1, 1))}
    p = model.predict_ratings(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), head).value
    assert np.all(p == 0.5)


def test_hand_set_one_hidden_unit_head():
    head = {"W1": np.array([[1.0], [-2.0], [0.5], [1.0]]), "b1": np.array([[0.1]]),
            "W2": np.array([[3.0]]), "b2": np.array([[-0.5]])}
    U = np.array([[0.2, 0.4]])
    V = np.array([[-1.0, 0.3]])
    h = np.tanh(0.2 - 0.8 - 0.5 + 0.3 + 0.1)
    expected = 1.0 / (1.0 + np.exp(-(3.0 * h - 0.5)))
    assert model.predict_ratings(U, V, head).value[0, 0] == pytest.approx(expected, abs=1e-15)


def test_predictions_in_open_interval(rng):
    head = {"W1": rng.normal(size=(8, 5)) * 30, "b1": np.zeros((1, 5)),
            "W2": rng.normal(size=(5, 1)) * 30, "b2": np.zeros((1, 1))}
    p = model.predict_ratings(rng.normal(size=(50, 4)), rng.normal(size=(50, 4)), head).value
    assert np.all((p > 0) & (p < 1))


def test_head_shape_mismatch(rng):
    head = {"W1": np.zeros((8, 3)), "b1": np.zeros((1, 3)), "W2": np.zeros((3, 1)), "b2": np.zeros((1, 1))}
    with pytest.raises(nd.ShapeError):
        model.predict_ratings(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), head)


# --------------------------------------------------------------------------
# losses


def test_single_source_pair_bce():
    L = model.rating_loss(np.array([[0.5]]), [1.0], np.zeros((0, 1))).item()
    assert L == pytest.approx(-np.log(0.5), abs=1e-15)
    assert -np.log(0.5) == pytest.approx(0.693147, abs=1e-6)


def test_perfect_fit_reaches_clamp_floor():
    pred_S = np.array([[1.0], [0.0], [1.0]])
    L = model.rating_loss(pred_S, [1, 0, 1], np.ones((4, 1))).item()
    assert 0 < L <= 7 * -np.log1p(-model.PRED_CLAMP) + 1e-15


def test_target_term_depends_only_on_positive_predictions(rng):
    pS = rng.uniform(0.1, 0.9, size=(5, 1))
    r = rng.integers(0, 2, size=5).astype(float)
    pT = rng.uniform(0.1, 0.9, size=(3, 1))
    base = model.rating_loss(pS, r, np.zeros((0, 1))).item()
    full = model.rating_loss(pS, r, pT).item()
    assert full - base == pytest.approx(-np.log(pT).sum(), rel=1e-12)


def test_non_binary_truth_rejected():
    with pytest.raises(ValueError):
        model.rating_loss(np.array([[0.5]]), [0.3], np.array([[0.5]]))


def test_total_loss_ablation_and_defaults():
    assert model.total_loss(1.25, 3.0, 7.0, LossWeights(0.0, 0.0)) == 1.25
    w = LossWeights()
    assert (w.lambda_O, w.lambda_A) == (0.5, 0.8)
    assert TrainConfig().weights == w


def test_total_loss_linear_in_L_O():
    w = LossWeights()
    a = model.total_loss(1.0, 0.375, 2.0, w)
    b = model.total_loss(1.0, 0.75, 2.0, w)
    assert b - a == w.lambda_O * 0.375


def test_arms_reachable_through_weights():
    assert LossWeights.for_arm("base") == LossWeights(0.0, 0.0)
    assert LossWeights.for_arm("v") == LossWeights(0.5, 0.0)
    assert LossWeights.for_arm("h") == LossWeights(0.0, 0.8)
    assert LossWeights.for_arm("full") == LossWeights(0.5, 0.8)
    with pytest.raises(ValueError):
        LossWeights.for_arm("both")
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


# --------------------------------------------------------------------------
# objective and training


def full_objective_fixture(seed=0):
    bench = toy_benchmark(seed, n_users=6, n_items=5, d_rev=3, density=0.9, split=False)
    cfg = TrainConfig(D=4, batch_size=8, K=4, arm="full", seed=seed)
    params = model.init_params(bench.sizes(), bench.d_rev, cfg)
    batch = data.sample_pair(bench.source, bench.target, 8, seed, 0)
    return params, batch, cfg


def test_full_objective_gradient_check():
    params, batch, cfg = full_objective_fixture()
    root, leaves, parts = model.objective(params, batch, cfg)
    assert parts["L_O"].item() > 0 and parts["L_A"].item() > 0
    err = nd.grad_check(root, list(leaves.values()))
    assert err <= 1e-4


def test_fifty_steps_decrease_rating_loss():
    # separable fixture: a source label is the sign of a fixed user-item score
    r = np.random.default_rng(3)
    n_u, n_i = 12, 10
    lu, li = r.normal(size=(n_u, 2)), r.normal(size=(n_i, 2))
    sides = []
    for domain in ("source", "target"):
        u, i = np.divmod(np.arange(n_u * n_i), n_i)
        lab = ((lu[u] * li[i]).sum(1) > 0).astype(int)
        if domain == "target":
            u, i, lab = u[lab == 1], i[lab == 1], lab[lab == 1]
        ds = data.RatingDataset(domain, [str(k) for k in range(n_u)], [str(k) for k in range(n_i)],
                                u, i, lab)
        sides.append(data.DomainData(ds, data.ReviewFeatures(lu, li)))
    bench = experiment.Benchmark(*sides)
    cfg = TrainConfig(D=4, batch_size=32, arm="full", lr=1e-2)
    res = experiment.train(bench, cfg, 50)
    assert res.reports[-1].L_C < res.reports[0].L_C


def test_training_is_bitwise_deterministic():
    bench = toy_benchmark(1)
    cfg = TrainConfig(D=4, batch_size=8, K=4, arm="full")
    a = experiment.train(bench, cfg, 5)
    b = experiment.train(bench, cfg, 5)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert [r.as_dict() for r in a.reports] == [r.as_dict() for r in b.reports]


def test_loss_report_is_bitwise_sum_of_components():
    bench = toy_benchmark(2)
    cfg = TrainConfig(D=4, batch_size=8, K=4, arm="full")
    for rep in experiment.train(bench, cfg, 3).reports:
        assert rep.L == model.total_loss(rep.L_C, rep.L_O, rep.L_A, cfg.weights)


def test_disabled_branches_report_zero():
    bench = toy_benchmark(2)
    rep = experiment.train(bench, TrainConfig(D=4, batch_size=8, arm="base"), 1).reports[0]
    assert rep.L_O == 0.0 and rep.L_A == 0.0 and rep.L == rep.L_C


def test_non_finite_loss_aborts_step():
    params, batch, cfg = full_objective_fixture()
    params = dict(params)
    params["head.W2"] = params["head.W2"] * np.nan
    adam = model.AdamState.for_params(params, cfg)
    with pytest.raises(model.NonFiniteLoss) as info:
        model.train_step(params, batch, adam, cfg)
    assert adam.step == 0
    assert isinstance(info.value.diagnostics, dict)


def test_adam_moment_shapes_match(rng):
    params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 4))}
    adam = model.AdamState.for_params(params, TrainConfig())
    out = adam.update(params, {k: np.ones_like(v) for k, v in params.items()})
    for k in params:
        assert adam.m[k].shape == adam.v[k].shape == params[k].shape
        # first Adam step moves every coordinate by lr against the gradient sign
        assert np.allclose(out[k], params[k] - 1e-3, atol=1e-10)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    bench = toy_benchmark(0)
    cfg = TrainConfig(D=4, batch_size=8, K=4)
    res = experiment.train(bench, cfg, 2)
    path = tmp_path / "ckpt.cfaa"
    model.save_checkpoint(path, res.params, res.adam, {"arm": "full", "D": 4})
    params, adam, config = model.load_checkpoint(path)
    assert config == {"arm": "full", "D": 4}
    assert adam.step == res.adam.step and adam.lr == res.adam.lr
    for k in res.params:
        assert params[k].tobytes() == res.params[k].tobytes()
        assert adam.m[k].tobytes() == res.adam.m[k].tobytes()
        assert adam.v[k].tobytes() == res.adam.v[k].tobytes()
    assert path.read_bytes()[:4] == b"CFAA"


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    bench = toy_benchmark(0)
    cfg = TrainConfig(D=4, batch_size=8, K=4)
    whole = experiment.train(bench, cfg, 4)
    half = experiment.train(bench, cfg, 2)
    model.save_checkpoint(tmp_path / "c", half.params, half.adam, {})
    params, adam, _ = model.load_checkpoint(tmp_path / "c")
    rest = experiment.train(bench, cfg, 2, params=params, adam=adam)
    for k in whole.params:
        assert rest.params[k].tobytes() == whole.params[k].tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    params = {"w": np.ones((2, 2))}
    adam = model.AdamState.for_params(params, TrainConfig())
    path = tmp_path / "c"
    model.save_checkpoint(path, params, adam, {})
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(model.CheckpointError, match="truncated"):
        model.load_checkpoint(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(model.CheckpointError, match="magic"):
        model.load_checkpoint(tmp_path / "magic")
