import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simtrans.classifier import (
    ClassifierHistory,
    ClassifierModel,
    accuracy,
    class_balance_weights,
    evaluate_accuracy,
    graph_reg_loss,
    init_classifier,
    load_classifier,
    save_classifier,
    train_classifier,
    weighted_ce_loss,
)
from simtrans.config import TrainConfig
from simtrans.denoise import SimilarityMatrix
from simtrans.numcore import Layer, MlpParams, ShapeError, grad_check, mlp_backward, mlp_forward, softmax_ce
from simtrans.simnet import init_simnet
from simtrans.synthdata import ConfigurationError, TrainView

CFG = TrainConfig(hidden_dim=8, embed_dim=4, relation_dim=6, epochs=3, batch_size=16, lr=0.05)


def blobs(cats, per, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, size=(len(cats), dim))
    feats = np.vstack([centers[k] + rng.normal(0, 0.5, size=(per, dim)) for k in range(len(cats))])
    return TrainView(feats, np.repeat(cats, per))


def frozen_simnet(seed=0, dim=3):
    return init_simnet(dim, CFG, np.random.default_rng(seed))


def test_weighted_ce_examples():
    loss, _ = weighted_ce_loss(np.array([[0.0, 0.0]]), [1], [2.0])
    assert loss == pytest.approx(2 * math.log(2)) and loss == pytest.approx(1.3863, abs=1e-4)


def test_unit_weights_match_plain_ce():
    z = np.random.default_rng(0).normal(size=(6, 4))
    y = [0, 1, 2, 3, 0, 1]
    loss, _ = weighted_ce_loss(z, y, np.ones(6))
    assert loss == pytest.approx(softmax_ce(z, y)[0].mean())


def test_zero_weight_sample_is_invisible():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 3))
    y = [0, 1, 2, 0, 1]
    w = np.array([1.0, 0.5, 0.0, 2.0, 1.0])
    loss, grad = weighted_ce_loss(z, y, w)
    assert not grad[2].any()
    keep = [0, 1, 3, 4]
    sub, _ = weighted_ce_loss(z[keep], [y[k] for k in keep], w[keep])
    assert loss == pytest.approx(sub * 4 / 5)


def test_weighted_ce_errors():
    with pytest.raises(IndexError):
        weighted_ce_loss(np.zeros((1, 2)), [2], [1.0])
    with pytest.raises(ShapeError):
        weighted_ce_loss(np.zeros((2, 2)), [0, 1], [1.0])


def test_weighted_ce_gradient():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, size=8)
    w = rng.uniform(0, 2, size=8)
    _, g = weighted_ce_loss(z, y, w)
    assert grad_check(lambda: weighted_ce_loss(z, y, w)[0], [z], [g]) < 1e-3


def test_graph_reg_examples():
    h = np.array([[0.0, 0.0], [1.0, 0.0]])
    S = np.array([[0.0, 0.5], [0.5, 0.0]])
    assert graph_reg_loss(h, S, normalize=False)[0] == pytest.approx(1.0)
    assert graph_reg_loss(h, S)[0] == pytest.approx(0.25)


def test_graph_reg_trivial_cases():
    loss, grad = graph_reg_loss(np.ones((4, 3)), np.random.default_rng(0).uniform(size=(4, 4)))
    assert loss == 0.0 and np.allclose(grad, 0)
    loss, grad = graph_reg_loss(np.random.default_rng(1).normal(size=(4, 3)), np.zeros((4, 4)))
    assert loss == 0.0 and not grad.any()


def test_graph_reg_shape_error():
    with pytest.raises(ShapeError):
        graph_reg_loss(np.zeros((3, 2)), np.zeros((2, 2)))


@pytest.mark.parametrize("normalize", [True, False])
def test_graph_reg_gradient(normalize):
    rng = np.random.default_rng(3)
    h = rng.normal(size=(8, 4))
    S = rng.uniform(size=(8, 8))
    _, g = graph_reg_loss(h, S, normalize)
    assert grad_check(lambda: graph_reg_loss(h, S, normalize)[0], [h], [g]) < 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_graph_reg_step_pulls_neighbours_together(M, seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(M, 3))
    S = rng.uniform(size=(M, M))
    loss, g = graph_reg_loss(h, S, normalize=False)
    if np.abs(g).max() < 1e-9:
        return
    lr = 1e-3 / (1 + np.abs(S).sum())
    assert graph_reg_loss(h - lr * g, S, normalize=False)[0] < loss


def test_class_balance_examples():
    np.testing.assert_allclose(class_balance_weights([5, 5, 5]), 1.0)
    assert class_balance_weights([7])[0] == pytest.approx(1.0)
    m = class_balance_weights([30, 1000])
    np.testing.assert_allclose(m, [1.9417, 0.0583], atol=1e-4)
    assert m[0] / m[1] == pytest.approx(1000 / 30)
    with pytest.raises(ConfigurationError):
        class_balance_weights([3, 0])


def full_loss_parts(model, x, y, w, S, alpha):
    acts_b = mlp_forward(model.backbone, x)
    acts_h = mlp_forward(model.head, acts_b[-1])
    l_cls, g_logits = weighted_ce_loss(acts_h[-1], y, w)
    l_reg, g_reg = graph_reg_loss(acts_b[-1], S)
    g_head, g_emb = mlp_backward(model.head, acts_h, g_logits)
    g_bb, _ = mlp_backward(model.backbone, acts_b, g_emb + alpha * g_reg)
    return l_cls + alpha * l_reg, g_bb + g_head


def test_full_objective_gradient():
    rng = np.random.default_rng(4)
    model = init_classifier(3, [0, 1, 2], CFG, rng)
    x = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, size=8)
    w = rng.uniform(0, 2, size=8)
    S = rng.uniform(size=(8, 8))
    _, grads = full_loss_parts(model, x, y, w, S, 0.7)
    err = grad_check(lambda: full_loss_parts(model, x, y, w, S, 0.7)[0], model.arrays(), grads)
    assert err < 1e-3


def test_reg_without_similarity_is_an_error():
    with pytest.raises(ConfigurationError):
        train_classifier(blobs([0, 1], 10), None, None, CFG)


def train_with_history(cfg, view, weights=None, sim=None, **kw):
    h = ClassifierHistory()
    model = train_classifier(view, weights, sim, cfg, history=h, **kw)
    return model, h


def test_logged_full_loss_decomposes():
    view = blobs([3, 4, 5], 20)
    weights = np.random.default_rng(5).uniform(0.5, 1.5, size=60)
    _, h = train_with_history(CFG, view, weights, frozen_simnet())
    assert len(h.steps) == CFG.epochs * 4
    for row in h.steps:
        assert abs(row["L_full"] - (row["L_cls_w"] + CFG.alpha * row["L_reg_norm"])) < 1e-12
        assert row["L_reg_norm"] > 0
    assert [r["epoch"] for r in h.epochs] == [0, 1, 2]


def test_toggles_off_match_plain_ce():
    view = blobs([3, 4], 20)
    plain = replace(CFG, use_weights=False, use_reg=False)
    a, _ = train_with_history(plain, view, np.full(40, 3.0), frozen_simnet())
    b, _ = train_with_history(plain, view)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))


def test_zero_alpha_matches_reg_off():
    view = blobs([3, 4], 20)
    _, h_on = train_with_history(replace(CFG, alpha=0.0), view, sim=frozen_simnet())
    _, h_off = train_with_history(replace(CFG, use_reg=False), view, sim=frozen_simnet())
    assert [r["L_full"] for r in h_on.steps] == [r["L_full"] for r in h_off.steps]
    assert [r["L_cls_w"] for r in h_on.steps] == [r["L_cls_w"] for r in h_off.steps]


def test_generalized_with_empty_base_is_weakshot():
    view = blobs([3, 4, 5], 12)
    view = TrainView(view.features[:-5], view.labels[:-5])  # unequal counts
    sim = frozen_simnet()
    empty = TrainView(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    a = train_classifier(view, None, sim, CFG)
    b = train_classifier(view, None, sim, replace(CFG, mode="generalized"), base_train=empty)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))


def test_generalized_head_covers_base_and_novel():
    base, novel = blobs([0, 1], 10, seed=1), blobs([2, 3, 4], 30, seed=2)
    cfg = replace(CFG, mode="generalized", use_reg=False)
    model = train_classifier(novel, None, None, cfg, base_train=base)
    assert model.categories == [0, 1, 2, 3, 4]
    assert model.head.layers[-1].weight.shape[0] == 5


def test_weight_scale_and_lr_rescale_agree_after_one_step():
    view = blobs([3, 4], 8)
    cfg = replace(CFG, epochs=1, batch_size=16, use_reg=False, weight_decay=0.0)
    w = np.random.default_rng(6).uniform(0.5, 1.5, size=16)
    a = train_classifier(view, w, None, cfg)
    b = train_classifier(view, 4.0 * w, None, replace(cfg, lr=cfg.lr / 4.0))
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)
    assert np.array_equal(a.predict(view.features), b.predict(view.features))


def test_callable_similarity_sees_novel_indices():
    base, novel = blobs([0], 10, seed=3), blobs([1, 2], 10, seed=4)
    seen = []

    def sim(idx, feats):
        seen.append(np.asarray(idx))
        return SimilarityMatrix(np.ones((len(feats), len(feats))), "oracle")

    train_classifier(novel, None, sim, replace(CFG, mode="generalized", epochs=1),
                     base_train=base)
    allidx = np.concatenate(seen)
    assert sorted(allidx.tolist()) == list(range(-10, 20))


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert accuracy([9, 9], [1, 2]) == 0.0
    with pytest.raises(ConfigurationError):
        accuracy([], [])


def test_oracle_and_constant_logits():
    dim = 4
    ident = MlpParams([Layer(np.eye(dim), np.zeros(dim), "identity")])
    model = ClassifierModel(ident, MlpParams([Layer(np.eye(dim), np.zeros(dim), "identity")]),
                            [10, 11, 12, 13])
    x = np.eye(dim)[[0, 1, 2, 3, 1]]
    labels = np.array([10, 11, 12, 13, 11])
    assert evaluate_accuracy(model, TrainView(x, labels)) == 100.0
    flat = ClassifierModel(ident, MlpParams([Layer(np.zeros((dim, dim)), np.zeros(dim), "identity")]),
                           [10, 11, 12, 13])
    uniform = np.tile([10, 11, 12, 13], 5)
    assert evaluate_accuracy(flat, TrainView(np.zeros((20, dim)), uniform)) == 25.0
    with pytest.raises(ConfigurationError):
        evaluate_accuracy(model, TrainView(np.zeros((0, dim)), np.zeros(0, dtype=int)))


def test_training_learns_clean_blobs():
    view = blobs([0, 1, 2], 40, seed=7)
    cfg = replace(CFG, use_reg=False, epochs=30)
    model = train_classifier(view, None, None, cfg)
    assert evaluate_accuracy(model, view) > 95


def test_classifier_round_trip(tmp_path):
    model = init_classifier(3, [4, 5], CFG, np.random.default_rng(8))
    save_classifier(model, tmp_path / "c.txt")
    back = load_classifier(tmp_path / "c.txt", [4, 5])
    x = np.random.default_rng(9).normal(size=(6, 3))
    assert back.logits(x).tobytes() == model.logits(x).tobytes()
