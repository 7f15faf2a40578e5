import math

import numpy as np
import pytest

from subalign.adaptnet import TrainConfig, build_adaptnet, predict, save_net, train_adaptnet
from subalign.data import DomainDataset, KnowledgeSpec
from subalign.fusion import (
    FusionNet,
    attention_weights,
    build_fusion,
    fuse,
    fusion_assign,
    fusion_flatten,
    fusion_objective,
    fusion_predict,
    load_fusion,
    save_fusion,
    train_fusion,
)
from subalign.metrics import auc
from subalign.nn import MlpParams, grad_check, init_mlp, make_rng


def identity_extractor(dim):
    return MlpParams([(np.eye(dim), np.zeros(dim), "identity")])


def constant_extractor(dim, value=0.3):
    return MlpParams([(np.zeros((dim, dim)), np.full(dim, value), "identity")])


def random_fusion(k, dim, seed=0, task="classification", head_hidden=(5,)):
    rng = make_rng(seed)
    extractors = [init_mlp([dim, dim], rng) for _ in range(k)]
    projections = [rng.normal(size=(1, dim)) for _ in range(k)]
    out_act = "sigmoid" if task == "classification" else "tanh"
    head = init_mlp([dim, *head_hidden, 1], rng, output_activation=out_act)
    return FusionNet(extractors, projections, head, task=task)


def labeled_toy(seed=0, n=60, d=3, rule_col=1):
    """Knowledge column 0 plus d model columns; labels from one model column."""
    rng = make_rng(seed)
    x = rng.normal(size=(n, d + 1))
    y = (x[:, rule_col] > 0).astype(float)
    return DomainDataset(x, y, {"k": (0,)}, "target_train")


def test_attention_rows_sum_to_one():
    rng = make_rng(1)
    fnet = random_fusion(3, 4, seed=2)
    z_list = [rng.normal(size=(9, 4)) for _ in range(3)]
    beta = attention_weights(fnet, z_list)
    assert beta.shape == (9, 3)
    assert np.max(np.abs(beta.sum(axis=1) - 1.0)) <= 1e-12
    assert np.all(beta > 0.0) and np.all(beta < 1.0)


def test_attention_single_branch_is_all_ones():
    rng = make_rng(3)
    fnet = random_fusion(1, 3, seed=4)
    fnet.projections[0][...] = rng.normal(size=(1, 3)) * 10.0
    beta = attention_weights(fnet, [rng.normal(size=(6, 3))])
    assert np.allclose(beta, 1.0)


def test_attention_zero_projections_are_uniform():
    fnet = random_fusion(4, 2, seed=5)
    for w in fnet.projections:
        w[...] = 0.0
    beta = attention_weights(fnet, [make_rng(0).normal(size=(5, 2)) for _ in range(4)])
    assert np.allclose(beta, 0.25)


def test_attention_normalization_arithmetic():
    # scores (0, log(1/3)) give sigmoids (1/2, 1/4) and weights (2/3, 1/3)
    fnet = random_fusion(2, 1, seed=6)
    fnet.projections[0][...] = 1.0
    fnet.projections[1][...] = 1.0
    z1 = np.array([[0.0]])
    z2 = np.array([[math.log(1.0 / 3.0)]])
    beta = attention_weights(fnet, [z1, z2])
    assert beta[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert beta[0, 1] == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_fuse_identity_and_mean():
    rng = make_rng(7)
    z1 = rng.normal(size=(4, 3))
    z2 = rng.normal(size=(4, 3))
    assert np.array_equal(fuse(np.ones((4, 1)), [z1]), z1)
    h = fuse(np.full((4, 2), 0.5), [z1, z2])
    assert np.allclose(h, (z1 + z2) / 2.0)


def test_fuse_stays_in_coordinate_envelope():
    rng = make_rng(8)
    fnet = random_fusion(3, 4, seed=9)
    z_list = [rng.normal(size=(11, 4)) for _ in range(3)]
    beta = attention_weights(fnet, z_list)
    h = fuse(beta, z_list)
    lo = np.minimum.reduce(z_list)
    hi = np.maximum.reduce(z_list)
    assert np.all(h >= lo - 1e-12) and np.all(h <= hi + 1e-12)


def test_fusion_predict_zero_head_gives_half():
    fnet = random_fusion(2, 3, seed=10)
    for w, b, _ in fnet.head.layers:
        w[...] = 0.0
        b[...] = 0.0
    probs = fusion_predict(fnet, make_rng(1).normal(size=(6, 3)))
    assert np.allclose(probs, 0.5)
    assert probs.shape == (6,)


def test_fusion_gradients_match_fd_classification():
    rng = make_rng(11)
    fnet = random_fusion(2, 3, seed=12)
    fusion_assign(fnet, fusion_flatten(fnet) + 0.05 * rng.normal(size=fusion_flatten(fnet).size))
    x = rng.normal(size=(10, 3))
    y = rng.integers(0, 2, size=10).astype(float)

    def loss_fn(vec):
        fusion_assign(fnet, vec)
        loss, grads = fusion_objective(fnet, x, y)
        return loss, np.concatenate([g.ravel() for g in grads])

    assert grad_check(loss_fn, fusion_flatten(fnet), h=1e-5) < 1e-4


def test_fusion_gradients_match_fd_regression():
    rng = make_rng(13)
    fnet = random_fusion(3, 2, seed=14, task="regression")
    fnet.out_center = 2.0
    fnet.out_scale = 1.5
    fusion_assign(fnet, fusion_flatten(fnet) + 0.05 * rng.normal(size=fusion_flatten(fnet).size))
    x = rng.normal(size=(8, 2))
    y = rng.normal(size=8) + 2.0

    def loss_fn(vec):
        fusion_assign(fnet, vec)
        loss, grads = fusion_objective(fnet, x, y)
        return loss, np.concatenate([g.ravel() for g in grads])

    assert grad_check(loss_fn, fusion_flatten(fnet), h=1e-5) < 1e-4


def test_train_fusion_freezes_extractors():
    tgt = labeled_toy(15)
    rng = make_rng(16)
    nets = [build_adaptnet(3, 3, rng, hidden=(4,), lam=0.0) for _ in range(2)]
    fnet = build_fusion(nets, rng, head_hidden=(4,))
    before = [[a.copy() for a in g.arrays()] for g in fnet.extractors]
    cfg = TrainConfig(epochs=15, warmup_epochs=1, batch_size=16, seed=2,
                      learning_rate=0.05)
    _, log = train_fusion(fnet, tgt, cfg)
    assert len(log) >= 1
    for g, snap in zip(fnet.extractors, before):
        for a, b in zip(g.arrays(), snap):
            assert np.array_equal(a, b)


def test_train_fusion_reduces_loss():
    tgt = labeled_toy(17, n=80)
    fnet = random_fusion(2, 3, seed=18)
    fnet.extractors[0] = identity_extractor(3)
    cfg = TrainConfig(epochs=60, warmup_epochs=1, batch_size=16, seed=4,
                      learning_rate=0.1)
    _, log = train_fusion(fnet, tgt, cfg)
    assert log[-1].val < log[0].val


def test_single_branch_fusion_tracks_single_net():
    rng = make_rng(21)
    know = {"k": (0,)}
    sx = rng.normal(size=(80, 5))
    src = DomainDataset(sx, (sx[:, 1] > 0).astype(float), know, "source")
    tx = rng.normal(size=(40, 5))
    tgt = DomainDataset(tx, (tx[:, 1] > 0).astype(float), know, "target_train")
    ex = rng.normal(size=(60, 5))
    ey = (ex[:, 1] > 0).astype(float)
    net = build_adaptnet(4, 3, make_rng(2), hidden=(8,), lam=0.0,
                         knowledge=KnowledgeSpec("k", (0,), m=2))
    cfg = TrainConfig(epochs=60, warmup_epochs=1, batch_size=16, seed=3,
                      learning_rate=0.1)
    train_adaptnet(net, src, tgt, cfg)
    single = auc(predict(net, ex[:, 1:]), ey)
    fnet = build_fusion([net], make_rng(5), head_hidden=(8,))
    fcfg = TrainConfig(epochs=80, warmup_epochs=1, batch_size=16, seed=6,
                       learning_rate=0.1)
    train_fusion(fnet, tgt, fcfg)
    fused = auc(fusion_predict(fnet, ex[:, 1:]), ey)
    assert single > 0.95
    assert abs(single - fused) <= 0.01


def test_degenerate_branch_is_downweighted():
    tgt = labeled_toy(22, n=100)
    rng = make_rng(23)
    extractors = [identity_extractor(3), constant_extractor(3)]
    projections = [0.01 * rng.normal(size=(1, 3)) for _ in range(2)]
    head = init_mlp([3, 6, 1], rng, output_activation="sigmoid")
    fnet = FusionNet(extractors, projections, head)
    cfg = TrainConfig(epochs=150, warmup_epochs=1, batch_size=20, seed=7,
                      learning_rate=0.1)
    train_fusion(fnet, tgt, cfg)
    x = tgt.model_features()
    beta = attention_weights(fnet, [x.copy(), np.full_like(x, 0.3)])
    assert float(beta[:, 1].mean()) < 0.5


def test_regression_scaling_pinned_to_label_range():
    rng = make_rng(24)
    x = rng.normal(size=(50, 4))
    y = 12.0 + 2.0 * np.tanh(x[:, 1])
    tgt = DomainDataset(x, y, {"k": (0,)}, "target_train")
    fnet = random_fusion(2, 3, seed=25, task="regression")
    cfg = TrainConfig(epochs=30, warmup_epochs=1, batch_size=10, seed=8,
                      learning_rate=0.05)
    train_fusion(fnet, tgt, cfg)
    assert fnet.out_center == pytest.approx((y.max() + y.min()) / 2.0)
    assert fnet.out_scale == pytest.approx((y.max() - y.min()) / 2.0)
    preds = fusion_predict(fnet, x[:, 1:])
    assert np.all(preds >= fnet.out_center - fnet.out_scale)
    assert np.all(preds <= fnet.out_center + fnet.out_scale)


def test_build_fusion_rejects_mixed_tasks():
    rng = make_rng(26)
    a = build_adaptnet(3, 2, rng, task="classification")
    b = build_adaptnet(3, 2, rng, task="regression")
    with pytest.raises(ValueError, match="share the task"):
        build_fusion([a, b], rng)


def test_fusion_net_rejects_mismatched_dims():
    rng = make_rng(27)
    extractors = [init_mlp([3, 2], rng), init_mlp([3, 4], rng)]
    projections = [rng.normal(size=(1, 2)), rng.normal(size=(1, 4))]
    head = init_mlp([2, 1], rng, output_activation="sigmoid")
    with pytest.raises(ValueError, match="embedding dimension"):
        FusionNet(extractors, projections, head)


def test_attention_rejects_wrong_block_count():
    fnet = random_fusion(2, 3, seed=28)
    with pytest.raises(ValueError, match="expected 2"):
        attention_weights(fnet, [np.zeros((3, 3))])


def test_save_load_round_trip(tmp_path):
    tgt = labeled_toy(29)
    rng = make_rng(30)
    spec_a = KnowledgeSpec("ka", (0,), m=2)
    spec_b = KnowledgeSpec("kb", (0,), m=2)
    nets = [
        build_adaptnet(3, 3, rng, hidden=(4,), lam=0.1, knowledge=spec_a),
        build_adaptnet(3, 3, rng, hidden=(4,), lam=0.1, knowledge=spec_b),
    ]
    paths = []
    for i, net in enumerate(nets):
        p = tmp_path / ("component_%d.txt" % i)
        save_net(net, p)
        paths.append(p)
    fnet = build_fusion(nets, rng, head_hidden=(4,))
    cfg = TrainConfig(epochs=5, warmup_epochs=1, batch_size=16, seed=9,
                      learning_rate=0.05)
    train_fusion(fnet, tgt, cfg)
    manifest = tmp_path / "fusion.txt"
    save_fusion(fnet, manifest, paths)
    loaded = load_fusion(manifest)
    assert loaded.task == fnet.task
    assert loaded.k == 2
    x = tgt.model_features()
    assert np.array_equal(fusion_predict(loaded, x), fusion_predict(fnet, x))
