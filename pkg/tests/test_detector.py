import json

import numpy as np
import pytest

from cfad.detector import (DetectorConfig, DetectorParams, DiscriminatorParams, Threshold,
                           anomaly_score, anomaly_scores, discriminator_accuracy, encode,
                           finetune_adversarial, fit_threshold, init_detector, predict,
                           predict_scores, pretrain, reconstruct)
from cfad.numerics import ContractError

CFG = DetectorConfig(pretrain_epochs=5, finetune_epochs=2, batch_size=32)


def data(n=200, m=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, m)) * np.arange(1, m + 1) + 3.0


@pytest.fixture(scope="module")
def trained():
    return pretrain(data(), CFG)


def test_shapes(trained):
    x = data(7)
    assert encode(trained, x).shape == (7, 8)
    assert reconstruct(trained, x).shape == (7, 5)
    assert anomaly_scores(trained, x).shape == (7,)
    assert isinstance(anomaly_score(trained, x[0]), float)
    with pytest.raises(ContractError):
        anomaly_score(trained, x)
    with pytest.raises(ContractError):
        anomaly_scores(trained, np.zeros((3, 4)))


def test_raw_scale_by_default_and_optional_standardization(trained):
    x = data()
    assert np.array_equal(trained.center, np.zeros(5)) and np.array_equal(trained.scale, np.ones(5))
    p = pretrain(x, DetectorConfig(pretrain_epochs=1, standardize=True))
    assert np.allclose(p.center, x.mean(axis=0))
    assert np.allclose(p.scale, x.std(axis=0))


def test_pretrain_loss_decreases_and_is_deterministic(trained):
    losses = [h["loss"] for h in trained.history]
    assert losses[-1] < losses[0]
    assert all(h["stage"] == "pretrain" for h in trained.history)
    again = pretrain(data(), CFG)
    assert all(np.array_equal(again.weights[k], trained.weights[k]) for k in trained.weights)


def test_pretrain_rejects_empty():
    with pytest.raises(ContractError):
        pretrain(np.zeros((0, 3)), CFG)


def test_scores_are_squared_error_in_scaled_space():
    p = init_detector(3, CFG, center=np.ones(3), scale=np.full(3, 2.0))
    x = np.array([[1.0, 3.0, -1.0]])
    xs = (x - 1.0) / 2.0
    assert anomaly_scores(p, x)[0] == pytest.approx(np.sum((xs - reconstruct(p, x)) ** 2))


def test_threshold_and_predictions(trained):
    x = data(seed=1)
    th = fit_threshold(trained, x, 0.9)
    s = anomaly_scores(trained, x)
    assert th.tau in s
    assert np.array_equal(predict_scores(s, th), (s > th.tau).astype(int))
    assert predict_scores([th.tau], th)[0] == 0
    assert predict_scores([th.tau + 1e-9], th)[0] == 1
    assert predict_scores([th.tau - 1e-9], th.tau)[0] == 0
    assert isinstance(predict(trained, th, x[0]), int)
    assert predict(trained, th, x).shape == (200,)
    with pytest.raises(ContractError):
        fit_threshold(trained, np.zeros((0, 5)))


def test_finetune_copies_and_tags(trained):
    x = data()
    x_cf = x + np.r_[1.0, 0, 0, 0, 0]
    before = {k: v.copy() for k, v in trained.weights.items()}
    tuned, disc = finetune_adversarial(trained, x, x_cf, lambda_fair=1.0, config=CFG)
    assert all(np.array_equal(before[k], trained.weights[k]) for k in before)
    assert trained.stage == "pretrained" and tuned.stage == "finetuned"
    stages = [h["stage"] for h in tuned.history]
    assert stages.count("finetune") == CFG.finetune_epochs
    assert all("critic" in h for h in tuned.history if h["stage"] == "finetune")
    assert not all(np.array_equal(before[k], tuned.weights[k]) for k in before)
    assert np.array_equal(tuned.center, trained.center)
    assert 0.0 <= discriminator_accuracy(tuned, disc, x, x_cf) <= 1.0


def test_finetune_zero_lambda_matches_reconstruction_only(trained):
    x = data()
    x_cf = x[::-1].copy()
    a, _ = finetune_adversarial(trained, x, x_cf, lambda_fair=0.0, config=CFG)
    b, _ = finetune_adversarial(trained, x, -x_cf, lambda_fair=0.0, config=CFG)
    # with lambda = 0 the counterfactual rows cannot influence the autoencoder
    assert all(np.allclose(a.weights[k], b.weights[k]) for k in a.weights)


def test_finetune_rejects_misaligned(trained):
    with pytest.raises(ContractError):
        finetune_adversarial(trained, data(), data(n=199), config=CFG)


def test_json_round_trip(trained):
    x = data(seed=2)
    tuned, disc = finetune_adversarial(trained, x, x + 0.5, config=CFG)
    back = DetectorParams.from_dict(json.loads(json.dumps(tuned.to_dict())))
    assert np.array_equal(anomaly_scores(back, x), anomaly_scores(tuned, x))
    assert back.stage == "finetuned"
    d2 = DiscriminatorParams.from_dict(json.loads(json.dumps(disc.to_dict())))
    assert all(np.array_equal(d2.weights[k], disc.weights[k]) for k in disc.weights)
    assert Threshold(1.5, 0.9).to_dict() == {"tau": 1.5, "q": 0.9, "source": "train"}


def test_memorizes_a_single_point():
    x = np.tile([[0.3, -0.2, 0.5]], (64, 1))
    p = pretrain(x, DetectorConfig(pretrain_epochs=300, batch_size=64, lr_pretrain=1e-2))
    assert anomaly_score(p, x[0]) < 1e-4


def test_zero_epochs_is_initialization():
    x = data()
    p = pretrain(x, DetectorConfig(pretrain_epochs=0))
    init = init_detector(5, DetectorConfig())
    assert all(np.array_equal(p.weights[k], init.weights[k]) for k in init.weights)


def test_threshold_extremes_and_batch_purity(trained):
    x = data(seed=3)
    s = anomaly_scores(trained, x)
    top = fit_threshold(trained, x, 1.0)
    assert top.tau == s.max() and not predict(trained, top, x).any()
    bottom = fit_threshold(trained, x, 0.0)
    assert predict(trained, bottom, x).sum() == np.sum(s > s.min())
    th = fit_threshold(trained, x, 0.9)
    batch = predict(trained, th, x)
    assert [predict(trained, th, row) for row in x] == batch.tolist()
    assert anomaly_score(trained, np.full(5, 100.0)) > th.tau


def test_adversarial_gradients_match_finite_differences():
    from cfad import numerics as nx
    from cfad.detector import ae_loss, critic_loss, init_discriminator
    cfg = DetectorConfig(hidden=3, bottleneck=2, disc_hidden=3)
    rng = np.random.default_rng(0)
    p, disc = init_detector(4, cfg), init_discriminator(cfg)
    xs, xs_cf = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))

    def total(w):
        return nx.add(ae_loss(w, xs), nx.mul(critic_loss(w, disc.weights, xs, xs_cf), 0.7))

    nodes = {k: nx.Node(v) for k, v in p.weights.items()}
    names = list(nodes)
    grads = nx.backward(total(nodes), [nodes[k] for k in names])
    for k, g in zip(names, grads):
        fd = nx.finite_difference_grad(lambda v, k=k: float(total({**p.weights, k: v}).value), p.weights[k])
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)
    # discriminator step: gradients only reach the discriminator
    dnodes = {k: nx.Node(v) for k, v in disc.weights.items()}
    dnames = list(dnodes)
    dgrads = nx.backward(critic_loss(p.weights, dnodes, xs, xs_cf), [dnodes[k] for k in dnames])
    for k, g in zip(dnames, dgrads):
        def f(v, k=k):
            return float(critic_loss(p.weights, {**disc.weights, k: v}, xs, xs_cf).value)
        fd = nx.finite_difference_grad(f, disc.weights[k])
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)
    # the reconstruction loss does not touch the discriminator
    assert all(not k.startswith("disc.") for k in p.weights)
