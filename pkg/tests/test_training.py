import numpy as np
import pytest

from neurofuse import architecture as A
from neurofuse.training import (
    DEFAULT_EPOCHS,
    OptimizerState,
    TrainConfig,
    freeze_mask,
    pair_encodings,
    predict,
    sgd_momentum_step,
    train,
    train_cascade,
)

from conftest import MICRO


def _step(theta, g, state, lr=0.01, mu=0.9, mask=None):
    mask = mask or {k: True for k in theta}
    return sgd_momentum_step(theta, g, state, lr, mu, mask)


def test_momentum_two_step_trace():
    theta = {"w": np.zeros(1)}
    g = {"w": np.ones(1)}
    state = OptimizerState()
    theta1, state = _step(theta, g, state)
    assert state.velocity["w"][0] == pytest.approx(1.0)
    assert theta1["w"][0] == pytest.approx(-0.01)
    theta2, state = _step(theta1, g, state)
    assert state.velocity["w"][0] == pytest.approx(1.9)
    assert theta2["w"][0] - theta1["w"][0] == pytest.approx(-0.019)


def test_zero_momentum_equals_plain_sgd():
    rng = np.random.default_rng(0)
    theta = {"w": rng.standard_normal(5)}
    plain = theta["w"].copy()
    state = OptimizerState()
    for _ in range(7):
        g = {"w": rng.standard_normal(5)}
        theta, state = _step(theta, g, state, lr=0.1, mu=0.0)
        plain = plain - 0.1 * g["w"]
    assert theta["w"].tobytes() == plain.tobytes()


def test_masked_parameter_unchanged_after_100_steps():
    rng = np.random.default_rng(0)
    theta = {"frozen": rng.standard_normal(4), "live": rng.standard_normal(4)}
    before = theta["frozen"].tobytes()
    state = OptimizerState()
    mask = {"frozen": False, "live": True}
    for _ in range(100):
        g = {k: rng.standard_normal(4) for k in theta}
        theta, state = _step(theta, g, state, mask=mask)
    assert theta["frozen"].tobytes() == before
    assert "frozen" not in state.velocity


def test_step_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        _step({"w": np.zeros(3)}, {"w": np.zeros(2)}, OptimizerState())


def test_freeze_masks():
    names = ["block1.conv.weight", "block1.norm.gamma", "fc1.weight", "fc2.bias", "head.fc1.weight"]
    assert not any(freeze_mask(names, "baseline").values())
    assert all(freeze_mask(names, "retrain").values())
    ft = freeze_mask(names, "fine_tune")
    assert [ft[n] for n in names] == [False, False, True, True, False]
    cas = freeze_mask(names, "cascade")
    assert [n for n in names if cas[n]] == ["head.fc1.weight"]
    with pytest.raises(ValueError):
        freeze_mask(names, "partial")


def test_config_defaults_and_validation():
    cfg = TrainConfig(transfer_mode="cascade")
    assert (cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.epochs) == (4, 0.01, 0.9, 200)
    assert TrainConfig().epochs == DEFAULT_EPOCHS["retrain"]
    for bad in ({"transfer_mode": "x"}, {"learning_rate": 0}, {"momentum": 1.0}, {"batch_size": 0}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def pretrained():
    return A.build_network(seed=3, channels=MICRO)


def test_baseline_leaves_network_unchanged(pretrained, eight_examples):
    res = train(pretrained, eight_examples[:4], TrainConfig(transfer_mode="baseline", epochs=1))
    for k, v in pretrained.state().items():
        assert res.model.state()[k].tobytes() == v.tobytes()


def test_fine_tune_freezes_backbone(pretrained, eight_examples):
    cfg = TrainConfig(transfer_mode="fine_tune", epochs=2, batch_size=2, augment=False, select_best=False)
    res = train(pretrained, eight_examples[:4], cfg)
    after = res.model.state()
    for k, v in pretrained.state().items():
        if k.startswith("block"):
            assert after[k].tobytes() == v.tobytes(), k
        else:
            assert after[k].tobytes() != v.tobytes(), k


def test_train_does_not_mutate_input(pretrained, eight_examples):
    before = {k: v.copy() for k, v in pretrained.state().items()}
    train(pretrained, eight_examples[:2], TrainConfig(epochs=1, batch_size=2))
    for k, v in before.items():
        assert pretrained.state()[k].tobytes() == v.tobytes()
    assert all(t.grad is None for t in pretrained.params.values())


def test_training_is_reproducible(pretrained, eight_examples):
    cfg = TrainConfig(epochs=1, batch_size=3, seed=4)
    a = train(pretrained, eight_examples[:5], cfg, validation=eight_examples[5:])
    b = train(pretrained, eight_examples[:5], cfg, validation=eight_examples[5:])
    for k, v in a.model.state().items():
        assert b.model.state()[k].tobytes() == v.tobytes()
    assert a.log == b.log


def test_log_rows_and_last_partial_batch(pretrained, eight_examples):
    res = train(pretrained, eight_examples[:5], TrainConfig(epochs=2, batch_size=4), validation=eight_examples[5:])
    assert [(r["epoch"], r["split"]) for r in res.log] == [
        (0, "train"), (0, "validation"), (1, "train"), (1, "validation")
    ]
    assert res.best_epoch in (0, 1)


def test_empty_training_set_rejected(pretrained):
    with pytest.raises(ValueError):
        train(pretrained, [], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(pretrained, [], TrainConfig(transfer_mode="cascade"))


def test_retrain_loss_decreases(eight_examples):
    net = A.build_network(seed=0, channels=MICRO)
    cfg = TrainConfig(epochs=6, batch_size=4, augment=False, select_best=False)
    res = train(net, eight_examples, cfg)
    losses = [r["loss"] for r in res.log]
    assert losses[-1] < losses[0]
    assert predict(res.model, eight_examples).shape == (8, 3)


def _encodings(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    centers = rng.standard_normal((3, 1024))
    t1 = {f"s{i}": centers[y[i]] + 0.1 * rng.standard_normal(1024) for i in range(n)}
    fl = {f"s{i}": rng.standard_normal(1024) for i in range(n)}
    return t1, fl, {f"s{i}": int(y[i]) for i in range(n)}


def test_cascade_overfits_eight_pairs():
    t1, fl, y = _encodings(8, 0)
    for mode in A.CASCADE_MODES:
        head = A.build_cascade_head(mode, seed=1)
        res = train_cascade(head, t1, fl, y, TrainConfig(transfer_mode="cascade", epochs=30, select_best=False))
        assert res.log[-1]["accuracy"] == 1.0


def test_cascade_zero_epochs_unchanged():
    t1, fl, y = _encodings(4, 1)
    head = A.build_cascade_head("additive", seed=1)
    res = train_cascade(head, t1, fl, y, TrainConfig(transfer_mode="cascade", epochs=0))
    assert res.log == []
    for k, v in head.state().items():
        assert res.model.state()[k].tobytes() == v.tobytes()


def test_cascade_rejects_unpaired_and_wrong_mode():
    t1, fl, y = _encodings(4, 2)
    del fl["s2"]
    with pytest.raises(ValueError, match="s2"):
        pair_encodings(t1, fl, y)
    with pytest.raises(ValueError):
        train_cascade(A.build_cascade_head("additive"), t1, t1, y, TrainConfig(epochs=1))
