import math

import numpy as np
import pytest

import qapnet.nn as nn_mod
from gradcheck import max_fd_error, random_problem, separable_task, torch_surrogate_grads
from qapnet import metrics
from qapnet.data import Dataset
from qapnet.nn import (
    Adam,
    MLPConfig,
    TrainConfig,
    adam_step,
    cross_entropy,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from qapnet.quant import QuantSpec


def _same_state(a, b):
    sa, sb = a.state(), b.state()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


class TestInit:
    def test_weight_counts(self):
        m = init_model(MLPConfig(), QuantSpec.uniform(6), seed=0)
        assert [d.weight.size for d in m.dense_layers] == [1024, 2048, 1024, 160]
        assert m.weight_count() == 4256

    def test_no_hidden_layers(self):
        m = init_model(MLPConfig(16, [], 5), seed=0)
        assert len(m.blocks) == 1 and m.weight_count() == 80

    def test_deterministic(self):
        a = init_model(MLPConfig(), seed=3)
        b = init_model(MLPConfig(), seed=3)
        assert _same_state(a, b)
        assert not _same_state(a, init_model(MLPConfig(), seed=4))

    def test_bounds_and_defaults(self):
        m = init_model(MLPConfig(), seed=0)
        for d in m.dense_layers:
            bound = math.sqrt(6 / d.weight.shape[1])
            assert np.abs(d.weight).max() <= bound
            assert np.all(d.bias == 0) and d.mask.all()
        for b in m.blocks[:-1]:
            assert np.all(b.bn.gamma == 1) and np.all(b.bn.running_var == 1)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            MLPConfig(16, [0], 5)
        with pytest.raises(ValueError):
            MLPConfig(l1_lambda=-1)
        with pytest.raises(ValueError):
            TrainConfig(patience=0)


class TestForward:
    def test_zero_input(self):
        m = init_model(MLPConfig(4, [3, 3], 2, use_bn=False), seed=0)
        logits, hidden = m.forward(np.zeros((2, 4)))
        assert all(np.all(h == 0) for h in hidden) and np.all(logits == 0)

    def test_eval_repeatable(self):
        m = init_model(MLPConfig(), QuantSpec.uniform(6), seed=0)
        x = np.random.default_rng(0).standard_normal((32, 16))
        np.testing.assert_array_equal(m.forward(x)[0], m.forward(x)[0])

    def test_hand_arithmetic(self):
        m = init_model(MLPConfig(1, [1], 1, use_bn=False), seed=0)
        m.dense_layers[0].weight[:] = 2.0
        _, hidden = m.forward(np.array([[3.0]]))
        assert hidden[0][0, 0] == 6.0

    def test_shape_mismatch(self):
        m = init_model(MLPConfig(), seed=0)
        with pytest.raises(ValueError):
            m.forward(np.zeros((2, 15)))

    def test_masked_weight_invariance(self):
        m = init_model(MLPConfig(), QuantSpec.uniform(6), seed=1)
        d = m.dense_layers[1]
        d.mask[3, 4] = False
        d.weight[3, 4] = 0.0
        x = np.random.default_rng(1).standard_normal((16, 16))
        before = m.forward(x)[0]
        d.weight[3, 4] = 123.0
        np.testing.assert_array_equal(m.forward(x)[0], before)

    def test_bn_eval_is_affine(self):
        m = init_model(MLPConfig(3, [4], 2), seed=0)
        bn = m.blocks[0].bn
        rng = np.random.default_rng(0)
        bn.running_mean[:] = rng.normal(size=4)
        bn.running_var[:] = rng.uniform(0.5, 2, 4)
        bn.gamma[:] = rng.normal(size=4)
        f = lambda z: nn_mod._bn_forward(bn, z, "eval", False, {})  # noqa: E731
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        alpha = 0.3
        np.testing.assert_allclose(f(alpha * a + (1 - alpha) * b), alpha * f(a) + (1 - alpha) * f(b), atol=1e-12)
        expected = bn.gamma * (a - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + bn.beta
        np.testing.assert_allclose(f(a), expected, rtol=1e-14)


class TestLoss:
    def test_uniform_logits(self):
        assert cross_entropy(np.zeros((7, 5)), np.arange(7) % 5) == pytest.approx(math.log(5), abs=1e-12)

    def test_no_penalty(self):
        m = init_model(MLPConfig(4, [3], 2, l1_lambda=0.0), seed=0)
        logits = np.random.default_rng(0).standard_normal((6, 2))
        L, lc = m.loss(logits, np.zeros(6, dtype=int))
        assert L == lc

    def test_hand_arithmetic(self):
        m = init_model(MLPConfig(1, [], 1, l1_lambda=0.1), seed=0)
        m.dense_layers[0].weight[:] = -3.0
        # a single class makes L_c zero, so shift the logits by hand
        L, lc = m.loss(np.array([[0.0]]), np.array([0]))
        assert lc == 0.0 and L == pytest.approx(0.3, abs=1e-15)
        assert 1.0 + m.l1_penalty() == pytest.approx(1.3, abs=1e-15)

    def test_penalty_ignores_masked(self):
        m = init_model(MLPConfig(2, [], 1, l1_lambda=1.0), seed=0)
        m.dense_layers[0].weight[:] = [[2.0, 5.0]]
        m.dense_layers[0].mask[:] = [[True, False]]
        assert m.l1_penalty() == 2.0

    def test_stable_for_huge_logits(self):
        assert math.isfinite(cross_entropy(np.array([[1e4, -1e4, 0.0]]), np.array([1])))


class TestBackward:
    @pytest.mark.parametrize("seed", range(6))
    def test_finite_differences(self, seed):
        model, x, y = random_problem(seed)
        assert max_fd_error(model, x, y) < 1e-4

    def test_clamp_only_surrogate_finite_differences(self):
        # the surrogate is piecewise smooth, so FD still applies away from kinks
        model, x, y = random_problem(11, quant=6, use_bn=True)
        model.rounding = False
        assert max_fd_error(model, x, y, h=1e-7) < 1e-4

    def test_masked_weight_gradient_zero(self):
        model, x, y = random_problem(2, l1=0.05)
        _, _, grads = model.backward(x, y)
        for i, d in enumerate(model.dense_layers):
            assert np.all(grads[f"dense{i}.weight"][~d.mask] == 0.0)

    def test_l1_subgradient(self):
        m = init_model(MLPConfig(1, [], 2, use_bn=False, l1_lambda=0.25), seed=0)
        m.dense_layers[0].weight[:] = [[2.0], [0.0]]
        # zero input cuts the data path, leaving only the penalty
        _, _, grads = m.backward(np.zeros((3, 1)), np.array([0, 1, 0]))
        assert grads["dense0.weight"].ravel().tolist() == [0.25, 0.0]

    @pytest.mark.parametrize("seed", range(4))
    def test_ste_matches_autograd_surrogate(self, seed):
        pytest.importorskip("torch")
        model, x, y = random_problem(100 + seed, quant=int(4 + seed % 3), batch=40)
        _, _, grads = model.backward(x, y)
        ref = torch_surrogate_grads(model, x, y)
        for k in grads:
            np.testing.assert_allclose(grads[k], ref[k], rtol=1e-12, atol=1e-14, err_msg=k)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        m = init_model(MLPConfig(3, [2], 2), seed=0)
        before = m.state()
        adam_step(m, {k: np.zeros_like(v) for k, v in m.params().items()}, 1, TrainConfig())
        assert all(np.array_equal(before[k], v) for k, v in m.state().items())

    def test_descent_direction(self):
        m = init_model(MLPConfig(1, [], 1, use_bn=False), seed=0)
        w0 = m.dense_layers[0].weight.copy()
        opt = Adam(TrainConfig())
        for _ in range(50):
            opt.step(m, {"dense0.weight": np.array([[0.7]])})
        assert m.dense_layers[0].weight[0, 0] < w0[0, 0]
        # bias-corrected Adam moves by about lr per step under a constant gradient
        assert w0[0, 0] - m.dense_layers[0].weight[0, 0] == pytest.approx(50e-3, rel=1e-5)

    def test_masked_stay_zero(self):
        m = init_model(MLPConfig(3, [2], 2), seed=0)
        d = m.dense_layers[0]
        d.mask[0, 1] = False
        d.weight[0, 1] = 0.0
        grads = {k: np.ones_like(v) for k, v in m.params().items()}
        adam_step(m, grads, 1, TrainConfig())
        assert d.weight[0, 1] == 0.0

    def test_rejects_step_zero(self):
        m = init_model(MLPConfig(3, [2], 2), seed=0)
        with pytest.raises(ValueError):
            adam_step(m, {}, 0, TrainConfig())


class TestTrain:
    def test_separable(self):
        tr, va, _ = separable_task()
        m = init_model(MLPConfig(4, [8, 8], 2), QuantSpec.uniform("float32"), seed=0)
        rec = train(m, tr, va, TrainConfig(batch_size=128))
        assert metrics.accuracy(metrics.predict_logits(m, va.features), va.labels) > 0.99

    def test_early_stop_restores_first_epoch(self, monkeypatch):
        tr, va, _ = separable_task(300)
        m = init_model(MLPConfig(4, [4], 2), seed=0)
        snapshots = []

        def rising(model, d, chunk=65536):
            snapshots.append(model.state())
            return float(len(snapshots))

        monkeypatch.setattr(nn_mod, "evaluate_loss", rising)
        rec = train(m, tr, va, TrainConfig(max_epochs=50, patience=1, batch_size=64))
        assert rec.epochs_run == 2 and rec.best_epoch == 1 and rec.stopped_early
        final = m.state()
        assert all(np.array_equal(final[k], snapshots[0][k]) for k in final)

    def test_deterministic(self):
        tr, va, _ = separable_task(400)
        recs, states = [], []
        for _ in range(2):
            m = init_model(MLPConfig(4, [6], 2), QuantSpec.uniform(6), seed=5)
            recs.append(train(m, tr, va, TrainConfig(max_epochs=8, batch_size=50, seed=2)))
            states.append(m)
        assert recs[0] == recs[1]
        assert _same_state(*states)

    def test_masks_survive_training(self):
        tr, va, _ = separable_task(300)
        m = init_model(MLPConfig(4, [6], 2), QuantSpec.uniform(6), seed=0)
        m.dense_layers[0].mask[:, 0] = False
        m.dense_layers[0].weight[:, 0] = 0.0
        train(m, tr, va, TrainConfig(max_epochs=5, batch_size=64))
        assert np.all(m.dense_layers[0].weight[:, 0] == 0.0)


class TestCheckpoint:
    def test_exact_roundtrip(self, tmp_path):
        tr, va, _ = separable_task(300)
        m = init_model(MLPConfig(4, [6, 5], 2), QuantSpec(6, 4), seed=0)
        m.dense_layers[1].mask[0, :3] = False
        m.dense_layers[1].weight[0, :3] = 0.0
        train(m, tr, va, TrainConfig(max_epochs=3, batch_size=64))
        path = tmp_path / "m.json"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert _same_state(m, back)
        assert back.quant == m.quant and back.cfg == m.cfg
        np.testing.assert_array_equal(back.forward(va.features)[0], m.forward(va.features)[0])

    def test_float_and_no_bn(self, tmp_path):
        m = init_model(MLPConfig(3, [2], 2, use_bn=False), QuantSpec.uniform("float32"), seed=0)
        path = tmp_path / "m.json"
        save_checkpoint(m, path)
        assert _same_state(m, load_checkpoint(path))


def test_dataset_fixture_trains(small_task):
    tr, va, te = small_task
    assert isinstance(tr, Dataset)
    m = init_model(MLPConfig(tr.num_features, [16], tr.num_classes), QuantSpec.uniform(6), seed=0)
    train(m, tr, va, TrainConfig(max_epochs=20, batch_size=128))
    assert metrics.accuracy(metrics.predict_logits(m, te.features), te.labels) > 0.8
