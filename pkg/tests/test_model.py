import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsrobust.augment import AugmentLayer, AugmentMethod, ShuffleLayer
from tsrobust.data import ConfigError, Dataset, synth_two_class
from tsrobust.model import Classifier, ClassifierConfig, TrainConfig, TrainingError, train
from tsrobust.tensor import Tensor, softmax_t

SMALL = ClassifierConfig(channels=(4, 6), kernel_sizes=(5, 3))


def small_model(k=32, seed=0, front=None, **kw):
    cfg = ClassifierConfig(channels=(4, 6), kernel_sizes=(5, 3), **kw)
    return Classifier(cfg, k, seed=seed, front=front)


def toy_separable(n=40, k=32, seed=0):
    """Two classes separated by their mean level."""
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(0, 0.3, (n, k)) + np.where(y == 1, 1.0, -1.0)[:, None]
    return Dataset(x, y, 2)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(channels=()), dict(channels=(4,), kernel_sizes=(3, 3)), dict(channels=(0,), kernel_sizes=(3,)),
         dict(temperature=0.0), dict(n_classes=0)],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            ClassifierConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr=-1.0), dict(momentum=1.0), dict(batch_size=0)])
    def test_train_config_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_kernel_wider_than_input(self):
        with pytest.raises(ConfigError):
            Classifier(ClassifierConfig(), 5)

    def test_parameter_count_pure_function(self):
        # conv0: 32*1*7 + 32, conv1: 64*32*5 + 64, conv2: 32*64*3 + 32, head: 2*32 + 2
        expected = 32 * 7 + 32 + 64 * 32 * 5 + 64 + 32 * 64 * 3 + 32 + 2 * 32 + 2
        assert Classifier(ClassifierConfig(), 128, seed=1).n_parameters() == expected
        assert Classifier(ClassifierConfig(), 64, seed=9).n_parameters() == expected


class TestForward:
    def test_rows_sum_to_one(self):
        m = small_model()
        p = m.forward(np.random.default_rng(0).normal(size=(7, 32))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_head_gives_uniform(self):
        m = small_model(n_classes=3)
        m.params["head.weight"].data[:] = 0.0
        p = m.forward(np.random.default_rng(1).normal(size=(4, 32))).data
        np.testing.assert_allclose(p, 1 / 3, atol=1e-15)

    def test_deterministic(self):
        m = small_model()
        x = np.random.default_rng(2).normal(size=(3, 32))
        np.testing.assert_array_equal(m.forward(x).data, m.forward(x).data)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            small_model().forward(np.zeros((2, 31)))

    def test_single_series_accepted(self):
        assert small_model().forward(np.zeros(32)).shape == (1, 2)

    @settings(max_examples=40, deadline=None)
    @given(t=st.floats(0.05, 50.0), seed=st.integers(0, 1000))
    def test_temperature_argmax_invariance(self, t, seed):
        z = Tensor(np.random.default_rng(seed).normal(size=(6, 4)))
        np.testing.assert_array_equal(softmax_t(z, t).data.argmax(1), softmax_t(z, 1.0).data.argmax(1))


class TestPredict:
    def test_tie_goes_to_lowest_index(self):
        m = small_model()
        m.params["head.weight"].data[:] = 0.0
        np.testing.assert_array_equal(m.predict(np.ones((3, 32))), [0, 0, 0])

    def test_deterministic_repeats(self):
        m = small_model()
        x = np.random.default_rng(3).normal(size=(10, 32))
        np.testing.assert_array_equal(m.predict(x, repeats=5), m.forward(x).data.argmax(1))

    def test_stochastic_seeded(self):
        m = small_model(front=ShuffleLayer())
        x = np.random.default_rng(4).normal(size=(10, 32))
        a = m.predict(x, 5, np.random.default_rng(6))
        b = m.predict(x, 5, np.random.default_rng(6))
        np.testing.assert_array_equal(a, b)

    def test_repeats_validated(self):
        with pytest.raises(ValueError):
            small_model().predict(np.zeros((1, 32)), repeats=0)


class TestTrain:
    def test_lr_zero_keeps_parameters(self):
        m = small_model()
        before = {k: v.data.copy() for k, v in m.params.items()}
        res = train(m, toy_separable(), TrainConfig(epochs=3, lr=0.0))
        for k, v in m.params.items():
            np.testing.assert_array_equal(v.data, before[k])
        assert res.losses[0] == pytest.approx(res.losses[-1], abs=1e-12)

    def test_same_seed_same_trace(self):
        d = toy_separable()
        runs = []
        for _ in range(2):
            m = small_model(seed=3, front=AugmentLayer(AugmentMethod.JITTER))
            runs.append((train(m, d, TrainConfig(epochs=4, seed=5)).losses, m.params["head.weight"].data.copy()))
        assert runs[0][0] == runs[1][0]
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_separable_below_half_log_c(self):
        res = train(small_model(), toy_separable(), TrainConfig(epochs=200))
        assert res.losses[-1] < math.log(2) / 2

    def test_desk_loss_after_100_epochs(self):
        train_ds, _ = synth_two_class(100, 128, seed=1)
        res = train(Classifier(ClassifierConfig(), 128, seed=1), train_ds, TrainConfig(epochs=100, seed=1))
        assert res.losses[-1] < 0.2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_reports_location(self):
        m = small_model()
        with pytest.raises(TrainingError, match=r"epoch 0, batch \d+"):
            train(m, toy_separable(), TrainConfig(epochs=1, lr=1e200))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            train(small_model(k=16), toy_separable(), TrainConfig(epochs=1))

    def test_sd_log_one_entry_per_batch(self):
        layer = ShuffleLayer()
        train(small_model(front=layer), toy_separable(n=40), TrainConfig(epochs=1, batch_size=8))
        assert len(layer.log) == 5


class TestPersistence:
    @pytest.mark.parametrize("front", [None, AugmentLayer(AugmentMethod.SMOOTH), ShuffleLayer(per_epoch=True)])
    def test_round_trip(self, tmp_path, front):
        m = small_model(seed=4, front=front, temperature=3.0)
        train(m, toy_separable(), TrainConfig(epochs=1))
        m.save(tmp_path / "m.json")
        back = Classifier.load(tmp_path / "m.json")
        for k, v in m.params.items():
            np.testing.assert_array_equal(back.params[k].data, v.data)
        assert back.config == m.config and back.seed == m.seed
        assert type(back.front) is type(m.front)
        x = np.random.default_rng(5).normal(size=(4, 32))
        np.testing.assert_array_equal(
            back.forward(x, rng=np.random.default_rng(1)).data, m.forward(x, rng=np.random.default_rng(1)).data
        )

    def test_copy_is_independent(self):
        m = small_model()
        c = m.copy()
        c.params["head.bias"].data[:] = 5.0
        assert not np.any(m.params["head.bias"].data == 5.0)
