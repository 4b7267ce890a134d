from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcollab import datagen, distance, nn
from fedcollab.datagen import ScenarioConfig
from fedcollab.distance import DiscriminatorConfig, DistanceMatrix
from fedcollab.nn import Batch

FAST = DiscriminatorConfig(hidden_size=16, rounds=5)


def gaussian_batch(rng, n, d=3, k=3, shift=0.0):
    return Batch(rng.normal(size=(n, d)) + shift, rng.integers(0, k, size=n))


def tiny_population(n_clients=4, seed=0, n=40):
    types = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]] * (n_clients // 2) + [[1 / 3] * 3] * (n_clients % 2)
    cfg = ScenarioConfig("label_shift", n_clients, types, [(n, 5, 5)] * n_clients,
                         feature_dim=3, n_classes=3, seed=seed)
    return datagen.generate(cfg)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"hidden_size": 0}, {"rounds": -1}, {"lr": 0.0}, {"train_fraction": 1.0},
        {"train_fraction": 0.0}, {"label_scale": 0.0}, {"batch_size": 0},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            DiscriminatorConfig(**kw)

    def test_discriminator_shape(self):
        cfg = DiscriminatorConfig().model_config(7)
        assert cfg.layer_sizes == (7, 64, 1) and cfg.output_mode == "binary_logistic"


class TestPairInput:
    def test_one_hot_placement(self):
        out = distance.pair_input(Batch(np.array([[1.0, 2.0]]), np.array([1])), 3)
        assert out.tolist() == [[1, 2, 0, 1, 0]]

    def test_label_zero(self):
        out = distance.pair_input(Batch(np.array([[5.0, 6.0]]), np.array([0])), 3)
        assert out[0, 2:].tolist() == [1, 0, 0]

    def test_width(self, rng):
        out = distance.pair_input(gaussian_batch(rng, 17, d=4, k=5), 5)
        assert out.shape == (17, 9)
        np.testing.assert_array_equal(out[:, 4:].sum(axis=1), 1.0)

    def test_scale(self):
        out = distance.pair_input(Batch(np.array([[0.0]]), np.array([1])), 2, label_scale=3.0)
        assert out.tolist() == [[0, 0, 3]]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            distance.pair_input(Batch(np.array([[0.0]]), np.array([3])), 3)

    def test_shard_uses_train_and_valid(self):
        shard = tiny_population(2).shards[0]
        assert len(distance.pair_input(shard, 3)) == 45


def threshold_model(sign):
    # single dense layer: logistic(50 * sign * x)
    model = nn.zeros_model(nn.MlpConfig((1, 1), "relu", "binary_logistic"))
    model.weights[0][:] = 50.0 * sign
    return model


class TestBalancedAccuracy:
    def test_constant_one(self):
        model = nn.zeros_model(nn.MlpConfig((1, 2, 1), "relu", "binary_logistic"))
        # logistic(0) = 0.5 which the threshold counts as class 1
        assert distance.balanced_accuracy(model, np.ones((3, 1)), np.ones((5, 1))) == 0.5

    def test_perfect(self):
        model = threshold_model(1.0)
        assert distance.balanced_accuracy(model, [[1.0], [2.0]], [[-1.0], [-3.0]]) == 1.0

    def test_arithmetic(self):
        model = threshold_model(1.0)
        pos = [[1.0], [2.0], [3.0], [-1.0]]   # 3/4 hits
        neg = [[-1.0], [2.0]]                 # 1/2 hits
        assert distance.balanced_accuracy(model, pos, neg) == 0.625

    def test_empty(self):
        with pytest.raises(ValueError):
            distance.balanced_accuracy(threshold_model(1.0), np.zeros((0, 1)), [[1.0]])


class TestEstimatePair:
    def test_untrained_zero_model_gives_zero(self, rng):
        a, b = gaussian_batch(rng, 20), gaussian_batch(rng, 20, shift=5.0)
        cfg = DiscriminatorConfig(rounds=0)
        init = nn.zeros_model(cfg.model_config(6))
        est = distance.estimate_pair(a, b, 3, cfg, init_model=init)
        assert est.balacc == 0.5 and est.distance == 0.0

    def test_degenerate(self, rng):
        with pytest.raises(distance.DegenerateShard):
            distance.estimate_pair(gaussian_batch(rng, 1), gaussian_batch(rng, 10), 3, FAST)

    def test_init_width_mismatch(self, rng):
        init = nn.zeros_model(FAST.model_config(4))
        with pytest.raises(ValueError):
            distance.estimate_pair(gaussian_batch(rng, 10), gaussian_batch(rng, 10), 3, FAST,
                                   init_model=init)

    def test_equal_train_sizes(self, rng):
        est = distance.estimate_pair(gaussian_batch(rng, 50), gaussian_batch(rng, 12), 3, FAST)
        assert est.m_train == 9 and est.n_valid == (41, 3)

    def test_orientation_symmetric(self, rng):
        a, b = gaussian_batch(rng, 40), gaussian_batch(rng, 30, shift=1.0)
        e1 = distance.estimate_pair(a, b, 3, FAST, ids=(2, 7))
        e2 = distance.estimate_pair(b, a, 3, FAST, ids=(7, 2))
        assert (e1.i, e1.j) == (e2.i, e2.j) == (2, 7)
        assert e1.distance == e2.distance and e1.balacc == e2.balacc

    def test_deterministic(self, rng):
        a, b = gaussian_batch(rng, 40), gaussian_batch(rng, 30, shift=1.0)
        assert distance.estimate_pair(a, b, 3, FAST) == distance.estimate_pair(a, b, 3, FAST)

    def test_exact_copy_near_zero(self):
        cfg = datagen.preset("label20", seed=0)
        shard = datagen.generate(cfg).shards[0]
        vals = [distance.estimate_pair(shard, shard, 10, DiscriminatorConfig(seed=s)).distance
                for s in range(5)]
        assert np.mean(vals) <= 0.1

    def test_disjoint_labels_near_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(300, 4))
        a = Batch(x[:150], rng.integers(0, 2, 150))
        b = Batch(x[150:], rng.integers(2, 4, 150))
        vals = [distance.estimate_pair(a, b, 4, DiscriminatorConfig(seed=s)).distance for s in range(5)]
        assert np.median(vals) >= 0.85

    def test_concept_shift_derangement_near_one(self):
        vals = []
        for s in range(5):
            cfg = ScenarioConfig("concept_shift", 2, [list(range(10)), [(i + 5) % 10 for i in range(10)]],
                                 [(1000, 1, 1)] * 2, class_sep=1.5, seed=s)
            pop = datagen.generate(cfg)
            vals.append(distance.estimate_pair(pop.shards[0].train, pop.shards[1].train, 10,
                                               DiscriminatorConfig(rounds=50, seed=s)).distance)
        assert np.median(vals) >= 0.85

    def test_communication_counter(self, rng):
        est = distance.estimate_pair(gaussian_batch(rng, 10), gaussian_batch(rng, 10), 3, FAST)
        assert est.params_communicated == 4 * FAST.rounds * FAST.model_config(6).n_params

    @given(st.integers(0, 1000))
    @settings(max_examples=15)
    def test_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        a = gaussian_batch(rng, int(rng.integers(2, 30)))
        b = gaussian_batch(rng, int(rng.integers(2, 30)), shift=float(rng.normal()))
        est = distance.estimate_pair(a, b, 3, DiscriminatorConfig(hidden_size=8, rounds=2, seed=seed))
        assert 0.0 <= est.distance <= 1.0
        assert est.distance == max(0.0, 2 * est.balacc - 1)


class TestEstimateAll:
    def test_single_client(self):
        dm = distance.estimate_all(tiny_population(1), FAST)
        assert dm.values.tolist() == [[0.0]] and dm.n_discriminators == 0

    def test_four_clients(self):
        dm = distance.estimate_all(tiny_population(4), FAST)
        assert dm.n_discriminators == 6 and dm.n == 4
        assert np.array_equal(dm.values, dm.values.T) and np.all(np.diag(dm.values) == 0)
        assert np.all((dm.values >= 0) & (dm.values <= 1))

    def test_parallel_matches_serial(self):
        pop = tiny_population(4)
        a = distance.estimate_all(pop, FAST, n_jobs=1)
        b = distance.estimate_all(pop, FAST, n_jobs=2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_pair_matches_direct_call(self):
        pop = tiny_population(3)
        dm = distance.estimate_all(pop, FAST)
        direct = distance.estimate_pair(pop.shards[0], pop.shards[2], 3, FAST, ids=(0, 2))
        assert dm.values[0, 2] == direct.distance

    def test_newcomer(self):
        pop = tiny_population(3)
        new = datagen.generate(pop.config).shards[1]
        dm = distance.estimate_newcomer(pop, new, FAST)
        assert dm.n == 4 and dm.n_discriminators == 3
        assert np.all(dm.values[:3, :3] == 0)


class TestDistanceMatrix:
    @pytest.mark.parametrize("values", [
        [[0, 0.2], [0.3, 0]], [[0.1, 0], [0, 0]], [[0, 1.5], [1.5, 0]], [[0, -0.1], [-0.1, 0]],
        [[0, 0, 0]],
    ])
    def test_rejects(self, values):
        with pytest.raises(ValueError):
            DistanceMatrix(np.array(values, dtype=float))

    def test_round_trip(self, tmp_path):
        dm = distance.estimate_all(tiny_population(3), FAST)
        csv_path, sidecar = distance.save_distances(dm, tmp_path / "d.csv")
        assert sidecar.name == "d.json"
        back = distance.load_distances(csv_path)
        np.testing.assert_allclose(back.values, dm.values, rtol=1e-9, atol=0)
        assert back.n_discriminators == 3 and back.config == FAST
        assert back.params_communicated == dm.params_communicated
