"""
Unit tests for racnet.rac
"""

import joblib
import numpy as np
import pytest

from racnet.lrp import RelevanceScoreMatrix, relevance_score_matrix
from racnet.network import CorruptModelFileError, LabeledDataset, ModelVersionError, ShapeError, small_cnn
from racnet.rac import (
    RAC_FORMAT,
    BinaryLinearClassifier,
    BlcParams,
    Rac,
    RacError,
    RelevantFeatureSet,
    binary_labels,
    blc_accuracy,
    blc_seeds,
    collect_taps,
    load_rac_bundle,
    rac_forward,
    rac_probabilities,
    relevant_feature_set,
    save_rac_bundle,
    select_relevant_features,
    train_blc,
    train_rac,
)


def make_rac(layer_id=4, c=3, k=2, tap_shape=(6, 4, 4), weight=0.0, bias=0.0):
    """Hand-built RAC with constant BLC parameters."""
    width = k * tap_shape[1] * tap_shape[2]
    indices = np.tile(np.arange(k), (c, 1))
    blcs = [BinaryLinearClassifier(class_id=j, weight=np.full(width, float(weight)), bias=float(bias))
            for j in range(c)]
    return Rac(layer_id=layer_id, features=RelevantFeatureSet(layer_id, k, indices), blcs=blcs,
               tap_shape=tuple(tap_shape))


@pytest.fixture
def layer4_matrix(trained_tiny_net, toy_data):
    return relevance_score_matrix(trained_tiny_net, toy_data, layer_id=4, batch_size=30)


class TestSelectRelevantFeatures:
    """Test top-k feature selection."""

    def test_top_two(self):
        assert select_relevant_features(np.array([[0.1, 0.9, 0.5]]), 0, 2).tolist() == [1, 2]

    def test_k_equals_r_is_full_ranking(self):
        assert select_relevant_features(np.array([[0.1, 0.9, 0.5]]), 0, 3).tolist() == [1, 2, 0]

    def test_ties_keep_lower_index(self):
        assert select_relevant_features(np.array([[0.5, 0.2, 0.5]]), 0, 2).tolist() == [0, 2]

    def test_k_above_r(self):
        with pytest.raises(RacError, match='r=3'):
            select_relevant_features(np.array([[0.1, 0.9, 0.5]]), 0, 4)

    def test_k_zero(self):
        with pytest.raises(RacError):
            select_relevant_features(np.array([[0.1, 0.9, 0.5]]), 0, 0)

    def test_feature_set_rows_follow_classes(self):
        m = RelevanceScoreMatrix(layer_id=2, matrix=np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 4.0]]),
                                 counts=np.array([1, 1]))
        fs = relevant_feature_set(m, 2)
        assert fs.layer_id == 2
        assert fs.indices.tolist() == [[0, 2], [1, 2]]


class TestBinaryLabels:
    """Test one-vs-rest relabeling."""

    def test_relabel(self):
        assert binary_labels([0, 2, 1, 2], 2).tolist() == [0, 1, 0, 1]

    def test_absent_class(self):
        assert binary_labels([0, 1], 5).tolist() == [0, 0]


class TestTrainBlc:
    """Test binary linear classifier training."""

    def test_separable_points(self, separable_points):
        blc = train_blc(separable_points.inputs, separable_points.labels,
                        BlcParams(epochs=5, batch_size=16), seed=0)
        predicted = blc.predict_proba(separable_points.inputs) > 0.5
        assert np.mean(predicted == separable_points.labels) >= 0.98

    def test_flipped_labels_flip_the_classifier(self, separable_points):
        params = BlcParams(epochs=3, batch_size=16)
        blc = train_blc(separable_points.inputs, separable_points.labels, params, seed=1)
        flipped = train_blc(separable_points.inputs, 1 - separable_points.labels, params, seed=1)
        assert np.allclose(blc.weight, -flipped.weight, atol=1e-9)
        assert blc.bias == pytest.approx(-flipped.bias, abs=1e-9)

    def test_zero_epochs(self, separable_points):
        blc = train_blc(separable_points.inputs, separable_points.labels, BlcParams(epochs=0))
        assert np.array_equal(blc.weight, np.zeros(2))
        assert np.allclose(blc.predict_proba(separable_points.inputs), 0.5)

    def test_single_class(self):
        with pytest.raises(RacError, match='positive and negative'):
            train_blc(np.ones((4, 2)), np.zeros(4), BlcParams(epochs=1), class_id=3)

    def test_deterministic(self, separable_points):
        a = train_blc(separable_points.inputs, separable_points.labels, seed=5)
        b = train_blc(separable_points.inputs, separable_points.labels, seed=5)
        assert np.array_equal(a.weight, b.weight)
        assert a.bias == b.bias


class TestTrainRac:
    """Test auxiliary-cell training on a small network."""

    def test_structure(self, trained_tiny_net, toy_data, layer4_matrix):
        rac = train_rac(trained_tiny_net, toy_data, layer4_matrix, layer_id=4, k=3,
                        params=BlcParams(epochs=2, batch_size=16))
        assert rac.num_classes == 3
        assert rac.tap_shape == (6, 4, 4)
        assert rac.features.indices.shape == (3, 3)
        for j in range(3):
            assert rac.features.indices[j].tolist() == select_relevant_features(layer4_matrix, j, 3).tolist()
            assert rac.blcs[j].weight.shape == (48,)
        assert rac.parameter_count == 3 * 49

    def test_deterministic_across_workers(self, trained_tiny_net, toy_data, layer4_matrix):
        params = BlcParams(epochs=2, batch_size=16)
        serial = train_rac(trained_tiny_net, toy_data, layer4_matrix, 4, 2, params, seed=3, n_jobs=1)
        parallel = train_rac(trained_tiny_net, toy_data, layer4_matrix, 4, 2, params, seed=3, n_jobs=2)
        for a, b in zip(serial.blcs, parallel.blcs):
            assert np.array_equal(a.weight, b.weight)
            assert a.bias == b.bias

    def test_precomputed_taps_match(self, trained_tiny_net, toy_data, layer4_matrix):
        params = BlcParams(epochs=1, batch_size=16)
        taps = collect_taps(trained_tiny_net, toy_data.inputs, [4])[4]
        a = train_rac(trained_tiny_net, toy_data, layer4_matrix, 4, 2, params, seed=0)
        b = train_rac(trained_tiny_net, toy_data, layer4_matrix, 4, 2, params, seed=0, taps=taps)
        for x, y in zip(a.blcs, b.blcs):
            assert np.array_equal(x.weight, y.weight)

    def test_max_samples(self, trained_tiny_net, toy_data, layer4_matrix):
        rac = train_rac(trained_tiny_net, toy_data, layer4_matrix, 4, 2,
                        BlcParams(epochs=1, batch_size=8), max_samples=30)
        assert rac.num_classes == 3

    def test_matrix_for_other_layer(self, trained_tiny_net, toy_data, layer4_matrix):
        with pytest.raises(RacError, match='not 7'):
            train_rac(trained_tiny_net, toy_data, layer4_matrix, layer_id=7, k=2)

    def test_k_above_r(self, trained_tiny_net, toy_data, layer4_matrix):
        with pytest.raises(RacError, match='r=6'):
            train_rac(trained_tiny_net, toy_data, layer4_matrix, layer_id=4, k=7)

    def test_blc_seeds_are_distinct(self):
        seeds = blc_seeds(0, 10)
        assert len(set(seeds)) == 10
        assert seeds == blc_seeds(0, 10)

    def test_separable_classes_generalize(self):
        def two_channel_images(n, seed):
            rng = np.random.default_rng(seed)
            labels = np.arange(n) % 2
            x = rng.uniform(0.0, 0.4, size=(n, 2, 4, 4))
            x[np.arange(n), labels] += 0.6
            return LabeledDataset(x.astype(np.float32), labels, split='train', num_classes=2)

        net = small_cnn(input_shape=(2, 4, 4), num_classes=2, widths=(2, 2), pool_after=(), seed=0)
        conv = net.layers[0]
        conv.params['weight'][:] = 0.0
        conv.params['weight'][0, 0, 1, 1] = 1.0
        conv.params['weight'][1, 1, 1, 1] = 1.0
        conv.params['bias'][:] = 0.0
        train = two_channel_images(200, seed=0)
        held_out = two_channel_images(100, seed=1)
        m = RelevanceScoreMatrix(layer_id=0, matrix=np.eye(2), counts=np.array([100, 100]))

        rac = train_rac(net, train, m, layer_id=0, k=1, params=BlcParams(epochs=10, batch_size=16), seed=0)
        assert rac.features.indices.tolist() == [[0], [1]]
        taps = collect_taps(net, held_out.inputs, [0])[0]
        assert min(blc_accuracy(rac, taps, held_out.labels)) > 0.9
        predicted = rac_probabilities(rac, taps).argmax(axis=1)
        assert np.mean(predicted == held_out.labels) > 0.9


class TestRacForward:
    """Test RAC evaluation."""

    def test_all_equal_probabilities_pick_class_zero(self):
        out = rac_forward(make_rac(), np.random.default_rng(0).uniform(size=(6, 4, 4)))
        assert out.rac_class == 0
        assert out.rac_prob == pytest.approx(0.5)
        assert np.allclose(out.probabilities, 0.5)

    def test_biases_decide(self):
        rac = make_rac()
        rac.blcs[2].bias = 3.0
        out = rac_forward(rac, np.zeros((6, 4, 4)))
        assert out.rac_class == 2
        assert out.rac_prob == pytest.approx(1.0 / (1.0 + np.exp(-3.0)))

    def test_each_blc_reads_its_own_maps(self):
        rac = make_rac(c=2, k=1, weight=1.0)
        rac.features = RelevantFeatureSet(4, 1, np.array([[0], [5]]))
        tap = np.zeros((1, 6, 4, 4))
        tap[0, 5] = 1.0
        probs = rac_probabilities(rac, tap)[0]
        assert probs[0] == pytest.approx(0.5)
        assert probs[1] > 0.99

    def test_wrong_tap_shape(self):
        with pytest.raises(ShapeError):
            rac_probabilities(make_rac(), np.zeros((1, 6, 8, 8)))

    def test_blc_accuracy(self):
        rac = make_rac(c=2, bias=-5.0)
        acc = blc_accuracy(rac, np.zeros((4, 6, 4, 4)), np.array([0, 0, 0, 1]))
        assert acc == [pytest.approx(0.25), pytest.approx(0.75)]


class TestRacCost:
    """Test parameter and FLOP counts."""

    def test_reference_parameter_count(self):
        racs = [make_rac(layer_id=l, c=10, k=64, tap_shape=(128, 8, 8)) for l in (10, 14)]
        assert sum(r.parameter_count for r in racs) == 81940

    def test_blc_flops(self):
        assert make_rac(c=1, k=64, tap_shape=(128, 8, 8)).flops == 8193


class TestRacBundle:
    """Test RAC persistence."""

    def test_round_trip(self, temp_dir):
        racs = [make_rac(layer_id=4, weight=0.5, bias=-1.0), make_rac(layer_id=7, k=3, tap_shape=(8, 4, 4))]
        path = temp_dir / 'racs.joblib'
        save_rac_bundle(racs, path, {'model_hash': 'abc'})
        loaded, provenance = load_rac_bundle(path)
        assert provenance == {'model_hash': 'abc'}
        for a, b in zip(racs, loaded):
            assert a.layer_id == b.layer_id
            assert a.tap_shape == b.tap_shape
            assert np.array_equal(a.features.indices, b.features.indices)
            for x, y in zip(a.blcs, b.blcs):
                assert np.array_equal(x.weight, y.weight)
                assert x.bias == y.bias

    def test_missing_file(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            load_rac_bundle(temp_dir / 'none.joblib')

    def test_corrupt_file(self, temp_dir):
        path = temp_dir / 'racs.joblib'
        path.write_bytes(b'not a joblib file')
        with pytest.raises(CorruptModelFileError):
            load_rac_bundle(path)

    def test_wrong_version(self, temp_dir):
        path = temp_dir / 'racs.joblib'
        joblib.dump({'format': RAC_FORMAT, 'version': 99, 'racs': []}, path)
        with pytest.raises(ModelVersionError):
            load_rac_bundle(path)
