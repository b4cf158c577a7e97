"""
Unit tests for racnet.lrp
"""

import numpy as np
import pytest

from racnet.network import Dense, LabeledDataset, build_network, forward_range
from racnet.lrp import (
    LrpError,
    LrpParams,
    RelevanceScoreMatrix,
    cache_key,
    feature_map_relevance,
    load_relevance_matrix,
    lrp_step,
    output_relevance,
    propagate,
    relevance_at_layer,
    relevance_score_matrix,
    save_relevance_matrix,
)
from racnet.validation import ValidationError

EXACT = LrpParams(alpha=2.0, beta=1.0, stabilizer_eps=0.0)


def _dense(weight):
    layer = Dense(units=weight.shape[1], bias=False)
    layer.build((weight.shape[0],))
    layer.params['weight'] = np.asarray(weight, dtype=np.float64)
    return layer


def _oracle_dense_step(a, weight, r_upper, alpha=2.0, beta=1.0):
    """Sample-by-sample alpha-beta rule written with explicit loops."""
    n_in, n_out = weight.shape
    r_lower = np.zeros(n_in)
    for j in range(n_out):
        contrib = [a[i] * weight[i, j] for i in range(n_in)]
        zp = sum(z for z in contrib if z > 0)
        zn = sum(z for z in contrib if z < 0)
        for i in range(n_in):
            z = contrib[i]
            if zp > 0 and zn < 0:
                share = alpha * max(z, 0) / zp - beta * min(z, 0) / zn
            elif zp > 0:
                share = (alpha - beta) * max(z, 0) / zp
            elif zn < 0:
                share = (alpha - beta) * min(z, 0) / zn
            else:
                share = 0.0
            r_lower[i] += share * r_upper[j]
    return r_lower


class TestOutputRelevance:
    """Test the one-hot output seed."""

    def test_examples(self):
        assert output_relevance(2, 4).tolist() == [0, 0, 1, 0]
        assert output_relevance(0, 2).tolist() == [1, 0]

    def test_sums_to_one(self):
        for y in range(7):
            assert output_relevance(y, 7).sum() == 1.0

    def test_out_of_range(self):
        with pytest.raises(LrpError):
            output_relevance(3, 3)

    def test_propagation_seed_is_exact_one_hot(self, dense_net):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(100, 4))
        y = rng.integers(0, 3, size=100)
        _, trace = propagate(dense_net, x, y, stop=-1, params=EXACT, keep_trace=True)
        seed = trace[len(dense_net.layers) - 1]
        assert np.array_equal(seed, np.eye(3)[y])


class TestLrpStep:
    """Test a single alpha-beta step."""

    def test_three_input_neuron_is_proportional(self):
        a = np.array([[1.0, 2.0, 3.0]])
        w = np.array([[0.5], [0.25], [1.0]])
        r = lrp_step(_dense(w), a, np.array([[1.0]]), LrpParams())
        z = a[0] * w[:, 0]
        assert np.allclose(r[0], z / z.sum())

    def test_zero_upper_relevance(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(6, 4))
        r = lrp_step(_dense(w), rng.normal(size=(3, 6)), np.zeros((3, 4)), LrpParams())
        assert np.array_equal(r, np.zeros((3, 6)))

    def test_dense_conservation(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(8, 5))
        a = rng.normal(size=(10, 8))
        r_upper = rng.uniform(size=(10, 5))
        r = lrp_step(_dense(w), a, r_upper, EXACT)
        assert np.allclose(r.sum(axis=1), r_upper.sum(axis=1), rtol=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(6, 4))
        a = rng.normal(size=(5, 6))
        r_upper = rng.uniform(size=(5, 4))
        r = lrp_step(_dense(w), a, r_upper, EXACT)
        for i in range(5):
            assert np.allclose(r[i], _oracle_dense_step(a[i], w, r_upper[i]), rtol=1e-6, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(LrpError):
            lrp_step(_dense(np.ones((3, 2))), np.ones((1, 4)), np.ones((1, 2)), LrpParams())

    def test_invalid_alpha_beta(self):
        with pytest.raises(ValidationError):
            LrpParams(alpha=2.0, beta=0.5)


class TestRelevanceAtLayer:
    """Test propagation through whole networks."""

    def _live_rows(self, net, x):
        hidden = forward_range(net, x, 0, 2)
        return x[(hidden > 0).any(axis=1)]

    def test_matches_brute_force_oracle(self, dense_net):
        rng = np.random.default_rng(4)
        x = self._live_rows(dense_net, rng.normal(size=(20, 4)))
        y = rng.integers(0, 3, size=len(x))
        r, _ = propagate(dense_net, x, y, stop=-1, params=EXACT)
        w1 = dense_net.layers[0].params['weight']
        w2 = dense_net.layers[2].params['weight']
        for i in range(len(x)):
            h = np.maximum(x[i] @ w1, 0)
            r_hidden = _oracle_dense_step(h, w2, np.eye(3)[y[i]])
            r_input = _oracle_dense_step(x[i], w1, r_hidden)
            assert np.allclose(r[i], r_input, rtol=1e-6, atol=1e-12)

    def test_conservation_at_every_layer(self, dense_net):
        rng = np.random.default_rng(5)
        x = self._live_rows(dense_net, rng.normal(size=(50, 4)))
        y = rng.integers(0, 3, size=len(x))
        _, trace = propagate(dense_net, x, y, stop=-1, params=EXACT, keep_trace=True)
        assert set(trace) == {2, 1, 0, -1}
        for r in trace.values():
            assert np.allclose(r.reshape(len(x), -1).sum(axis=1), 1.0, rtol=1e-6)

    def test_conv_net_conservation(self):
        specs = [{'kind': 'conv2d', 'out_channels': 3, 'bias': False}, {'kind': 'relu'},
                 {'kind': 'maxpool', 'size': 2}, {'kind': 'flatten'}, {'kind': 'dense', 'units': 2, 'bias': False}]
        net = build_network((2, 6, 6), specs, num_classes=2, seed=1)
        x = np.random.default_rng(6).uniform(0.1, 1.0, size=(4, 2, 6, 6))
        _, trace = propagate(net, x, np.array([0, 1, 0, 1]), stop=-1, params=EXACT, keep_trace=True)
        for r in trace.values():
            assert np.allclose(r.reshape(4, -1).sum(axis=1), 1.0, rtol=1e-6)

    def test_single_path_concentrates_relevance(self, dense_net):
        net = dense_net.copy()
        net.layers[0].params['weight'][:, 2] = 1.0
        net.layers[2].params['weight'][:] = 0.0
        net.layers[2].params['weight'][2, 1] = 1.0
        x = np.random.default_rng(7).uniform(0.1, 1.0, size=(3, 4))
        rel = relevance_at_layer(net, x, [1, 1, 1], layer_id=1, params=EXACT)
        expected = np.zeros((3, 5))
        expected[:, 2] = 1.0
        assert np.allclose(rel.relevance, expected)

    def test_conv_layer_relevance_lives_on_tap(self, tiny_net):
        x = np.random.default_rng(8).uniform(size=(2, 1, 8, 8))
        rel = relevance_at_layer(tiny_net, x, [0, 2], layer_id=4)
        assert rel.relevance.shape == (2, 6, 4, 4)
        assert np.isfinite(rel.relevance).all()

    def test_single_input_gets_batch_axis(self, tiny_net):
        x = np.random.default_rng(9).uniform(size=(1, 8, 8))
        assert relevance_at_layer(tiny_net, x, 1, layer_id=0).relevance.shape == (1, 4, 8, 8)

    def test_output_layer_rejected(self, tiny_net):
        with pytest.raises(LrpError):
            relevance_at_layer(tiny_net, np.zeros((1, 8, 8)), 0, layer_id=len(tiny_net.layers) - 1)

    def test_label_count_mismatch(self, tiny_net):
        with pytest.raises(LrpError):
            relevance_at_layer(tiny_net, np.zeros((2, 1, 8, 8)), [0], layer_id=0)


class TestFeatureMapRelevance:
    """Test spatial averaging per feature map."""

    def test_constant_map(self):
        assert feature_map_relevance(np.full((3, 4, 4), 0.7)).tolist() == pytest.approx([0.7] * 3)

    def test_two_by_two(self):
        assert feature_map_relevance(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0] == pytest.approx(2.5)

    def test_random_matches_oracle(self):
        r = np.random.default_rng(0).normal(size=(2, 5, 3, 3))
        expected = np.array([[r[n, j].sum() / 9 for j in range(5)] for n in range(2)])
        assert np.allclose(feature_map_relevance(r), expected, atol=1e-9)

    def test_rejects_flat_relevance(self):
        with pytest.raises(LrpError):
            feature_map_relevance(np.ones((2, 5)))


class TestRelevanceScoreMatrix:
    """Test M_l aggregation."""

    def test_one_sample_per_class(self, tiny_net, toy_data):
        idx = [int(np.flatnonzero(toy_data.labels == c)[0]) for c in range(3)]
        data = toy_data.subset(np.array(idx))
        m = relevance_score_matrix(tiny_net, data, layer_id=4)
        for row, i in enumerate(idx):
            expected = feature_map_relevance(relevance_at_layer(tiny_net, toy_data.inputs[i], toy_data.labels[i], 4))
            assert np.allclose(m.matrix[data.labels[row]], expected[0], atol=1e-12)

    def test_duplicating_samples_leaves_matrix_unchanged(self, tiny_net, toy_data):
        data = toy_data.subset(np.concatenate([np.flatnonzero(toy_data.labels == c)[:4] for c in range(3)]))
        doubled = data.concat(data)
        m1 = relevance_score_matrix(tiny_net, data, layer_id=4, batch_size=5)
        m2 = relevance_score_matrix(tiny_net, doubled, layer_id=4, batch_size=7)
        assert np.allclose(m1.matrix, m2.matrix, atol=1e-12)
        assert (m2.counts == 2 * m1.counts).all()

    def test_matches_sample_loop(self, tiny_net, toy_data):
        data = toy_data.subset(np.concatenate([np.flatnonzero(toy_data.labels == c)[:2] for c in range(3)]))
        m = relevance_score_matrix(tiny_net, data, layer_id=0, batch_size=4)
        sums = np.zeros((3, 4))
        for x, y in zip(data.inputs, data.labels):
            sums[y] += feature_map_relevance(relevance_at_layer(tiny_net, x, y, 0))[0]
        assert np.allclose(m.matrix, sums / 2, atol=1e-12)

    def test_worker_count_does_not_change_result(self, tiny_net, toy_data):
        data = toy_data.subset(np.arange(30))
        serial = relevance_score_matrix(tiny_net, data, layer_id=7, batch_size=8, n_jobs=1)
        parallel = relevance_score_matrix(tiny_net, data, layer_id=7, batch_size=8, n_jobs=2)
        assert np.allclose(serial.matrix, parallel.matrix, atol=1e-9)

    def test_missing_class(self, tiny_net, toy_data):
        data = toy_data.subset(np.flatnonzero(toy_data.labels != 2))
        with pytest.raises(LrpError, match=r'\[2\]'):
            relevance_score_matrix(tiny_net, data, layer_id=4)

    def test_empty_dataset(self, tiny_net):
        empty = LabeledDataset(np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=np.int64), num_classes=3)
        with pytest.raises(LrpError):
            relevance_score_matrix(tiny_net, empty, layer_id=4)

    def test_non_conv_layer(self, tiny_net, toy_data):
        with pytest.raises(LrpError):
            relevance_score_matrix(tiny_net, toy_data, layer_id=1)

    @pytest.mark.parametrize('layer_id', [-1, -12, 12, 40])
    def test_layer_id_out_of_range(self, tiny_net, toy_data, layer_id):
        with pytest.raises(LrpError, match=r'outside \[0, 12\)'):
            relevance_score_matrix(tiny_net, toy_data, layer_id=layer_id)


class TestPersistence:
    """Test matrix files and cache keys."""

    def test_save_and_load(self, temp_dir):
        m = RelevanceScoreMatrix(layer_id=4, matrix=np.arange(6, dtype=float).reshape(2, 3),
                                 counts=np.array([5, 7]))
        path = temp_dir / 'relevance' / 'M_layer4.json'
        record = save_relevance_matrix(m, path, 'abc', LrpParams(), 'tag')
        loaded, meta = load_relevance_matrix(path)
        assert np.array_equal(loaded.matrix, m.matrix)
        assert meta['matrix_hash'] == m.hash() == record['matrix_hash']
        assert meta['cache_key'] == cache_key('abc', 4, LrpParams(), 'tag')

    def test_cache_key_depends_on_inputs(self):
        base = cache_key('abc', 4, LrpParams(), 'tag')
        assert base != cache_key('abd', 4, LrpParams(), 'tag')
        assert base != cache_key('abc', 5, LrpParams(), 'tag')
        assert base != cache_key('abc', 4, LrpParams(alpha=1.0, beta=0.0), 'tag')
        assert base != cache_key('abc', 4, LrpParams(), 'other')

    def test_malformed_file(self, temp_dir):
        path = temp_dir / 'bad.json'
        path.write_text('{"layer_id": 1}')
        with pytest.raises(LrpError):
            load_relevance_matrix(path)
