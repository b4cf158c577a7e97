"""
Pytest fixtures for racnet tests
"""

import numpy as np
import pytest
import tempfile
import yaml
from pathlib import Path

from racnet.datasets import make_synthetic
from racnet.lrp import relevance_score_matrix
from racnet.network import LabeledDataset, build_network, small_cnn, train
from racnet.rac import BlcParams, train_rac


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    """Untrained 3-conv network on 1x8x8 inputs, 3 classes.

    Layer ids: conv 0, 4, 7 (ordinals 1, 2, 3); taps (4,8,8), (6,4,4), (8,4,4).
    """
    return small_cnn(input_shape=(1, 8, 8), num_classes=3, widths=(4, 6, 8), pool_after=(1,), seed=0)


@pytest.fixture
def toy_data():
    """Balanced 3-class synthetic images matching tiny_net."""
    data = make_synthetic(num_classes=3, shape=(1, 8, 8), samples=90, noise=0.15, smoothing=1.0, seed=0)
    data.split = 'train'
    return data


@pytest.fixture
def trained_tiny_net(tiny_net, toy_data):
    return train(tiny_net, toy_data, learning_rate=0.05, batch_size=16, epochs=8, seed=0)


@pytest.fixture
def rac_system(trained_tiny_net, toy_data):
    """trained_tiny_net with RACs (k=2) on conv layers 4 and 7."""
    params = BlcParams(epochs=3, batch_size=16)
    racs = []
    for layer_id in (4, 7):
        m = relevance_score_matrix(trained_tiny_net, toy_data, layer_id=layer_id, batch_size=30)
        racs.append(train_rac(trained_tiny_net, toy_data, m, layer_id, 2, params, seed=0))
    return trained_tiny_net, racs


@pytest.fixture
def dense_net():
    """Bias-free 2-layer dense net (4 -> 5 -> 3) on flat inputs."""
    specs = [
        {'kind': 'dense', 'units': 5, 'bias': False},
        {'kind': 'relu'},
        {'kind': 'dense', 'units': 3, 'bias': False},
    ]
    return build_network((4,), specs, num_classes=3, seed=3)


@pytest.fixture
def separable_points():
    """Two Gaussian blobs in 2-D far apart; labels 0 / 1."""
    rng = np.random.default_rng(7)
    neg = rng.normal(loc=(-3.0, -3.0), scale=0.5, size=(100, 2))
    pos = rng.normal(loc=(3.0, 3.0), scale=0.5, size=(100, 2))
    x = np.concatenate([neg, pos])
    y = np.concatenate([np.zeros(100, dtype=np.int64), np.ones(100, dtype=np.int64)])
    order = rng.permutation(200)
    return LabeledDataset(inputs=x[order], labels=y[order])


@pytest.fixture
def minimal_config(temp_dir):
    """Tiny synthetic 2-class run that finishes in seconds."""
    return {
        'dataset': {
            'name': 'toy2',
            'format': 'synthetic',
            'val_fraction': 0.2,
            'test_fraction': 0.2,
            'synthetic': {'num_classes': 2, 'shape': [1, 8, 8], 'samples': 120, 'noise': 0.1, 'smoothing': 1.0},
        },
        'architecture': {'name': 'small_cnn', 'widths': [4, 6, 8], 'pool_after': [1]},
        'training': {'learning_rate': 0.05, 'batch_size': 16, 'epochs': 3, 'lr_decay_every': 0},
        'lrp': {'batch_size': 16},
        'rac': {'validation_layers': [2, 3], 'k': 3, 'max_train_samples': 60,
                'blc': {'epochs': 2, 'batch_size': 16}},
        'inference': {'delta_th': 0.8, 'batch_size': 32},
        'sweep': {'layer_pairs': [[1, 2], [2, 3]], 'k': [2, 3, 8], 'delta_th': [0.5, 0.9], 'seeds': [0]},
        'attack': {'samples': 6, 'max_iterations': 5, 'const_steps': 1, 'batch_size': 6},
        'ood': {'samples': 20},
        'output_dir': str(temp_dir / 'run'),
    }


@pytest.fixture
def minimal_config_file(temp_dir, minimal_config):
    path = temp_dir / 'config.yaml'
    with open(path, 'w') as f:
        yaml.safe_dump(minimal_config, f)
    return path
