#!/usr/bin/env python3
"""
racnet - Relevant-features based Auxiliary Cells

An auxiliary cell (RAC) sits on the tapped activations of one conv layer and
holds one binary linear classifier (BLC) per class. Each BLC reads only the k
feature maps that are most relevant to its class according to M_l, flattened
at full spatial resolution.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit
from sklearn.linear_model import SGDClassifier
from sklearn.metrics import accuracy_score

from racnet.datasets import stratified_subsample
from racnet.lrp import RelevanceScoreMatrix
from racnet.network import (
    CorruptModelFileError,
    LabeledDataset,
    ModelVersionError,
    Network,
    ShapeError,
    atomic_dump,
    forward_prefix,
)

logger = logging.getLogger(__name__)

RAC_FORMAT = 'racnet-racs'
RAC_FORMAT_VERSION = 1


class RacError(ValueError):
    """Raised for invalid auxiliary-cell construction or use."""
    pass


@dataclass(frozen=True)
class BlcParams:
    """Mini-batch SGD settings for binary linear classifiers."""

    epochs: int = 5
    batch_size: int = 64
    alpha: float = 1e-4
    learning_rate: str = 'optimal'
    eta0: float = 0.01

    @classmethod
    def from_config(cls, blc: Dict[str, Any]) -> 'BlcParams':
        return cls(**{k: blc[k] for k in ('epochs', 'batch_size', 'alpha', 'learning_rate', 'eta0') if k in blc})


@dataclass(frozen=True)
class RelevantFeatureSet:
    """Per-class indices (c, k) of relevant feature maps, in descending relevance."""

    layer_id: int
    k: int
    indices: np.ndarray


@dataclass
class BinaryLinearClassifier:
    """sigmoid(w . x + b) over the flattened relevant maps of one class."""

    class_id: int
    weight: np.ndarray
    bias: float

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(x))


@dataclass
class RacOutput:
    rac_class: int
    rac_prob: float
    probabilities: np.ndarray


@dataclass
class Rac:
    """One auxiliary cell: a feature set and c BLCs on the tap of one conv layer."""

    layer_id: int
    features: RelevantFeatureSet
    blcs: List[BinaryLinearClassifier]
    tap_shape: Tuple[int, int, int]

    @property
    def num_classes(self) -> int:
        return len(self.blcs)

    @property
    def k(self) -> int:
        return self.features.k

    @property
    def input_width(self) -> int:
        _, h, w = self.tap_shape
        return self.k * h * w

    @property
    def parameter_count(self) -> int:
        return self.num_classes * (self.input_width + 1)

    @property
    def flops(self) -> int:
        return self.num_classes * (2 * self.input_width + 1)


def select_relevant_features(m, class_id: int, k: int) -> np.ndarray:
    """
    Indices of the k most relevant feature maps for a class.

    Args:
        m: RelevanceScoreMatrix or (c, r) array
        class_id: Row of M_l
        k: Number of features

    Returns:
        k indices in descending relevance; equal scores keep the lower index first

    Raises:
        RacError: If k is not in [1, r]
    """
    matrix = m.matrix if isinstance(m, RelevanceScoreMatrix) else np.asarray(m)
    r = matrix.shape[1]
    if k < 1 or k > r:
        raise RacError(f"k={k} must be in [1, r] where r={r} feature maps are available at this layer")
    row = matrix[class_id]
    return np.argsort(-row, kind='stable')[:k]


def relevant_feature_set(m: RelevanceScoreMatrix, k: int) -> RelevantFeatureSet:
    indices = np.stack([select_relevant_features(m, j, k) for j in range(m.num_classes)])
    return RelevantFeatureSet(layer_id=m.layer_id, k=int(k), indices=indices)


def binary_labels(labels: Sequence[int], class_id: int) -> np.ndarray:
    """1 where the label equals class_id, else 0."""
    return (np.asarray(labels) == class_id).astype(np.int64)


def train_blc(x: np.ndarray, y: np.ndarray, params: Optional[BlcParams] = None, seed: int = 0,
              class_id: int = 0, positive_weight: float = 1.0) -> BinaryLinearClassifier:
    """
    Train one BLC with class-weighted logistic loss and mini-batch SGD.

    Weights start at zero, so epochs=0 returns the zero classifier.

    Args:
        x: Features (N, D)
        y: Binary labels (N,)
        params: SGD settings
        seed: Seed for batch order and SGD shuffling
        class_id: Class the BLC votes for
        positive_weight: Loss weight of the positive class

    Raises:
        RacError: If y does not contain both classes
    """
    params = params or BlcParams()
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise RacError(f"BLC for class {class_id} needs positive and negative samples, got only {np.unique(y).tolist()}")
    if params.epochs == 0:
        return BinaryLinearClassifier(class_id=class_id, weight=np.zeros(x.shape[1]), bias=0.0)

    clf = SGDClassifier(
        loss='log_loss',
        alpha=params.alpha,
        learning_rate=params.learning_rate,
        eta0=params.eta0,
        class_weight={0: 1.0, 1: float(positive_weight)},
        random_state=seed,
    )
    rng = np.random.default_rng(seed)
    classes = np.array([0, 1])
    n = x.shape[0]
    for _ in range(params.epochs):
        order = rng.permutation(n)
        for start in range(0, n, params.batch_size):
            idx = np.sort(order[start:start + params.batch_size])
            clf.partial_fit(x[idx], y[idx], classes=classes)
    return BinaryLinearClassifier(class_id=class_id, weight=clf.coef_[0].astype(np.float64).copy(),
                                  bias=float(clf.intercept_[0]))


def collect_taps(net: Network, inputs: np.ndarray, layer_ids: Sequence[int],
                 batch_size: int = 256, dtype=np.float32) -> Dict[int, np.ndarray]:
    """Tapped activations of the given conv layers for a whole array of inputs."""
    parts: Dict[int, List[np.ndarray]] = {l: [] for l in layer_ids}
    for start in range(0, len(inputs), batch_size):
        _, _, taps = forward_prefix(net, inputs[start:start + batch_size].astype(np.float64), layer_ids)
        for l in layer_ids:
            parts[l].append(taps[l].astype(dtype))
    return {l: np.concatenate(v) for l, v in parts.items()}


def _class_features(taps: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return taps[:, indices].reshape(taps.shape[0], -1).astype(np.float64)


def _train_class(taps: np.ndarray, labels: np.ndarray, indices: np.ndarray, class_id: int,
                 params: BlcParams, seed: int, positive_weight: float) -> BinaryLinearClassifier:
    x = _class_features(taps, indices)
    return train_blc(x, binary_labels(labels, class_id), params, seed, class_id, positive_weight)


def blc_seeds(seed: int, c: int) -> List[int]:
    """Independent per-BLC seeds, identical for any worker count."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(c)]


def train_rac(net: Network, train_data: LabeledDataset, m: RelevanceScoreMatrix, layer_id: int, k: int,
              params: Optional[BlcParams] = None, seed: int = 0, n_jobs: int = 1,
              max_samples: Optional[int] = None, taps: Optional[np.ndarray] = None) -> Rac:
    """
    Train the auxiliary cell of one validation layer.

    Relevant feature sets are fixed from M_l before any BLC is trained.

    Args:
        net: Trained network
        train_data: Training split
        m: M_l for layer_id
        layer_id: Conv layer id
        k: Relevant feature maps per class
        params: BLC SGD settings
        seed: Root seed; per-class seeds are spawned from it
        n_jobs: joblib workers for the per-class BLCs
        max_samples: Stratified cap on training samples
        taps: Precomputed taps of train_data at layer_id

    Returns:
        Trained Rac

    Raises:
        RacError: If M_l belongs to another layer, k > r, or a class has no samples
    """
    params = params or BlcParams()
    if m.layer_id != layer_id:
        raise RacError(f"relevance matrix is for layer {m.layer_id}, not {layer_id}")
    tap_shape = tuple(net.tap_shape(layer_id))
    if m.num_feature_maps != tap_shape[0]:
        raise RacError(f"relevance matrix has {m.num_feature_maps} maps but layer {layer_id} has {tap_shape[0]}")
    features = relevant_feature_set(m, k)

    if max_samples is not None and len(train_data) > max_samples:
        keep = stratified_subsample(train_data.labels, max_samples, seed)
        train_data = train_data.subset(keep)
        taps = taps[keep] if taps is not None else None
    if taps is None:
        taps = collect_taps(net, train_data.inputs, [layer_id])[layer_id]

    c = net.num_classes
    logger.info(f"Training RAC at layer {layer_id}: {c} BLCs, k={k}, "
                f"{k * tap_shape[1] * tap_shape[2]} inputs each, {len(train_data)} samples")
    blcs = Parallel(n_jobs=n_jobs)(
        delayed(_train_class)(taps, train_data.labels, features.indices[j], j, params, s, c - 1)
        for j, s in enumerate(blc_seeds(seed, c))
    )
    rac = Rac(layer_id=layer_id, features=features, blcs=list(blcs), tap_shape=tap_shape)
    logger.info(f"RAC at layer {layer_id}: {rac.parameter_count} parameters")
    return rac


def rac_probabilities(rac: Rac, taps: np.ndarray) -> np.ndarray:
    """
    BLC probabilities for a batch of taps.

    Args:
        rac: Auxiliary cell
        taps: (N, r, H, W) activations of the RAC's layer

    Returns:
        (N, c) probabilities; column j comes from BLC j on its own feature slice

    Raises:
        ShapeError: If the taps do not match the RAC's layer
    """
    if taps.ndim != 4 or tuple(taps.shape[1:]) != tuple(rac.tap_shape):
        raise ShapeError(f"RAC at layer {rac.layer_id} expects taps of shape {rac.tap_shape}, got {taps.shape[1:]}")
    probs = np.empty((taps.shape[0], rac.num_classes))
    for j, blc in enumerate(rac.blcs):
        probs[:, j] = blc.predict_proba(_class_features(taps, rac.features.indices[j]))
    return probs


def rac_decisions(probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(rac_class, rac_prob) per row; ties go to the lowest class id."""
    return probs.argmax(axis=1), probs.max(axis=1)


def rac_forward(rac: Rac, tap: np.ndarray) -> RacOutput:
    """Evaluate one RAC on a single tap (r, H, W)."""
    probs = rac_probabilities(rac, np.asarray(tap)[None])[0]
    cls = int(np.argmax(probs))
    return RacOutput(rac_class=cls, rac_prob=float(probs[cls]), probabilities=probs)


def blc_accuracy(rac: Rac, taps: np.ndarray, labels: np.ndarray) -> List[float]:
    """Binary accuracy of each BLC at threshold 0.5."""
    probs = rac_probabilities(rac, taps)
    return [float(accuracy_score(binary_labels(labels, j), probs[:, j] > 0.5)) for j in range(rac.num_classes)]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_rac_bundle(racs: Sequence[Rac], path: Path, provenance: Optional[Dict[str, Any]] = None) -> None:
    """Write all RACs of a run plus provenance to one joblib file."""
    state = {
        'format': RAC_FORMAT,
        'version': RAC_FORMAT_VERSION,
        'provenance': dict(provenance or {}),
        'racs': [
            {
                'layer_id': int(r.layer_id),
                'k': int(r.k),
                'tap_shape': [int(v) for v in r.tap_shape],
                'indices': np.asarray(r.features.indices, dtype=np.int64),
                'weights': np.stack([b.weight for b in r.blcs]),
                'biases': np.array([b.bias for b in r.blcs]),
            }
            for r in racs
        ],
    }
    atomic_dump(state, path)
    logger.info(f"Saved {len(racs)} RACs: {path}")


def load_rac_bundle(path: Path) -> Tuple[List[Rac], Dict[str, Any]]:
    """
    Read a bundle written by save_rac_bundle.

    Raises:
        FileNotFoundError: If the file is missing
        CorruptModelFileError: If it cannot be decoded
        ModelVersionError: If the format version differs
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"RAC bundle not found: {path}")
    try:
        state = joblib.load(path)
    except Exception as e:
        raise CorruptModelFileError(f"cannot decode RAC bundle {path}: {e}") from e
    if not isinstance(state, dict) or state.get('format') != RAC_FORMAT:
        raise CorruptModelFileError(f"{path} is not a RAC bundle")
    if state.get('version') != RAC_FORMAT_VERSION:
        raise ModelVersionError(f"RAC bundle version {state.get('version')} is not supported")

    racs = []
    for entry in state['racs']:
        features = RelevantFeatureSet(layer_id=entry['layer_id'], k=entry['k'], indices=entry['indices'])
        blcs = [BinaryLinearClassifier(class_id=j, weight=w, bias=float(b))
                for j, (w, b) in enumerate(zip(entry['weights'], entry['biases']))]
        racs.append(Rac(layer_id=entry['layer_id'], features=features, blcs=blcs,
                        tap_shape=tuple(entry['tap_shape'])))
    return racs, state['provenance']
