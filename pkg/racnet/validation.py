#!/usr/bin/env python3
"""
racnet - Data Validation and Error Handling Utilities

This module provides validation functions for experiment configuration,
hyper-parameters and labeled datasets. Every check raises ValidationError
with a message prefixed by the offending field so that a rejected config can
be fixed without reading code.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class ValidationError(Exception):
    """Custom exception for validation errors."""
    pass


class DataValidator:
    """Validator for input files, arrays and labeled datasets."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        """
        Initialize validator with configuration.

        Args:
            config: Optional configuration dictionary with validation parameters
        """
        self.config = config or {}
        self.max_input_size_mb = self.config.get('max_input_size', 5000)

    def validate_file_exists(self, file_path: Path, field: str = 'path') -> None:
        """
        Validate that a file exists and is readable.

        Args:
            file_path: Path to file
            field: Config field name used in the error message

        Raises:
            ValidationError: If file doesn't exist or isn't a file
        """
        file_path = Path(file_path)
        if not file_path.exists():
            raise ValidationError(f"{field}: file not found: {file_path}")

        if not file_path.is_file():
            raise ValidationError(f"{field}: path is not a file: {file_path}")

        size_mb = file_path.stat().st_size / (1024 * 1024)
        if size_mb > self.max_input_size_mb:
            logger.warning(
                f"File size ({size_mb:.2f} MB) exceeds recommended maximum "
                f"({self.max_input_size_mb} MB): {file_path}"
            )

        logger.debug(f"File validation passed: {file_path}")

    def validate_directory(self, dir_path: Path, field: str = 'path') -> None:
        """
        Validate that a directory exists.

        Raises:
            ValidationError: If it doesn't exist or isn't a directory
        """
        dir_path = Path(dir_path)
        if not dir_path.exists():
            raise ValidationError(f"{field}: not found: {dir_path}")
        if not dir_path.is_dir():
            raise ValidationError(f"{field}: path is not a directory: {dir_path}")

    def validate_array(
        self, array: np.ndarray, name: str,
        expected_shape: Optional[Tuple] = None,
        value_range: Optional[Tuple[float, float]] = None
    ) -> None:
        """
        Validate numpy array properties.

        Args:
            array: Numpy array to validate
            name: Name for logging and error messages
            expected_shape: Expected shape (optional)
            value_range: Expected (min, max) value range (optional, warns only)

        Raises:
            ValidationError: If the array is missing, empty, misshaped or non-finite
        """
        if array is None:
            raise ValidationError(f"{name} is None")

        if array.size == 0:
            raise ValidationError(f"{name} is empty")

        if expected_shape is not None and tuple(array.shape) != tuple(expected_shape):
            raise ValidationError(
                f"{name} shape mismatch: expected {tuple(expected_shape)}, "
                f"got {tuple(array.shape)}"
            )

        if not np.all(np.isfinite(array)):
            n_bad = int(np.size(array) - np.isfinite(array).sum())
            raise ValidationError(f"{name} has {n_bad} non-finite values")

        if value_range is not None:
            data_min = float(np.min(array))
            data_max = float(np.max(array))
            expected_min, expected_max = value_range
            if data_min < expected_min or data_max > expected_max:
                logger.warning(
                    f"{name} values [{data_min:.2f}, {data_max:.2f}] "
                    f"outside expected range [{expected_min}, {expected_max}]"
                )

        logger.debug(f"Array validation passed: {name} (shape={array.shape})")

    def validate_labels(self, labels: np.ndarray, num_classes: int, name: str = 'labels') -> None:
        """
        Validate class labels against the number of classes.

        Raises:
            ValidationError: If any label is outside [0, num_classes)
        """
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ValidationError(f"{name} must be one-dimensional, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValidationError(
                f"{name} must lie in [0, {num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )

    def validate_dataset(self, dataset, input_shape: Sequence[int], num_classes: int) -> None:
        """
        Validate a LabeledDataset against a network's input shape and class count.

        Raises:
            ValidationError: On empty data, shape mismatch or out-of-range labels
        """
        name = f"{dataset.split} split"
        if len(dataset) == 0:
            raise ValidationError(f"{name} is empty")
        if tuple(dataset.inputs.shape[1:]) != tuple(input_shape):
            raise ValidationError(
                f"{name} input shape {tuple(dataset.inputs.shape[1:])} does not match "
                f"expected input shape {tuple(input_shape)}"
            )
        if len(dataset.labels) != len(dataset.inputs):
            raise ValidationError(
                f"{name} has {len(dataset.inputs)} inputs but {len(dataset.labels)} labels"
            )
        self.validate_labels(dataset.labels, num_classes, name=f"{name} labels")


class ParameterValidator:
    """Validator for method hyper-parameters."""

    @staticmethod
    def validate_delta_th(delta_th: float) -> None:
        """
        Validate the RAC confidence threshold.

        Raises:
            ValidationError: If outside [0, 1]
        """
        if not isinstance(delta_th, (int, float)) or not (0.0 <= delta_th <= 1.0):
            raise ValidationError(f"delta_th must be in [0, 1], got {delta_th}")

    @staticmethod
    def validate_lrp_params(alpha: float, beta: float, stabilizer_eps: float) -> None:
        """
        Validate alpha-beta rule parameters.

        Raises:
            ValidationError: If alpha - beta != 1, beta < 0 or the stabilizer is negative
        """
        if abs((alpha - beta) - 1.0) > 1e-12:
            raise ValidationError(f"alpha - beta must equal 1, got alpha={alpha}, beta={beta}")
        if beta < 0:
            raise ValidationError(f"beta must be non-negative, got {beta}")
        if stabilizer_eps < 0:
            raise ValidationError(f"stabilizer_eps must be non-negative, got {stabilizer_eps}")

    @staticmethod
    def validate_k(k: int, num_feature_maps: Optional[int] = None) -> None:
        """
        Validate the number of relevant feature maps.

        Args:
            k: Number of relevant features per class
            num_feature_maps: r, the feature-map count at the layer (optional)

        Raises:
            ValidationError: If k is not a positive int or exceeds r
        """
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
            raise ValidationError(f"k must be a positive integer, got {k!r}")
        if num_feature_maps is not None and k > num_feature_maps:
            raise ValidationError(
                f"k={k} exceeds the {num_feature_maps} feature maps (r) available at this layer"
            )

    @staticmethod
    def validate_validation_layers(layers: Sequence[int], num_conv_layers: Optional[int] = None) -> None:
        """
        Validate validation-layer conv ordinals (1-based).

        Raises:
            ValidationError: If fewer than two, not strictly increasing or out of range
        """
        layers = list(layers)
        if len(layers) < 2:
            raise ValidationError(f"at least two validation layers are required, got {layers}")
        if any(not isinstance(v, (int, np.integer)) or v < 1 for v in layers):
            raise ValidationError(f"validation layers must be positive conv ordinals, got {layers}")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValidationError(f"validation layers must be strictly increasing, got {layers}")
        if num_conv_layers is not None and layers[-1] > num_conv_layers:
            raise ValidationError(
                f"validation layer {layers[-1]} exceeds the {num_conv_layers} conv layers of the network"
            )

    @staticmethod
    def validate_positive_int(value: Any, name: str) -> None:
        """Validate a positive integer hyper-parameter."""
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise ValidationError(f"{name} must be a positive integer, got {value!r}")

    @staticmethod
    def validate_non_negative_int(value: Any, name: str) -> None:
        """Validate a non-negative integer hyper-parameter."""
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 0:
            raise ValidationError(f"{name} must be a non-negative integer, got {value!r}")

    @staticmethod
    def validate_positive_float(value: Any, name: str) -> None:
        """Validate a strictly positive real hyper-parameter."""
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            raise ValidationError(f"{name} must be a positive number, got {value!r}")

    @staticmethod
    def validate_fraction(value: Any, name: str) -> None:
        """Validate a split fraction in the open interval (0, 1)."""
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not (0.0 < value < 1.0):
            raise ValidationError(f"{name} must be in (0, 1), got {value!r}")


DATASET_FORMATS = ('cifar10', 'idx', 'synthetic')
ARCHITECTURES = ('vgg_desk', 'small_cnn')
ATTACK_MODES = ('zero_knowledge', 'full_knowledge')
TARGET_RULES = ('next', 'random', 'least_likely')
OOD_KINDS = ('uniform', 'gaussian', 'dataset', 'images')


class _Collector:
    """Runs checks and collects their failures under dotted field names."""

    def __init__(self):
        self.errors: List[str] = []

    def check(self, field: str, fn, *args) -> None:
        try:
            fn(*args)
        except ValidationError as e:
            self.errors.append(f"{field}: {e}")

    def require(self, field: str, condition: bool, message: str) -> None:
        if not condition:
            self.errors.append(f"{field}: {message}")


def validate_experiment_config(config) -> None:
    """
    Validate a whole experiment configuration before any compute.

    All failures are collected and reported together, one line per field.

    Args:
        config: ExperimentConfig instance

    Raises:
        ValidationError: If any field is invalid
    """
    logger.info("Validating experiment configuration...")
    pv = ParameterValidator()
    c = _Collector()

    ds = config.dataset
    fmt = ds.get('format')
    c.require('dataset.format', fmt in DATASET_FORMATS,
              f"must be one of {DATASET_FORMATS}, got {fmt!r}")
    if fmt in ('cifar10', 'idx'):
        path = ds.get('path')
        if not path:
            c.errors.append("dataset.path: required for format " + repr(fmt))
        elif not Path(path).exists() and not (fmt == 'cifar10' and ds.get('download')):
            c.errors.append(f"dataset.path: not found: {path}")
    if fmt == 'synthetic':
        syn = ds.get('synthetic', {})
        c.check('dataset.synthetic.num_classes', pv.validate_positive_int, syn.get('num_classes'), 'num_classes')
        c.require('dataset.synthetic.num_classes', (syn.get('num_classes') or 0) >= 2, "must be >= 2")
        c.check('dataset.synthetic.samples', pv.validate_positive_int, syn.get('samples'), 'samples')
        shape = syn.get('shape')
        c.require('dataset.synthetic.shape',
                  isinstance(shape, (list, tuple)) and len(shape) == 3 and all(
                      isinstance(v, int) and v > 0 for v in shape),
                  f"must be [channels, height, width], got {shape!r}")
    c.check('dataset.val_fraction', pv.validate_fraction, ds.get('val_fraction'), 'val_fraction')
    c.check('dataset.test_fraction', pv.validate_fraction, ds.get('test_fraction'), 'test_fraction')
    if isinstance(ds.get('val_fraction'), float) and isinstance(ds.get('test_fraction'), float):
        c.require('dataset', ds['val_fraction'] + ds['test_fraction'] < 1.0,
                  "val_fraction + test_fraction must be < 1")
    for cap in ('max_train', 'max_eval'):
        if ds.get(cap) is not None:
            c.check(f'dataset.{cap}', pv.validate_positive_int, ds.get(cap), cap)

    arch = config.architecture
    c.require('architecture.name', arch.get('name') in ARCHITECTURES,
              f"must be one of {ARCHITECTURES}, got {arch.get('name')!r}")
    widths = arch.get('widths') or []
    c.require('architecture.widths', len(widths) >= 2 and all(
        isinstance(w, int) and w > 0 for w in widths), f"need >= 2 positive ints, got {widths!r}")
    for p in arch.get('pool_after') or []:
        c.require('architecture.pool_after', isinstance(p, int) and 1 <= p <= len(widths),
                  f"entry {p!r} is not a conv ordinal in [1, {len(widths)}]")

    c.check('seed', pv.validate_non_negative_int, config.seed, 'seed')

    tr = config.training
    c.check('training.learning_rate', pv.validate_positive_float, tr.get('learning_rate'), 'learning_rate')
    c.check('training.batch_size', pv.validate_positive_int, tr.get('batch_size'), 'batch_size')
    c.check('training.epochs', pv.validate_non_negative_int, tr.get('epochs'), 'epochs')
    c.require('training.momentum', 0.0 <= float(tr.get('momentum', 0.0)) < 1.0, "must be in [0, 1)")

    lrp_cfg = config.lrp
    c.check('lrp', pv.validate_lrp_params, lrp_cfg.get('alpha'), lrp_cfg.get('beta'),
            lrp_cfg.get('stabilizer_eps'))
    c.check('lrp.batch_size', pv.validate_positive_int, lrp_cfg.get('batch_size'), 'batch_size')

    rac_cfg = config.rac
    n_conv = len(widths) if widths else None
    c.check('rac.validation_layers', pv.validate_validation_layers,
            rac_cfg.get('validation_layers', []), n_conv)
    c.check('rac.k', pv.validate_k, rac_cfg.get('k'))
    blc = rac_cfg.get('blc', {})
    c.check('rac.blc.epochs', pv.validate_non_negative_int, blc.get('epochs'), 'epochs')
    c.check('rac.blc.batch_size', pv.validate_positive_int, blc.get('batch_size'), 'batch_size')

    c.check('inference.delta_th', pv.validate_delta_th, config.inference.get('delta_th'))

    sw = config.sweep
    c.require('sweep.layer_pairs', bool(sw.get('layer_pairs')), "grid must be nonempty")
    for pair in sw.get('layer_pairs') or []:
        c.check('sweep.layer_pairs', pv.validate_validation_layers, pair, n_conv)
    c.require('sweep.k', bool(sw.get('k')), "grid must be nonempty")
    for k in sw.get('k') or []:
        c.check('sweep.k', pv.validate_k, k)
    c.require('sweep.delta_th', bool(sw.get('delta_th')), "grid must be nonempty")
    for d in sw.get('delta_th') or []:
        c.check('sweep.delta_th', pv.validate_delta_th, d)
    c.require('sweep.seeds', bool(sw.get('seeds')), "must list at least one seed")

    at = config.attack
    c.require('attack.mode', at.get('mode') in ATTACK_MODES,
              f"must be one of {ATTACK_MODES}, got {at.get('mode')!r}")
    c.require('attack.target', at.get('target') in TARGET_RULES,
              f"must be one of {TARGET_RULES}, got {at.get('target')!r}")
    c.check('attack.max_iterations', pv.validate_non_negative_int, at.get('max_iterations'), 'max_iterations')
    c.check('attack.samples', pv.validate_positive_int, at.get('samples'), 'samples')
    if at.get('mode') == 'full_knowledge' or at.get('paired'):
        c.check('attack.rac_loss_weight', pv.validate_positive_float,
                at.get('rac_loss_weight'), 'rac_loss_weight')

    ood = config.ood
    c.check('ood.samples', pv.validate_positive_int, ood.get('samples'), 'samples')
    for i, src in enumerate(ood.get('sources') or []):
        c.require(f'ood.sources[{i}].kind', src.get('kind') in OOD_KINDS,
                  f"must be one of {OOD_KINDS}, got {src.get('kind')!r}")
        if src.get('kind') in ('dataset', 'images') and not src.get('path'):
            c.errors.append(f"ood.sources[{i}].path: required for kind {src.get('kind')!r}")

    c.check('threads', pv.validate_positive_int, config.threads, 'threads')

    if c.errors:
        for line in c.errors:
            logger.error(f"Invalid config field - {line}")
        raise ValidationError("invalid configuration:\n  " + "\n  ".join(c.errors))

    logger.info("Configuration validation passed ✓")
