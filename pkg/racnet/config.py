#!/usr/bin/env python3
"""
racnet - Experiment Configuration

Defaults live in DEFAULTS (mirrored by config/default.yaml). A user YAML file
is deep-merged over them, then CLI overrides; environment references in path
fields are expanded and the result is validated before any compute.
"""

import copy
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import joblib
import yaml

from racnet.network import write_text
from racnet.validation import ValidationError, validate_experiment_config

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    'dataset': {
        'name': 'synthetic10',
        'format': 'synthetic',
        'path': None,
        'download': False,
        'val_fraction': 0.1,
        'test_fraction': 0.1,
        'max_train': None,
        'max_eval': None,
        'synthetic': {
            'num_classes': 10,
            'shape': [3, 32, 32],
            'samples': 5000,
            'noise': 0.35,
            'smoothing': 2.0,
        },
    },
    'architecture': {
        'name': 'vgg_desk',
        'widths': [32, 32, 64, 64, 128, 128, 128, 128],
        'pool_after': [2, 4, 6],
        'kernel_size': 3,
    },
    'seed': 0,
    'training': {
        'learning_rate': 0.05,
        'momentum': 0.9,
        'weight_decay': 0.0005,
        'batch_size': 64,
        'epochs': 15,
        'lr_decay': 0.5,
        'lr_decay_every': 5,
    },
    'lrp': {
        'alpha': 2.0,
        'beta': 1.0,
        'stabilizer_eps': 1.0e-9,
        'batch_size': 32,
        'max_samples': None,
    },
    'rac': {
        'validation_layers': [5, 6],
        'k': 64,
        'max_train_samples': 5000,
        'blc': {
            'epochs': 5,
            'batch_size': 64,
            'alpha': 0.0001,
            'learning_rate': 'optimal',
            'eta0': 0.01,
        },
    },
    'inference': {
        'delta_th': 0.9,
        'batch_size': 128,
    },
    'sweep': {
        'layer_pairs': [[3, 4], [4, 5], [5, 6], [6, 7]],
        'k': [8, 16, 32, 64],
        'delta_th': [0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
        'seeds': [0, 1, 2],
    },
    'attack': {
        'mode': 'zero_knowledge',
        'paired': True,
        'target': 'next',
        'samples': 100,
        'max_iterations': 200,
        'learning_rate': 0.01,
        'initial_const': 1.0,
        'const_steps': 3,
        'const_growth': 10.0,
        'confidence': 0.0,
        'rac_loss_weight': 1.0,
        'clip_min': 0.0,
        'clip_max': 1.0,
        'batch_size': 32,
    },
    'ood': {
        'samples': 1000,
        'sources': [
            {'kind': 'uniform', 'name': 'uniform'},
            {'kind': 'gaussian', 'name': 'gaussian', 'mean': 0.5, 'std': 0.25},
        ],
    },
    'output_dir': './runs/default',
    'threads': 1,
    'logging': {
        'level': 'INFO',
        'format': '%(asctime)s - %(levelname)s - %(message)s',
        'file': None,
        'console': True,
    },
}

# Sections whose nested keys are free-form
_OPEN_SECTIONS = ('dataset.synthetic',)


@dataclass
class ExperimentConfig:
    """Validated experiment configuration, one attribute per YAML section."""

    dataset: Dict[str, Any] = field(default_factory=dict)
    architecture: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    training: Dict[str, Any] = field(default_factory=dict)
    lrp: Dict[str, Any] = field(default_factory=dict)
    rac: Dict[str, Any] = field(default_factory=dict)
    inference: Dict[str, Any] = field(default_factory=dict)
    sweep: Dict[str, Any] = field(default_factory=dict)
    attack: Dict[str, Any] = field(default_factory=dict)
    ood: Dict[str, Any] = field(default_factory=dict)
    output_dir: str = './runs/default'
    threads: int = 1
    logging: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        return cls(**copy.deepcopy(data))

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def hash(self) -> str:
        """Content hash of everything that affects results (not output_dir, threads or logging)."""
        d = self.to_dict()
        for key in ('output_dir', 'threads', 'logging'):
            d.pop(key)
        return joblib.hash(d)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


def deep_merge(base: Dict[str, Any], update: Dict[str, Any], path: str = '') -> Dict[str, Any]:
    """
    Merge update into a copy of base. Dicts merge recursively, everything else replaces.

    Raises:
        ValidationError: On keys that do not exist in base
    """
    merged = copy.deepcopy(base)
    unknown = []
    for key, value in (update or {}).items():
        dotted = f"{path}.{key}" if path else key
        if key not in merged and path not in _OPEN_SECTIONS:
            unknown.append(dotted)
            continue
        if isinstance(merged.get(key), dict) and isinstance(value, dict):
            merged[key] = deep_merge(merged[key], value, dotted)
        else:
            merged[key] = copy.deepcopy(value)
    if unknown:
        raise ValidationError(f"unknown config fields: {', '.join(unknown)}")
    return merged


def _expand(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    return os.path.expanduser(os.path.expandvars(str(value)))


def expand_paths(data: Dict[str, Any]) -> Dict[str, Any]:
    """Expand $VAR / ${VAR} and ~ in path fields."""
    data['dataset']['path'] = _expand(data['dataset'].get('path'))
    data['output_dir'] = _expand(data['output_dir'])
    data['logging']['file'] = _expand(data['logging'].get('file'))
    for source in data['ood'].get('sources') or []:
        if source.get('path') is not None:
            source['path'] = _expand(source['path'])
    return data


def load_yaml(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ValidationError(f"config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a mapping at the top level")
    return data


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None,
                validate: bool = True) -> ExperimentConfig:
    """
    Build an ExperimentConfig from defaults, an optional YAML file and overrides.

    Args:
        path: User YAML config
        overrides: Nested dict applied last (CLI flags)
        validate: Run validate_experiment_config

    Raises:
        ValidationError: On unknown fields, bad YAML or invalid values
    """
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        data = deep_merge(data, load_yaml(path))
        logger.info(f"Loaded config: {path}")
    if overrides:
        data = deep_merge(data, overrides)
    config = ExperimentConfig.from_dict(expand_paths(data))
    if validate:
        validate_experiment_config(config)
    return config


def save_config(config: ExperimentConfig, path: Path) -> None:
    write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), path)


def setup_logging(config: ExperimentConfig, level: Optional[str] = None) -> None:
    """Configure root logging once from the `logging` section."""
    section = config.logging
    handlers: List[logging.Handler] = []
    if section.get('console', True):
        handlers.append(logging.StreamHandler())
    if section.get('file'):
        Path(section['file']).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(section['file']))
    logging.basicConfig(
        level=getattr(logging, str(level or section.get('level', 'INFO')).upper(), logging.INFO),
        format=section.get('format', '%(asctime)s - %(levelname)s - %(message)s'),
        handlers=handlers or [logging.NullHandler()],
        force=True,
    )
