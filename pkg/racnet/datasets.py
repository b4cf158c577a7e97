#!/usr/bin/env python3
"""
racnet - Dataset Ingestion

Loads labeled image data into train / validation / test splits:
- cifar10: binary batches (data_batch_1..5.bin, test_batch.bin)
- idx: MNIST-style IDX files, optionally gzip-compressed
- synthetic: smooth per-class templates plus noise, fully described by the config

Also reads folders of PNG/JPEG images as out-of-distribution corpora and
downloads CIFAR-10 on request. Inputs are float32 scaled to [0, 1].
"""

import gzip
import logging
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import imageio
import joblib
import numpy as np
import requests
from PIL import Image
from scipy.ndimage import gaussian_filter
from sklearn.model_selection import train_test_split

from racnet.network import LabeledDataset
from racnet.validation import DataValidator, ValidationError

logger = logging.getLogger(__name__)

CIFAR10_URL = 'https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz'
CIFAR10_DIRNAME = 'cifar-10-batches-bin'
CIFAR10_RECORD = 1 + 3 * 32 * 32

IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype('>i2'),
    0x0C: np.dtype('>i4'),
    0x0D: np.dtype('>f4'),
    0x0E: np.dtype('>f8'),
}

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg')


@dataclass
class DatasetSplits:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset

    @property
    def num_classes(self) -> int:
        return int(self.train.num_classes)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train.inputs.shape[1:])


def dataset_tag(spec: Dict[str, Any], seed: int) -> str:
    """Stable identifier of a dataset spec + split seed, used in cache keys."""
    return joblib.hash([sorted(spec.items(), key=lambda kv: kv[0]), int(seed)])


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def stratified_subsample(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Sorted indices of a class-stratified subsample of size n."""
    labels = np.asarray(labels)
    if n >= labels.size:
        return np.arange(labels.size)
    index = np.arange(labels.size)
    try:
        keep, _ = train_test_split(index, train_size=n, stratify=labels, random_state=seed)
    except ValueError:
        # a class with a single sample cannot be stratified
        keep = np.random.default_rng(seed).choice(index, size=n, replace=False)
    return np.sort(keep)


def _split(data: LabeledDataset, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    index = np.arange(len(data))
    try:
        rest, held = train_test_split(index, test_size=fraction, stratify=data.labels, random_state=seed)
    except ValueError:
        rest, held = train_test_split(index, test_size=fraction, random_state=seed)
    return np.sort(rest), np.sort(held)


def split_dataset(data: LabeledDataset, val_fraction: float = 0.1, test_fraction: float = 0.1,
                  seed: int = 0) -> DatasetSplits:
    """Stratified train / validation / test split of one labeled pool."""
    rest, test = _split(data, test_fraction, seed)
    remaining = data.subset(rest)
    train, val = _split(remaining, val_fraction / (1.0 - test_fraction), seed)
    return DatasetSplits(
        train=remaining.subset(train, 'train'),
        validation=remaining.subset(val, 'validation'),
        test=data.subset(test, 'test'),
    )


def _with_canonical_test(train_pool: LabeledDataset, test: LabeledDataset, val_fraction: float,
                         seed: int) -> DatasetSplits:
    train, val = _split(train_pool, val_fraction, seed)
    test.split = 'test'
    return DatasetSplits(train=train_pool.subset(train, 'train'),
                         validation=train_pool.subset(val, 'validation'), test=test)


def _cap(data: LabeledDataset, cap: Optional[int], seed: int) -> LabeledDataset:
    if cap is None or len(data) <= cap:
        return data
    return data.subset(stratified_subsample(data.labels, cap, seed))


# ---------------------------------------------------------------------------
# Synthetic
# ---------------------------------------------------------------------------

def make_synthetic(num_classes: int = 10, shape: Sequence[int] = (3, 32, 32), samples: int = 5000,
                   noise: float = 0.35, smoothing: float = 2.0, seed: int = 0) -> LabeledDataset:
    """
    Smooth random class templates with additive Gaussian noise, clipped to [0, 1].

    Labels are balanced (sample i has class i mod c before shuffling).
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    templates = rng.normal(size=(num_classes, c, h, w))
    templates = gaussian_filter(templates, sigma=(0, 0, smoothing, smoothing))
    lo = templates.min(axis=(1, 2, 3), keepdims=True)
    hi = templates.max(axis=(1, 2, 3), keepdims=True)
    templates = (templates - lo) / np.maximum(hi - lo, 1e-12)

    labels = rng.permutation(np.arange(samples) % num_classes)
    inputs = templates[labels] + noise * rng.normal(size=(samples, c, h, w))
    inputs = np.clip(inputs, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(inputs=inputs, labels=labels, split='all', num_classes=num_classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _open(path: Path):
    return gzip.open(path, 'rb') if path.suffix == '.gz' else open(path, 'rb')


def read_idx(path: Path) -> np.ndarray:
    """
    Read one IDX file.

    Raises:
        ValidationError: If the file is missing, has a bad magic number or a payload of the wrong length
    """
    path = Path(path)
    DataValidator().validate_file_exists(path, 'dataset.path')
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise ValidationError(f"{path}: not an IDX file (bad magic number)")
    dtype = np.dtype(IDX_DTYPES[raw[2]])
    ndim = raw[3]
    header = 4 + 4 * ndim
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], 'big') for i in range(ndim))
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise ValidationError(f"{path}: IDX payload is {len(raw) - header} bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def _find(root: Path, stem: str) -> Optional[Path]:
    for name in (stem, stem + '.gz'):
        if (root / name).exists():
            return root / name
    return None


def _idx_pair(root: Path, prefix: str, split: str) -> Optional[LabeledDataset]:
    images = _find(root, f'{prefix}-images-idx3-ubyte')
    labels = _find(root, f'{prefix}-labels-idx1-ubyte')
    if images is None or labels is None:
        return None
    x = read_idx(images)
    y = read_idx(labels).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValidationError(f"{images}: {x.shape[0]} images but {y.shape[0]} labels")
    if x.ndim == 3:
        x = x[:, None]
    return LabeledDataset(inputs=(x.astype(np.float32) / 255.0), labels=y, split=split)


def load_idx(path: Path) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    """Training pool and, when t10k files exist, the canonical test split."""
    root = Path(path)
    train = _idx_pair(root, 'train', 'train')
    if train is None:
        raise ValidationError(f"dataset.path: no train-images-idx3-ubyte / train-labels-idx1-ubyte in {root}")
    return train, _idx_pair(root, 't10k', 'test')


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def read_cifar10_batch(path: Path) -> LabeledDataset:
    """
    Read one CIFAR-10 binary batch of 3073-byte records.

    Raises:
        ValidationError: If the file is missing or not a whole number of records
    """
    path = Path(path)
    DataValidator().validate_file_exists(path, 'dataset.path')
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR10_RECORD:
        raise ValidationError(f"{path}: truncated CIFAR-10 record ({raw.size} bytes is not a multiple of {CIFAR10_RECORD})")
    records = raw.reshape(-1, CIFAR10_RECORD)
    inputs = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(inputs=inputs, labels=records[:, 0].astype(np.int64), num_classes=10)


def _cifar_root(path: Path) -> Path:
    path = Path(path)
    return path / CIFAR10_DIRNAME if (path / CIFAR10_DIRNAME).is_dir() else path


def load_cifar10(path: Path) -> Tuple[LabeledDataset, LabeledDataset]:
    root = _cifar_root(path)
    batches = [root / f'data_batch_{i}.bin' for i in range(1, 6)]
    missing = [str(b) for b in batches + [root / 'test_batch.bin'] if not b.exists()]
    if missing:
        raise ValidationError(f"dataset.path: missing CIFAR-10 files {missing}")
    train = read_cifar10_batch(batches[0])
    for b in batches[1:]:
        train = train.concat(read_cifar10_batch(b))
    test = read_cifar10_batch(root / 'test_batch.bin')
    test.split = 'test'
    return train, test


def fetch_cifar10(dest: Path, url: str = CIFAR10_URL, timeout: int = 60) -> Path:
    """
    Download and unpack the CIFAR-10 binary archive into dest.

    Returns:
        Directory holding the batch files

    Raises:
        requests.exceptions.RequestException: If the download fails
    """
    dest = Path(dest)
    root = dest / CIFAR10_DIRNAME
    if (root / 'test_batch.bin').exists():
        logger.info(f"CIFAR-10 already present at {root}")
        return root
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / 'cifar-10-binary.tar.gz'
    logger.info(f"Downloading CIFAR-10 from {url}")
    with requests.get(url, stream=True, timeout=timeout) as response:
        response.raise_for_status()
        downloaded = 0
        with open(archive, 'wb') as f:
            for chunk in response.iter_content(chunk_size=1 << 20):
                if chunk:
                    f.write(chunk)
                    downloaded += len(chunk)
    logger.info(f"Downloaded {downloaded / 1e6:.1f} MB, extracting")
    with tarfile.open(archive, 'r:gz') as tar:
        tar.extractall(dest)
    archive.unlink()
    return root


# ---------------------------------------------------------------------------
# Image folders
# ---------------------------------------------------------------------------

def load_image_folder(path: Path, shape: Sequence[int], limit: Optional[int] = None) -> np.ndarray:
    """
    Read PNG/JPEG files, resized to (C, H, W) and scaled to [0, 1].

    Raises:
        ValidationError: If the folder is missing or has no images
    """
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"image folder not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise ValidationError(f"no PNG/JPEG images in {root}")
    c, h, w = shape
    mode = 'L' if c == 1 else 'RGB'
    out = np.empty((len(files), c, h, w), dtype=np.float32)
    for i, f in enumerate(files):
        img = Image.fromarray(np.asarray(imageio.imread(f))).convert(mode).resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        out[i] = arr[None] if c == 1 else arr.transpose(2, 0, 1)
    logger.info(f"Loaded {len(files)} images from {root} at {tuple(shape)}")
    return out


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def load_dataset(spec: Dict[str, Any], seed: int = 0) -> DatasetSplits:
    """
    Load the configured dataset and split it.

    Args:
        spec: The `dataset` config section
        seed: Split seed

    Returns:
        DatasetSplits with split tags train / validation / test

    Raises:
        ValidationError: If files are missing or malformed
    """
    fmt = spec.get('format')
    val_fraction = spec.get('val_fraction', 0.1)
    test_fraction = spec.get('test_fraction', 0.1)

    if fmt == 'synthetic':
        syn = spec.get('synthetic', {})
        pool = make_synthetic(
            num_classes=syn.get('num_classes', 10),
            shape=tuple(syn.get('shape', (3, 32, 32))),
            samples=syn.get('samples', 5000),
            noise=syn.get('noise', 0.35),
            smoothing=syn.get('smoothing', 2.0),
            seed=syn.get('seed', seed),
        )
        splits = split_dataset(pool, val_fraction, test_fraction, seed)
    elif fmt in ('cifar10', 'idx'):
        path = spec.get('path')
        if not path:
            raise ValidationError(f"dataset.path: required for format {fmt!r}")
        path = Path(path)
        if fmt == 'cifar10':
            if spec.get('download') and not (_cifar_root(path) / 'test_batch.bin').exists():
                fetch_cifar10(path)
            DataValidator().validate_directory(path, 'dataset.path')
            train_pool, test = load_cifar10(path)
            splits = _with_canonical_test(train_pool, test, val_fraction, seed)
        else:
            DataValidator().validate_directory(path, 'dataset.path')
            train_pool, test = load_idx(path)
            if test is None:
                splits = split_dataset(train_pool, val_fraction, test_fraction, seed)
            else:
                splits = _with_canonical_test(train_pool, test, val_fraction, seed)
    else:
        raise ValidationError(f"dataset.format: unsupported format {fmt!r}")

    c = int(max(splits.train.labels.max(), splits.test.labels.max())) + 1
    for part in (splits.train, splits.validation, splits.test):
        part.num_classes = c
    splits.train = _cap(splits.train, spec.get('max_train'), seed)
    splits.validation = _cap(splits.validation, spec.get('max_eval'), seed)
    splits.test = _cap(splits.test, spec.get('max_eval'), seed)
    checker = DataValidator()
    for part in (splits.train, splits.validation, splits.test):
        checker.validate_dataset(part, splits.input_shape, c)
        checker.validate_array(part.inputs, f"{part.split} inputs", value_range=(0.0, 1.0))

    logger.info(f"Dataset {spec.get('name', fmt)}: train {len(splits.train)}, "
                f"validation {len(splits.validation)}, test {len(splits.test)}, "
                f"{c} classes, input {splits.input_shape}")
    return splits
