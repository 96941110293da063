import logging
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = 'train'
    norm_stats: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray, split: str) -> 'Dataset':
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes, split, dict(self.norm_stats))


def _standardize(x: np.ndarray, per_channel: bool) -> Tuple[np.ndarray, Dict[str, List[float]]]:
    axes = (0, 2, 3) if per_channel and x.ndim == 4 else None
    mean = x.mean(axis=axes, keepdims=axes is not None)
    std = x.std(axis=axes, keepdims=axes is not None) + 1e-8
    stats = {'mean': np.ravel(mean).tolist(), 'std': np.ravel(std).tolist()}
    return (x - mean) / std, stats


def gen_synthetic(classes: int, shape: Sequence[int], n: int, seed: int,
                  separation: float = 0.35, noise: float = 0.8) -> Dataset:
    """``n`` samples per class: Gaussian clusters for a 1-d shape, oriented stripe textures for C,H,W.

    Image classes are (stripe frequency, orientation) pairs with a random phase per sample.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    labels = np.repeat(np.arange(classes), n)
    if len(shape) == 1:
        means = rng.normal(0.0, separation, size=(classes, shape[0]))
        inputs = means[labels] + rng.normal(0.0, 1.0, size=(len(labels), shape[0]))
        inputs, stats = _standardize(inputs, per_channel=False)
    elif len(shape) == 3:
        c, h, w = shape
        yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing='ij')
        freq = 1 + labels // 4
        theta = (labels % 4) * np.pi / 4
        phase = rng.uniform(0.0, 2 * np.pi, size=len(labels))
        proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
        pattern = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
        inputs = np.repeat(pattern[:, None], c, axis=1)
        inputs = inputs + rng.normal(0.0, noise, size=inputs.shape)
        inputs, stats = _standardize(inputs, per_channel=True)
    else:
        raise ValueError(f"synthetic data supports a feature count or C,H,W, got {shape}")
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], classes, 'synthetic', stats)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return dataset.subset(order[n_test:], 'train'), dataset.subset(order[:n_test], 'test')


def _read_idx(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic (expected unsigned-byte IDX)")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype='>u4', count=ndim, offset=4))
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise DataFormatError(f"{path}: truncated IDX payload ({len(raw) - header} of {expected} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def _labels_path_for(images_path: str) -> str:
    head, tail = os.path.split(images_path)
    for images_tag, labels_tag in (('images-idx3', 'labels-idx1'), ('images', 'labels')):
        if images_tag in tail:
            return os.path.join(head, tail.replace(images_tag, labels_tag))
    raise DataFormatError(f"cannot derive a labels file from {images_path}")


def load_idx(images_path: str, labels_path: Optional[str] = None, num_classes: int = 10,
             split: str = 'train') -> Dataset:
    """MNIST-format images + labels; pixels scaled to [0, 1] then standardized."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path or _labels_path_for(images_path))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataFormatError(f"unexpected IDX shapes {images.shape} and {labels.shape}")
    inputs, stats = _standardize(images[:, None].astype(np.float32) / 255.0, per_channel=False)
    logger.info(f"Loaded {len(labels)} IDX samples from {images_path}")
    return Dataset(inputs, labels, num_classes, split, stats)


def load_cifar_binary(paths: Union[str, Sequence[str]], split: str = 'train') -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes, per-channel standardized."""
    paths = [paths] if isinstance(paths, str) else list(paths)
    chunks = []
    for path in paths:
        with open(path, 'rb') as f:
            raw = f.read()
        if not raw or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    inputs, stats = _standardize(images, per_channel=True)
    logger.info(f"Loaded {len(labels)} CIFAR records from {len(paths)} file(s)")
    return Dataset(inputs, labels, 10, split, stats)


class DataHandler:
    def __init__(self, prefetch: int = 2):
        self.prefetch = max(1, min(prefetch, 2))

    def load(self, data_cfg, model_cfg, seed: int) -> Tuple[Dataset, Dataset]:
        try:
            if data_cfg.source == 'synthetic':
                full = gen_synthetic(model_cfg.num_classes, model_cfg.input_shape, data_cfg.n_per_class, seed,
                                     data_cfg.separation, data_cfg.noise)
                return train_test_split(full, data_cfg.test_fraction, seed)
            if data_cfg.source == 'idx':
                train = load_idx(data_cfg.train_images, data_cfg.train_labels or None, model_cfg.num_classes)
                test = load_idx(data_cfg.test_images, data_cfg.test_labels or None, model_cfg.num_classes, 'test')
                return train, test
            if data_cfg.source == 'cifar':
                train = load_cifar_binary([p.strip() for p in data_cfg.train_files.split(',')])
                test = load_cifar_binary(data_cfg.test_file, 'test')
                return train, test
            raise ValueError(f"unknown data source {data_cfg.source!r}")
        except (OSError, DataFormatError) as e:
            logger.error(f"Error loading {data_cfg.source} data: {e}")
            raise

    def iter_batches(self, dataset: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None,
                     shuffle: bool = True, flip: bool = False,
                     drop_last: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Batches in a seed-fixed order, prepared by one worker with a bounded prefetch."""
        n = len(dataset)
        if rng is None and (shuffle or flip):
            rng = np.random.default_rng(0)
        order = rng.permutation(n) if shuffle else np.arange(n)
        count = n // batch_size if drop_last and n >= batch_size else -(-n // batch_size)
        flips = rng.random(n) < 0.5 if flip and dataset.inputs.ndim == 4 else None

        def make(i: int) -> Tuple[np.ndarray, np.ndarray]:
            idx = order[i * batch_size:(i + 1) * batch_size]
            x = dataset.inputs[idx]
            if flips is not None:
                x = x.copy()
                sel = flips[i * batch_size:i * batch_size + len(idx)]
                x[sel] = x[sel][..., ::-1]
            return x, dataset.labels[idx]

        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = deque()
            for i in range(count):
                pending.append(pool.submit(make, i))
                if len(pending) >= self.prefetch:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

    @staticmethod
    def steps_per_epoch(dataset: Dataset, batch_size: int) -> int:
        return max(1, len(dataset) // batch_size)
