import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tensor as T
from compression import activation_quantizer, compress, compression_cost, gamma
from data_handlers import DataHandler, Dataset
from layers import BatchNorm, Model
from models import CompressionSpec, SamplerSpec
from subspace import Subspace
from tensor import Tensor

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['alpha', 'gamma', 'accuracy', 'loss', 'flops', 'nonzero', 'bits']
DRIFT_COLUMNS = ['setting', 'layer', 'mad_mean', 'error']
DRIFT_BUCKETS = np.logspace(-6, 1, 65)

_handler = DataHandler(prefetch=1)


def _to_csv(frame: pd.DataFrame, path: str):
    frame.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')


def evaluate(model: Model, dataset: Dataset, weights: Optional[Mapping[str, Tensor]] = None,
             batch_size: int = 128, act_quant=None, observer=None) -> Tuple[float, float]:
    """Top-1 accuracy and mean loss in eval mode, batches in dataset order."""
    correct = 0
    loss_sum = 0.0
    with T.no_grad():
        for x, y in _handler.iter_batches(dataset, batch_size, shuffle=False, drop_last=False):
            logits = model.forward(x, weights, training=False, act_quant=act_quant, observer=observer)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            loss_sum += T.softmax_cross_entropy(logits, y).item() * len(y)
    return correct / len(dataset), loss_sum / len(dataset)


@dataclass
class SweepRow:
    alpha: float
    gamma: float
    accuracy: float
    loss: float
    flops: int
    nonzero: int
    bits: int


@dataclass
class SweepResult:
    rows: List[SweepRow] = field(default_factory=list)
    reversed: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([[getattr(r, c) for c in SWEEP_COLUMNS] for r in self.rows], columns=SWEEP_COLUMNS)

    def to_csv(self, path: str):
        _to_csv(self.to_frame(), path)

    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.rows]))


def alpha_grid(spec: CompressionSpec, sampler: SamplerSpec, points: int = 33) -> List[float]:
    """Evenly spaced over the trained range; quantization uses the trained bit-width levels."""
    if spec.kind == 'quantization':
        return sorted(float(v) for v in sampler.levels)
    if spec.kind == 'unstructured':
        lo, hi = sampler.alpha_min, sampler.alpha_max
    else:
        lo, hi = 0.0, 1.0
    return [float(a) for a in np.linspace(lo, hi, points)]


def _check_grid(grid: Sequence[float]):
    if len(grid) == 0:
        raise ValueError("alpha grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("alpha grid must be strictly increasing")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ValueError("alpha grid must lie in [0, 1]")


def _sweep_row(model: Model, subspace: Subspace, spec: CompressionSpec, alpha: float, level_value: float,
               dataset: Dataset, batch_size: int) -> SweepRow:
    with T.no_grad():
        weights, _ = compress(subspace.materialize(alpha), spec, level_value, model)
    act_quant = activation_quantizer(int(round(level_value))) if spec.kind == 'quantization' else None
    accuracy, loss = evaluate(model, dataset, weights, batch_size, act_quant=act_quant)
    cost = compression_cost(model, spec, level_value, subspace.kind, batch_size=1)
    return SweepRow(alpha, level_value, accuracy, loss, cost.compressed_flops, cost.nonzero_params,
                    cost.storage_bits)


def _sweep(model, subspace, spec, grid, dataset, batch_size, workers, reverse) -> SweepResult:
    grid = [float(a) for a in grid]
    _check_grid(grid)
    lo, hi = grid[0], grid[-1]
    levels = [gamma(spec, lo + hi - a if reverse else a) for a in grid]

    def row(pair):
        return _sweep_row(model, subspace, spec, pair[0], pair[1], dataset, batch_size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, zip(grid, levels)))
    else:
        rows = [row(pair) for pair in zip(grid, levels)]
    result = SweepResult(rows, reversed=reverse)
    logger.info(f"{'Reversed sweep' if reverse else 'Sweep'} over {len(grid)} points: "
                f"mean accuracy {result.mean_accuracy():.4f}")
    return result


def sweep(model: Model, subspace: Subspace, spec: CompressionSpec, grid: Sequence[float], dataset: Dataset,
          batch_size: int = 128, workers: int = 1) -> SweepResult:
    return _sweep(model, subspace, spec, grid, dataset, batch_size, workers, reverse=False)


def reversed_sweep(model: Model, subspace: Subspace, spec: CompressionSpec, grid: Sequence[float],
                   dataset: Dataset, batch_size: int = 128, workers: int = 1) -> SweepResult:
    """Each alpha evaluated at the level of the mirrored grid position.

    The mirror is over the grid's own range: alpha is paired with gamma(lo + hi - alpha), which is
    gamma(1 - alpha) on a grid spanning [0, 1].
    """
    return _sweep(model, subspace, spec, grid, dataset, batch_size, workers, reverse=True)


def pearson_correlation(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson correlation needs two equal-length series of at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0:
        return float('nan')
    return float(np.clip((dx * dy).sum() / denom, -1.0, 1.0))


@dataclass
class DriftReport:
    settings: List[float]
    layer_mad: Dict[float, Dict[str, float]]
    errors: Dict[float, float]
    histogram: np.ndarray
    bucket_edges: np.ndarray = field(default_factory=lambda: DRIFT_BUCKETS.copy())
    layer_var_mad: Optional[Dict[float, Dict[str, float]]] = None

    def mean_drift(self, setting: float) -> float:
        return float(np.mean(list(self.layer_mad[setting].values())))

    def pairs(self) -> List[Tuple[float, float]]:
        """(mean drift, test error) per setting."""
        return [(self.mean_drift(s), self.errors[s]) for s in self.settings]

    @property
    def pearson_r(self) -> float:
        if len(self.settings) < 2:
            return float('nan')
        drift, error = zip(*self.pairs())
        return pearson_correlation(drift, error)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.settings:
            for layer, mad in self.layer_mad[s].items():
                row = [s, layer, mad, self.errors[s]]
                if self.layer_var_mad is not None:
                    row.append(self.layer_var_mad[s][layer])
                rows.append(row)
        columns = DRIFT_COLUMNS + (['var_mad_mean'] if self.layer_var_mad is not None else [])
        return pd.DataFrame(rows, columns=columns)

    def to_csv(self, path: str):
        _to_csv(self.to_frame(), path)


def analyze_bn_drift(model: Model, dataset: Dataset, settings: Sequence[float], spec: CompressionSpec,
                     batch_size: int = 128, include_variance: bool = False,
                     replay: bool = False) -> DriftReport:
    """|stored mean - batch mean| at every BatchNorm input, per compression level, averaged over batches.

    With ``replay`` each batch overwrites the running statistics with its own moments first, so every
    recorded difference is exactly zero; the stored statistics are restored afterwards.
    """
    bn_layers = [layer for layer in model.norm_layers() if isinstance(layer, BatchNorm)]
    if not bn_layers:
        raise ValueError("drift analysis needs a model with BatchNorm layers")
    settings = [float(s) for s in settings]
    layer_mad: Dict[float, Dict[str, float]] = {}
    layer_var_mad: Dict[float, Dict[str, float]] = {}
    errors: Dict[float, float] = {}
    pooled: List[np.ndarray] = []
    saved = {name: value.copy() for name, value in model.buffers().items()}

    for setting in settings:
        per_batch: Dict[str, List[float]] = {layer.name: [] for layer in bn_layers}
        per_batch_var: Dict[str, List[float]] = {layer.name: [] for layer in bn_layers}

        def observer(name, stored_mean, batch_mean, stored_var, batch_var):
            diff = np.abs(stored_mean.astype(np.float64) - batch_mean.astype(np.float64))
            per_batch[name].append(float(diff.mean()))
            per_batch_var[name].append(float(np.abs(stored_var.astype(np.float64)
                                                    - batch_var.astype(np.float64)).mean()))
            pooled.append(diff)

        with T.no_grad():
            weights, _ = compress(model.params, spec, setting, model)
        act_quant = activation_quantizer(int(round(setting))) if spec.kind == 'quantization' else None
        for layer in bn_layers:
            layer.replay_batch_stats = replay
        try:
            accuracy, _ = evaluate(model, dataset, weights, batch_size, act_quant=act_quant, observer=observer)
        finally:
            for layer in bn_layers:
                layer.replay_batch_stats = False
            model.load_buffers(saved)
        errors[setting] = 1.0 - accuracy
        layer_mad[setting] = {name: float(np.mean(v)) for name, v in per_batch.items()}
        layer_var_mad[setting] = {name: float(np.mean(v)) for name, v in per_batch_var.items()}
        logger.info(f"Drift at {spec.kind} level {setting}: mean MAD "
                    f"{np.mean(list(layer_mad[setting].values())):.4g}, error {errors[setting]:.4f}")

    values = np.concatenate(pooled) if pooled else np.zeros(0)
    histogram, _ = np.histogram(np.clip(values, DRIFT_BUCKETS[0], DRIFT_BUCKETS[-1]), bins=DRIFT_BUCKETS)
    return DriftReport(settings, layer_mad, errors, histogram,
                       layer_var_mad=layer_var_mad if include_variance else None)


def summarize_trials(results: Sequence[SweepResult]) -> pd.DataFrame:
    """Mean and sample standard deviation of accuracy and loss per alpha across trials."""
    if not results:
        raise ValueError("no trials to summarize")
    frames = [r.to_frame().assign(trial=i) for i, r in enumerate(results)]
    combined = pd.concat(frames, ignore_index=True)
    summary = combined.groupby('alpha', sort=True).agg(
        gamma=('gamma', 'first'),
        accuracy_mean=('accuracy', 'mean'), accuracy_std=('accuracy', 'std'),
        loss_mean=('loss', 'mean'), loss_std=('loss', 'std'),
        trials=('trial', 'nunique'))
    return summary.reset_index()
