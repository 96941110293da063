import math

import numpy as np
import pandas as pd
import pytest

from analysis import (DRIFT_BUCKETS, SWEEP_COLUMNS, SweepResult, SweepRow, alpha_grid, analyze_bn_drift, evaluate,
                      pearson_correlation, reversed_sweep, summarize_trials, sweep)
from conftest import mlp_config
from data_handlers import Dataset
from layers import build_model
from models import CompressionSpec, SamplerSpec
from subspace import build_subspace
from tensor import Tensor

UNSTRUCTURED = CompressionSpec(kind='unstructured')
GRID = [0.25, 0.5, 0.75]


def test_pearson_examples():
    assert pearson_correlation([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(pearson_correlation([1, 1, 1], [1, 2, 3]))
    with pytest.raises(ValueError):
        pearson_correlation([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_correlation([1], [1])


def test_pearson_matches_pandas(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    assert pearson_correlation(x, y) == pytest.approx(pd.Series(x).corr(pd.Series(y)))


def test_alpha_grids():
    unstructured = alpha_grid(UNSTRUCTURED, SamplerSpec(alpha_min=0.025), 33)
    assert len(unstructured) == 33
    assert unstructured[0] == pytest.approx(0.025) and unstructured[-1] == 1.0
    assert alpha_grid(CompressionSpec(kind='structured'), SamplerSpec(), 5) == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert alpha_grid(CompressionSpec(kind='quantization'), SamplerSpec(levels=(1.0, 0.5)), 33) == [0.5, 1.0]


def test_evaluate_random_model_is_at_chance(rng):
    model = build_model(mlp_config(widths=(32, 16), inputs=16, classes=10), seed=0)
    labels = rng.permutation(np.repeat(np.arange(10), 200))
    data = Dataset(rng.normal(size=(2000, 16)), labels, 10, 'test')
    accuracy, _ = evaluate(model, data)
    assert accuracy == pytest.approx(0.1, abs=0.03)


def test_evaluate_is_perfect_on_a_memorized_toy_set():
    model = build_model(mlp_config(widths=(3,), inputs=3, classes=3), seed=0)
    # fc1 and fc2 copy the one-hot input through; GroupNorm and ReLU keep its largest entry on top
    weights = {'fc1.weight': Tensor(np.eye(3)), 'norm1.weight': Tensor(np.ones(3)),
               'norm1.bias': Tensor(np.zeros(3)), 'fc2.weight': Tensor(np.eye(3)), 'fc2.bias': Tensor(np.zeros(3))}
    data = Dataset(5.0 * np.eye(3), np.arange(3), 3, 'train')
    accuracy, loss = evaluate(model, data, weights)
    assert accuracy == 1.0
    assert loss < math.log(3)


def test_evaluate_is_independent_of_batch_size_with_group_norm(small_mlp, cluster_data):
    _, test = cluster_data
    acc_full, loss_full = evaluate(small_mlp, test, batch_size=128)
    acc_one, loss_one = evaluate(small_mlp, test, batch_size=1)
    assert acc_full == acc_one
    assert loss_full == pytest.approx(loss_one, rel=1e-4)


def test_sweep_rows_and_csv(small_mlp, cluster_data, tmp_path):
    _, test = cluster_data
    line = build_subspace('line', small_mlp, seed=0)
    result = sweep(small_mlp, line, UNSTRUCTURED, GRID, test)
    assert [r.alpha for r in result.rows] == GRID
    assert [r.gamma for r in result.rows] == pytest.approx([0.75, 0.5, 0.25])
    nonzero = [r.nonzero for r in result.rows]
    assert nonzero == sorted(nonzero)
    path = tmp_path / 'sweep.csv'
    result.to_csv(str(path))
    text = path.read_text(encoding='utf-8')
    assert text.splitlines()[0] == ','.join(SWEEP_COLUMNS)
    assert len(text.splitlines()) == 4


def test_sweep_is_deterministic_and_worker_independent(small_mlp, cluster_data):
    _, test = cluster_data
    line = build_subspace('line', small_mlp, seed=0)
    first = sweep(small_mlp, line, UNSTRUCTURED, GRID, test).to_frame()
    pd.testing.assert_frame_equal(first, sweep(small_mlp, line, UNSTRUCTURED, GRID, test).to_frame())
    pd.testing.assert_frame_equal(first, sweep(small_mlp, line, UNSTRUCTURED, GRID, test, workers=3).to_frame())


def test_reversed_sweep_mirrors_levels(small_mlp, cluster_data):
    _, test = cluster_data
    line = build_subspace('line', small_mlp, seed=0)
    forward = sweep(small_mlp, line, UNSTRUCTURED, GRID, test)
    mirrored = reversed_sweep(small_mlp, line, UNSTRUCTURED, GRID, test)
    assert mirrored.reversed
    assert [r.gamma for r in mirrored.rows] == pytest.approx([0.25, 0.5, 0.75])
    assert mirrored.rows[1] == forward.rows[1]


def test_reversed_sweep_mirrors_over_the_grid_range(small_mlp, cluster_data):
    _, test = cluster_data
    line = build_subspace('line', small_mlp, seed=0)
    mirrored = reversed_sweep(small_mlp, line, UNSTRUCTURED, [0.2, 0.4, 0.6], test)
    assert [r.gamma for r in mirrored.rows] == pytest.approx([0.4, 0.6, 0.8])


def test_reversed_sweep_of_point_subspace_permutes_rows(small_mlp, cluster_data):
    _, test = cluster_data
    point = build_subspace('point', small_mlp, seed=0)
    forward = sweep(small_mlp, point, UNSTRUCTURED, GRID, test)
    mirrored = reversed_sweep(small_mlp, point, UNSTRUCTURED, GRID, test)

    def outcomes(result):
        return sorted((r.gamma, r.accuracy, r.loss) for r in result.rows)
    assert outcomes(forward) == outcomes(mirrored)


def test_quantization_sweep_uses_bit_widths(small_mlp, cluster_data):
    _, test = cluster_data
    spec = CompressionSpec(kind='quantization')
    grid = alpha_grid(spec, SamplerSpec(mode='quant_discrete'))
    result = sweep(small_mlp, build_subspace('line', small_mlp, seed=0), spec, grid, test)
    assert [r.gamma for r in result.rows] == [3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    bits = [r.bits for r in result.rows]
    assert bits == sorted(bits)


@pytest.mark.parametrize('grid', [[], [0.5, 0.5], [0.75, 0.25], [-0.1, 0.5], [0.5, 1.1]])
def test_invalid_grids_rejected(small_mlp, cluster_data, grid):
    _, test = cluster_data
    with pytest.raises(ValueError):
        sweep(small_mlp, build_subspace('point', small_mlp, seed=0), UNSTRUCTURED, grid, test)


def test_drift_needs_batch_norm(small_mlp, cluster_data):
    with pytest.raises(ValueError):
        analyze_bn_drift(small_mlp, cluster_data[1], [0.0, 0.5], UNSTRUCTURED)


def test_drift_report(cluster_data):
    _, test = cluster_data
    model = build_model(mlp_config(norm='batch'), seed=0)
    report = analyze_bn_drift(model, test, [0.0, 0.5, 0.9], UNSTRUCTURED, batch_size=8, include_variance=True)
    assert report.settings == [0.0, 0.5, 0.9]
    assert set(report.layer_mad[0.5]) == {'norm1', 'norm2'}
    assert all(v > 0 for v in report.layer_mad[0.0].values())
    assert len(report.pairs()) == 3
    r = report.pearson_r
    assert math.isnan(r) or -1.0 <= r <= 1.0
    assert len(report.histogram) == len(DRIFT_BUCKETS) - 1
    frame = report.to_frame()
    assert list(frame.columns) == ['setting', 'layer', 'mad_mean', 'error', 'var_mad_mean']
    assert len(frame) == 6


def test_drift_replay_records_zero_and_restores_statistics(cluster_data):
    _, test = cluster_data
    model = build_model(mlp_config(norm='batch'), seed=0)
    model.norm_layers()[0].running_mean[:] = 0.3
    report = analyze_bn_drift(model, test, [0.0, 0.5], UNSTRUCTURED, batch_size=8, replay=True)
    for setting in report.settings:
        assert all(v == 0.0 for v in report.layer_mad[setting].values())
    assert report.histogram[0] == report.histogram.sum() > 0
    np.testing.assert_array_equal(model.norm_layers()[0].running_mean, np.full(8, 0.3, dtype=np.float32))
    assert all(not layer.replay_batch_stats for layer in model.norm_layers())


def _result(accuracies):
    return SweepResult([SweepRow(a, 1.0 - a, acc, 1.0 - acc, 10, 5, 32) for a, acc in zip([0.25, 0.75], accuracies)])


def test_summarize_trials():
    summary = summarize_trials([_result([0.5, 0.8]), _result([0.7, 0.8])])
    assert summary['alpha'].tolist() == [0.25, 0.75]
    assert summary['accuracy_mean'].tolist() == pytest.approx([0.6, 0.8])
    assert summary['accuracy_std'].iloc[0] == pytest.approx(math.sqrt(0.02))
    assert summary['accuracy_std'].iloc[1] == pytest.approx(0.0)
    assert summary['trials'].tolist() == [2, 2]
    with pytest.raises(ValueError):
        summarize_trials([])
