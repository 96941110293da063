import numpy as np
import pytest

import tensor as T
from conftest import cnn_config, mlp_config
from layers import BatchNorm, ForwardContext, GroupNorm, build_model, replace_bn_with_gn
from models import NormSpec
from tensor import Tensor


def _weights(layer):
    return {k: Tensor(v) for k, v in layer.init_params(np.random.default_rng(0)).items()}


def test_mlp_parameter_layout(small_mlp):
    specs = small_mlp.param_specs()
    assert specs['fc1.weight'] == ((8, 5), 'weight')
    assert specs['norm1.weight'] == ((8,), 'norm')
    assert specs['fc2.weight'] == ((6, 8), 'weight')
    assert specs['fc3.weight'] == ((3, 6), 'weight')
    assert specs['fc3.bias'] == ((3,), 'bias')
    flags = {d.name: (d.is_first_layer, d.is_last_layer) for d in small_mlp.descriptors() if d.kind == 'linear'}
    assert flags == {'fc1': (True, False), 'fc2': (False, False), 'fc3': (False, True)}


def test_initialization_bounds(small_mlp):
    assert np.abs(small_mlp.params['fc1.weight'].data).max() <= np.sqrt(6.0 / 5)
    assert np.abs(small_mlp.params['fc3.weight'].data).max() <= 1.0 / np.sqrt(6)
    np.testing.assert_array_equal(small_mlp.params['norm1.weight'].data, np.ones(8))
    np.testing.assert_array_equal(small_mlp.params['norm1.bias'].data, np.zeros(8))


def test_forward_shapes(small_mlp, small_cnn, rng):
    assert small_mlp(rng.normal(size=(4, 5))).shape == (4, 3)
    assert small_cnn(rng.normal(size=(4, 2, 8, 8))).shape == (4, 3)


def test_too_many_pooling_stages_rejected():
    with pytest.raises(ValueError):
        build_model(cnn_config(channels=(4, 4, 4, 4), shape=(1, 8, 8)))


@pytest.mark.parametrize('channels, rule, groups, expected', [
    (64, 'fixed', 32, 32),
    (48, 'fixed', 32, 48),
    (16, 'fixed', 32, 16),
    (64, 'per_channel', 32, 64),
])
def test_effective_groups(channels, rule, groups, expected):
    assert NormSpec(groups_rule=rule, groups=groups).effective_groups(channels) == expected


def test_group_norm_falls_back_to_one_group_on_vectors():
    layer = GroupNorm('gn', 8, NormSpec(groups=32))
    assert layer.groups_for(8, ndim=2) == 1
    assert layer.groups_for(8, ndim=4) == 8
    assert GroupNorm('gn', 8, NormSpec(groups=4)).groups_for(8, ndim=2) == 4


def test_instance_norm_normalizes_each_channel(rng):
    layer = GroupNorm('gn', 3, NormSpec(groups_rule='per_channel'))
    x = rng.normal(2.0, 3.0, size=(2, 3, 4, 4))
    out = layer.forward(Tensor(x), _weights(layer), ForwardContext()).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-3)


def test_group_norm_predictions_independent_of_batch_size(small_cnn, rng):
    x = rng.normal(size=(6, 2, 8, 8))
    with T.no_grad():
        batched = small_cnn(x).data
        single = np.concatenate([small_cnn(x[i:i + 1]).data for i in range(6)])
    np.testing.assert_allclose(batched, single, rtol=1e-5, atol=1e-6)


def test_batch_norm_training_updates_running_statistics(rng):
    layer = BatchNorm('bn', 4, NormSpec(kind='batch'))
    x = rng.normal(1.0, 2.0, size=(6, 4)).astype(np.float32)
    layer.forward(Tensor(x), _weights(layer), ForwardContext(training=True))
    np.testing.assert_allclose(layer.running_mean, 0.1 * x.mean(axis=0), rtol=1e-5)
    np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-5)


def test_batch_norm_training_needs_two_samples():
    layer = BatchNorm('bn', 2, NormSpec(kind='batch'))
    with pytest.raises(ValueError):
        layer.forward(Tensor(np.ones((1, 2))), _weights(layer), ForwardContext(training=True))


def test_batch_norm_on_pruned_input_uses_leading_statistics(rng):
    layer = BatchNorm('bn', 4, NormSpec(kind='batch'))
    layer.running_mean[:] = [1.0, 2.0, 3.0, 4.0]
    weights = {k: v[:2] for k, v in _weights(layer).items()}
    seen = []
    x = rng.normal(size=(5, 2)).astype(np.float32)
    ctx = ForwardContext(observer=lambda name, stored, batch, *_: seen.append((name, stored, batch)))
    out = layer.forward(Tensor(x), weights, ctx).data
    np.testing.assert_allclose(out, (x - [1.0, 2.0]) / np.sqrt(1.0 + 1e-5), rtol=1e-5)
    name, stored, batch = seen[0]
    assert name == 'bn'
    np.testing.assert_array_equal(stored, [1.0, 2.0])
    np.testing.assert_allclose(batch, x.mean(axis=0), rtol=1e-5)


def test_replace_bn_with_gn_keeps_parameters():
    model = build_model(mlp_config(norm='batch'), seed=0)
    replaced = replace_bn_with_gn(model)
    assert all(isinstance(layer, GroupNorm) for layer in replaced.norm_layers())
    assert replaced.params is model.params
    assert replaced.buffers() == {}
    assert replaced.config.norm.kind == 'group'
    assert model.config.norm.kind == 'batch'


def test_buffers_round_trip():
    model = build_model(mlp_config(norm='batch'), seed=0)
    model.norm_layers()[0].running_mean[:] = 7.0
    other = build_model(mlp_config(norm='batch'), seed=1)
    other.load_buffers(model.buffers())
    np.testing.assert_array_equal(other.norm_layers()[0].running_mean, np.full(8, 7.0))


def test_copy_shares_parameters_but_not_statistics():
    model = build_model(mlp_config(norm='batch'), seed=0)
    clone = model.copy()
    assert clone.params is model.params
    clone.norm_layers()[0].running_mean[:] = 5.0
    assert not np.any(model.norm_layers()[0].running_mean == 5.0)


def test_group_norm_channel_groups_follow_index_rule(rng):
    layer = GroupNorm('gn', 4, NormSpec(groups=2))
    x = rng.normal(size=(1, 4, 2, 2))
    out = layer.forward(Tensor(x), _weights(layer), ForwardContext()).data
    group = x[0, 2:4]
    expected = (x[0, 3] - group.mean()) / np.sqrt(group.var() + 1e-5)
    np.testing.assert_allclose(out[0, 3], expected, rtol=1e-4, atol=1e-5)

    x[0, 0] += 10.0
    moved = layer.forward(Tensor(x), _weights(layer), ForwardContext()).data
    np.testing.assert_array_equal(moved[0, 2:4], out[0, 2:4])


def test_group_norm_group_moments(rng):
    layer = GroupNorm('gn', 8, NormSpec(groups=4))
    out = layer.forward(Tensor(rng.normal(size=(2, 8, 4, 4))), _weights(layer), ForwardContext()).data
    grouped = out.astype(np.float64).reshape(2, 4, -1)
    assert np.abs(grouped.mean(axis=2)).max() < 1e-5
    np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-4)


def test_single_group_norm_is_layer_norm(rng):
    layer = GroupNorm('gn', 3, NormSpec(groups=1))
    x = rng.normal(1.0, 2.0, size=(2, 3, 4, 4))
    scale, shift = rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)
    weights = {'gn.weight': Tensor(scale), 'gn.bias': Tensor(shift)}
    out = layer.forward(Tensor(x), weights, ForwardContext()).data
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    expected = (x - mean) / np.sqrt(var + 1e-5) * scale[None, :, None, None] + shift[None, :, None, None]
    np.testing.assert_allclose(out, expected, rtol=1e-4, atol=1e-5)


def test_batch_norm_eval_with_initial_statistics(rng):
    layer = BatchNorm('bn', 3, NormSpec(kind='batch'))
    x = rng.normal(size=(4, 3)).astype(np.float32)
    out = layer.forward(Tensor(x), _weights(layer), ForwardContext()).data
    np.testing.assert_allclose(out, x / np.sqrt(1.0 + 1e-5), rtol=1e-6)


def test_batch_norm_eval_after_two_training_passes(rng):
    layer = BatchNorm('bn', 4, NormSpec(kind='batch'))
    first, second, held_out = (rng.normal(1.0, 2.0, size=(6, 4)).astype(np.float32) for _ in range(3))
    for batch in (first, second):
        layer.forward(Tensor(batch), _weights(layer), ForwardContext(training=True))
    mean, var = np.zeros(4), np.ones(4)
    for batch in (first.astype(np.float64), second.astype(np.float64)):
        mean = 0.9 * mean + 0.1 * batch.mean(axis=0)
        var = 0.9 * var + 0.1 * batch.var(axis=0, ddof=1)
    out = layer.forward(Tensor(held_out), _weights(layer), ForwardContext()).data
    np.testing.assert_allclose(out, (held_out - mean) / np.sqrt(var + 1e-5), rtol=1e-4, atol=1e-5)
