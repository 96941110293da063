from collections import Counter

import numpy as np
import pytest

import tensor as T
from conftest import cnn_config
from layers import build_model
from models import CompressionSpec, SamplerSpec
from subspace import (AlphaSampler, LinearSubspace, PointSubspace, PointWarmupSampler, StepContext,
                      StructuredHybridSubspace, SubspaceError, build_subspace, cosine_regularizer, sample_alphas)
from tensor import Parameter, Tensor


def _pair(rng, shape=(3, 4)):
    return ({'x': Parameter('x', rng.normal(size=shape))}, {'x': Parameter('x', rng.normal(size=shape))})


def test_endpoints_are_exact(rng):
    w1, w2 = _pair(rng)
    line = LinearSubspace(w1, w2)
    np.testing.assert_array_equal(line.materialize(1.0)['x'].data, w1['x'].data)
    np.testing.assert_array_equal(line.materialize(0.0)['x'].data, w2['x'].data)


def test_midpoint():
    line = LinearSubspace({'x': Parameter('x', 2.0)}, {'x': Parameter('x', 4.0)})
    assert line.materialize(0.5)['x'].item() == pytest.approx(3.0)


@pytest.mark.parametrize('alpha', [0.0, 0.3, 0.75, 1.0])
def test_gradients_split_by_alpha(rng, alpha):
    w1, w2 = _pair(rng)
    line = LinearSubspace(w1, w2)
    r = rng.normal(size=(3, 4)).astype(np.float32)
    T.backward(T.sum_(line.materialize(alpha)['x'] * Tensor(r)))
    np.testing.assert_allclose(w1['x'].grad, alpha * r, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(w2['x'].grad, (1 - alpha) * r, rtol=1e-6, atol=1e-7)


def test_materialize_chain_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1, w2 = _pair(rng, (2,))
    line = LinearSubspace(w1, w2)
    assert T.finite_diff_check(lambda: T.sum_(line.materialize(0.3)['x'] * line.materialize(0.3)['x']),
                               [w1['x'], w2['x']]) <= 1e-3


def test_materialize_is_affine_in_alpha(rng):
    line = LinearSubspace({'x': Parameter('x', rng.uniform(-1, 1, size=(3, 4)))},
                          {'x': Parameter('x', rng.uniform(-1, 1, size=(3, 4)))})
    a1, a2, lam = 0.2, 0.9, 0.35
    lhs = line.materialize(lam * a1 + (1 - lam) * a2)['x'].data
    rhs = lam * line.materialize(a1)['x'].data + (1 - lam) * line.materialize(a2)['x'].data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_point_subspace_ignores_alpha(small_mlp):
    point = PointSubspace.from_model(small_mlp)
    first, second = point.materialize(0.0), point.materialize(0.8)
    assert all(first[n] is second[n] for n in first)
    assert point.regularizer() is None


@pytest.mark.parametrize('alpha', [-0.01, 1.01])
def test_alpha_outside_unit_interval_rejected(rng, alpha):
    with pytest.raises(SubspaceError):
        LinearSubspace(*_pair(rng)).materialize(alpha)


def test_endpoint_sets_must_match(rng):
    w1, _ = _pair(rng)
    with pytest.raises(SubspaceError):
        LinearSubspace(w1, {'x': Parameter('x', np.zeros((4, 3)))})
    with pytest.raises(SubspaceError):
        LinearSubspace(w1, {'y': Parameter('y', np.zeros((3, 4)))})


def test_hybrid_duplicates_only_norm_affines():
    model = build_model(cnn_config())
    hybrid = StructuredHybridSubspace.from_model(model, seed=0)
    assert set(hybrid.w1) == {'norm1.weight', 'norm1.bias', 'norm2.weight', 'norm2.bias'}
    weights = hybrid.materialize(0.3)
    assert weights['conv1.weight'] is hybrid.shared['conv1.weight']
    w1, w2 = hybrid.w1['norm1.bias'].data, hybrid.w2['norm1.bias'].data
    np.testing.assert_allclose(weights['norm1.bias'].data, 0.3 * w1 + 0.7 * w2, atol=1e-7)
    with pytest.raises(SubspaceError):
        StructuredHybridSubspace({}, {'conv1.weight': hybrid.shared['conv1.weight']},
                                 {'conv1.weight': hybrid.shared['conv1.weight']})


def test_stored_parameter_counts():
    model = build_model(cnn_config())
    total = sum(p.size for p in model.params.values())
    norms = sum(p.size for p in model.params.values() if p.role == 'norm')
    assert build_subspace('point', model, 0).stored_parameter_count() == total
    assert build_subspace('line', model, 0).stored_parameter_count() == 2 * total
    assert build_subspace('hybrid', model, 0).stored_parameter_count() == total + norms
    with pytest.raises(SubspaceError):
        build_subspace('plane', model, 0)


def test_line_endpoints_are_initialized_independently(small_mlp):
    line = build_subspace('line', small_mlp, seed=3)
    assert not np.array_equal(line.w1['fc1.weight'].data, line.w2['fc1.weight'].data)
    again = build_subspace('line', small_mlp, seed=3)
    np.testing.assert_array_equal(line.w1['fc1.weight'].data, again.w1['fc1.weight'].data)


def test_cosine_regularizer_examples(rng):
    a = Tensor([1.0, 0.0, 0.0])
    b = Tensor([0.0, 2.0, 0.0])
    assert cosine_regularizer({'l': a}, {'l': b}).item() == pytest.approx(0.0)
    x = rng.normal(size=8)
    assert cosine_regularizer({'l': Tensor(x)}, {'l': Tensor(2 * x)}, beta=0.7).item() == pytest.approx(0.7, rel=1e-5)
    zero = cosine_regularizer({'l': Tensor(np.zeros(3)), 'm': a}, {'l': a, 'm': a})
    assert zero.item() == pytest.approx(1.0)


@pytest.mark.parametrize('seed', range(5))
def test_cosine_regularizer_matches_float64_oracle_and_is_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 10)), rng.normal(size=(2, 10))
    expected = sum((a[i] @ b[i]) ** 2 / ((a[i] @ a[i]) * (b[i] @ b[i])) for i in range(2))
    w1 = {f"l{i}": Tensor(a[i]) for i in range(2)}
    w2 = {f"l{i}": Tensor(b[i]) for i in range(2)}
    value = cosine_regularizer(w1, w2).item()
    assert value == pytest.approx(expected, rel=1e-3)
    scaled = {k: Tensor(3.5 * v.data) for k, v in w1.items()}
    assert cosine_regularizer(scaled, w2).item() == pytest.approx(value, rel=1e-3)


def test_line_regularizer_covers_weights_only(small_mlp):
    line = build_subspace('line', small_mlp, seed=0, reg_coefficient=1.0)
    names = [n for n, p in line.w1.items() if p.role == 'weight']
    expected = cosine_regularizer({n: line.w1[n] for n in names}, {n: line.w2[n] for n in names}).item()
    assert line.regularizer().item() == pytest.approx(expected)
    # norm scales start identical (cos = 1); each would add 1
    assert line.regularizer().item() < 1.0


def test_structured_sampler_always_contains_range_ends():
    rng = np.random.default_rng(0)
    spec = SamplerSpec(mode='structured_sandwich')
    for _ in range(20):
        alphas = sample_alphas(spec, rng)
        assert len(alphas) == 4
        assert alphas[0] == pytest.approx(0.0) and alphas[1] == pytest.approx(1.0)
        assert all(0.0 <= a <= 1.0 for a in alphas)


def test_structured_sampler_alpha_interpretation():
    spec = SamplerSpec(mode='structured_sandwich', alpha_min=0.25, alpha_max=1.0, values_are_alpha=True)
    alphas = sample_alphas(spec, np.random.default_rng(0))
    assert alphas[:2] == [0.25, 1.0]
    assert all(0.25 <= a <= 1.0 for a in alphas[2:])


def test_structured_sampler_uses_configured_width_range():
    compression = CompressionSpec(kind='structured', width_min=0.5, width_max=1.0)
    sampler = AlphaSampler(SamplerSpec(mode='structured_sandwich'), compression, np.random.default_rng(0))
    alphas = sampler.sample()
    assert alphas[0] == pytest.approx(0.0) and alphas[1] == pytest.approx(1.0)


def test_unstructured_endpoint_frequencies():
    spec = SamplerSpec(mode='unstructured_biased', alpha_min=0.005, alpha_max=0.05, endpoint_prob=0.25)
    rng = np.random.default_rng(1)
    draws = np.array([sample_alphas(spec, rng)[0] for _ in range(100_000)])
    assert abs(np.mean(draws == 0.005) - 0.25) < 0.01
    assert abs(np.mean(draws == 0.05) - 0.25) < 0.01
    assert draws.min() >= 0.005 and draws.max() <= 0.05


def test_discrete_levels_are_uniform():
    spec = SamplerSpec(mode='quant_discrete')
    rng = np.random.default_rng(2)
    counts = Counter(sample_alphas(spec, rng)[0] for _ in range(100_000))
    assert set(counts) == set(spec.levels)
    for value in spec.levels:
        assert abs(counts[value] / 100_000 - 1 / 6) < 0.01


def test_sampler_is_reproducible():
    spec = SamplerSpec(mode='unstructured_biased', seed=11)
    a, b = AlphaSampler(spec), AlphaSampler(spec)
    assert [a.sample() for _ in range(50)] == [b.sample() for _ in range(50)]


def test_point_warmup_sampler():
    spec = SamplerSpec(alpha_min=0.025, alpha_max=1.0)
    sampler = PointWarmupSampler(spec, 0.8, np.random.default_rng(0))
    assert all(sampler.sample(StepContext(step, 100)) == [1.0] for step in range(80))
    late = [sampler.sample(StepContext(step, 100))[0] for step in range(80, 100)]
    assert all(0.025 <= a <= 1.0 for a in late)
    assert len(set(late)) > 1


def test_invalid_sampler_spec_rejected():
    with pytest.raises(ValueError):
        AlphaSampler(SamplerSpec(alpha_min=0.6, alpha_max=0.4))
    with pytest.raises(ValueError):
        AlphaSampler(SamplerSpec(endpoint_prob=0.6))
