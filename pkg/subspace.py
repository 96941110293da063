import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

import tensor as T
from compression import width_to_alpha
from layers import Model
from models import CompressionSpec, SamplerSpec
from tensor import Parameter, Tensor

logger = logging.getLogger(__name__)


class SubspaceError(ValueError):
    pass


def _check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise SubspaceError(f"alpha must lie in [0, 1], got {alpha}")


def _check_pair(w1: Mapping[str, Tensor], w2: Mapping[str, Tensor]):
    if set(w1) != set(w2):
        raise SubspaceError(f"endpoint sets differ: {sorted(set(w1) ^ set(w2))}")
    for name in w1:
        if w1[name].shape != w2[name].shape:
            raise SubspaceError(f"{name}: endpoint shapes {w1[name].shape} and {w2[name].shape} differ")


def interpolate(w1: Tensor, w2: Tensor, alpha: float) -> Tensor:
    return T.scalar_mul(w1, alpha) + T.scalar_mul(w2, 1.0 - alpha)


class Subspace:
    kind = 'subspace'

    def parameters(self) -> List[Parameter]:
        return [p for group in self.endpoint_sets().values() for p in group.values()]

    def endpoint_sets(self) -> Dict[str, Dict[str, Parameter]]:
        raise NotImplementedError

    def materialize(self, alpha: float) -> Dict[str, Tensor]:
        raise NotImplementedError

    def regularizer(self) -> Optional[Tensor]:
        return None

    def stored_parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class PointSubspace(Subspace):
    """A single weight set; every alpha yields the same weights."""
    kind = 'point'

    def __init__(self, w: Dict[str, Parameter]):
        self.w = w

    @classmethod
    def from_model(cls, model: Model) -> 'PointSubspace':
        return cls(model.params)

    def endpoint_sets(self):
        return {'w': self.w}

    def materialize(self, alpha):
        _check_alpha(alpha)
        return dict(self.w)


class LinearSubspace(Subspace):
    """omega*(alpha) = alpha * w1 + (1 - alpha) * w2."""
    kind = 'line'

    def __init__(self, w1: Dict[str, Parameter], w2: Dict[str, Parameter], reg_coefficient: float = 1.0):
        _check_pair(w1, w2)
        if reg_coefficient < 0:
            raise SubspaceError("regularizer coefficient must be non-negative")
        self.w1, self.w2 = w1, w2
        self.reg_coefficient = reg_coefficient

    @classmethod
    def from_model(cls, model: Model, seed: int, reg_coefficient: float = 1.0) -> 'LinearSubspace':
        seeds = np.random.SeedSequence(seed).spawn(2)
        w1 = model.make_parameters(np.random.default_rng(seeds[0]))
        w2 = model.make_parameters(np.random.default_rng(seeds[1]))
        return cls(w1, w2, reg_coefficient)

    def endpoint_sets(self):
        return {'w1': self.w1, 'w2': self.w2}

    def materialize(self, alpha):
        _check_alpha(alpha)
        return {name: interpolate(self.w1[name], self.w2[name], alpha) for name in self.w1}

    def regularizer(self):
        names = [name for name, p in self.w1.items() if p.role == 'weight']
        return cosine_regularizer({n: self.w1[n] for n in names}, {n: self.w2[n] for n in names},
                                  self.reg_coefficient)


class StructuredHybridSubspace(Subspace):
    """Shared conv/linear weights; only the normalization affines form an endpoint pair."""
    kind = 'hybrid'

    def __init__(self, shared: Dict[str, Parameter], w1: Dict[str, Parameter], w2: Dict[str, Parameter]):
        _check_pair(w1, w2)
        if any(p.role != 'norm' for p in w1.values()):
            raise SubspaceError("only normalization affine parameters may be duplicated")
        overlap = set(shared) & set(w1)
        if overlap:
            raise SubspaceError(f"parameters both shared and duplicated: {sorted(overlap)}")
        self.shared, self.w1, self.w2 = shared, w1, w2

    @classmethod
    def from_model(cls, model: Model, seed: int) -> 'StructuredHybridSubspace':
        seeds = np.random.SeedSequence(seed).spawn(2)
        first = model.make_parameters(np.random.default_rng(seeds[0]))
        second = model.make_parameters(np.random.default_rng(seeds[1]))
        shared = {n: p for n, p in first.items() if p.role != 'norm'}
        w1 = {n: p for n, p in first.items() if p.role == 'norm'}
        w2 = {n: p for n, p in second.items() if p.role == 'norm'}
        return cls(shared, w1, w2)

    def endpoint_sets(self):
        return {'shared': self.shared, 'w1': self.w1, 'w2': self.w2}

    def materialize(self, alpha):
        _check_alpha(alpha)
        weights: Dict[str, Tensor] = dict(self.shared)
        for name in self.w1:
            weights[name] = interpolate(self.w1[name], self.w2[name], alpha)
        return weights


def build_subspace(kind: str, model: Model, seed: int, reg_coefficient: float = 1.0) -> Subspace:
    if kind == 'point':
        return PointSubspace.from_model(model)
    if kind == 'line':
        return LinearSubspace.from_model(model, seed, reg_coefficient)
    if kind == 'hybrid':
        return StructuredHybridSubspace.from_model(model, seed)
    raise SubspaceError(f"unknown subspace kind {kind!r}")


def cosine_regularizer(w1: Mapping[str, Tensor], w2: Mapping[str, Tensor], beta: float = 1.0) -> Tensor:
    """beta * sum over layers of cos^2(w1, w2); zero-norm layers contribute nothing."""
    _check_pair(w1, w2)
    total: Optional[Tensor] = None
    for name in w1:
        a, b = w1[name], w2[name]
        if not np.any(a.data) or not np.any(b.data):
            continue
        dot = T.sum_(a * b)
        term = (dot * dot) / (T.sum_(a * a) * T.sum_(b * b))
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return T.scalar_mul(total, beta)


@dataclass
class StepContext:
    step: int = 0
    total_steps: int = 1


class AlphaSampler:
    """Seeded alpha sampler; one instance per training run."""

    def __init__(self, spec: SamplerSpec, compression: Optional[CompressionSpec] = None,
                 rng: Optional[np.random.Generator] = None):
        spec.validate()
        self.spec = spec
        self.compression = compression
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)

    def sample(self, context: Optional[StepContext] = None) -> List[float]:
        return sample_alphas(self.spec, self.rng, context, self.compression)


def sample_alphas(spec: SamplerSpec, rng: np.random.Generator, context: Optional[StepContext] = None,
                  compression: Optional[CompressionSpec] = None) -> List[float]:
    if spec.mode == 'structured_sandwich':
        if spec.values_are_alpha:
            lo, hi = spec.alpha_min, spec.alpha_max
            return [lo, hi, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))]
        structured = compression or CompressionSpec(kind='structured')
        lo, hi = structured.width_min, structured.width_max
        widths = [lo, hi, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))]
        return [min(max(width_to_alpha(w, structured), 0.0), 1.0) for w in widths]
    if spec.mode == 'unstructured_biased':
        draw = rng.random()
        if draw < spec.endpoint_prob:
            return [spec.alpha_min]
        if draw < 2 * spec.endpoint_prob:
            return [spec.alpha_max]
        return [float(rng.uniform(spec.alpha_min, spec.alpha_max))]
    return [float(spec.levels[rng.integers(len(spec.levels))])]


class PointWarmupSampler:
    """Lowest sparsity (alpha_max) for the warmup fraction of steps, then uniform over the range."""

    def __init__(self, spec: SamplerSpec, warmup_fraction: float = 0.8,
                 rng: Optional[np.random.Generator] = None):
        self.spec = spec
        self.warmup_fraction = warmup_fraction
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)

    def sample(self, context: Optional[StepContext] = None) -> List[float]:
        context = context or StepContext()
        if context.step < self.warmup_fraction * context.total_steps:
            return [self.spec.alpha_max]
        return [float(self.rng.uniform(self.spec.alpha_min, self.spec.alpha_max))]
