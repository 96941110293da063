import copy
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

import tensor as T
from models import ModelConfig, NormSpec
from tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

# observer(layer_name, stored_mean, batch_mean, stored_var, batch_var)
Observer = Callable[[str, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


@dataclass
class LayerDescriptor:
    name: str
    kind: str
    is_first_layer: bool = False
    is_last_layer: bool = False
    in_channels: int = 0
    out_channels: int = 0


@dataclass
class ForwardContext:
    training: bool = False
    act_quant: Optional[Callable[[Tensor], Tensor]] = None
    observer: Optional[Observer] = None


class Layer:
    kind = 'layer'

    def __init__(self, name: str, in_channels: int = 0, out_channels: int = 0):
        self.name = name
        self.descriptor = LayerDescriptor(name, self.kind, in_channels=in_channels,
                                          out_channels=out_channels)

    def param_specs(self) -> Dict[str, Tuple[Tuple[int, ...], str]]:
        return {}

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, weights: Mapping[str, Tensor], ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Layer):
    kind = 'linear'

    def __init__(self, name: str, in_features: int, out_features: int, bias: bool = False):
        super().__init__(name, in_features, out_features)
        self.in_features, self.out_features, self.bias = in_features, out_features, bias

    def param_specs(self):
        specs = {f"{self.name}.weight": ((self.out_features, self.in_features), 'weight')}
        if self.bias:
            specs[f"{self.name}.bias"] = ((self.out_features,), 'bias')
        return specs

    def init_params(self, rng):
        shape = (self.out_features, self.in_features)
        if self.descriptor.is_last_layer:
            # classifier head: bound 1/sqrt(fan_in) keeps initial logits near zero
            bound = 1.0 / np.sqrt(self.in_features)
            weight = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            weight = _kaiming_uniform(rng, shape, self.in_features)
        params = {f"{self.name}.weight": weight}
        if self.bias:
            params[f"{self.name}.bias"] = np.zeros(self.out_features, dtype=np.float32)
        return params

    def forward(self, x, weights, ctx):
        out = T.matmul(x, T.transpose(weights[f"{self.name}.weight"]))
        if self.bias:
            out = out + weights[f"{self.name}.bias"]
        return out


class Conv2d(Layer):
    kind = 'conv'

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, pad: int = 1):
        super().__init__(name, in_channels, out_channels)
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def param_specs(self):
        shape = (self.descriptor.out_channels, self.descriptor.in_channels, self.kernel, self.kernel)
        return {f"{self.name}.weight": (shape, 'weight')}

    def init_params(self, rng):
        (shape, _), = self.param_specs().values()
        return {f"{self.name}.weight": _kaiming_uniform(rng, shape, shape[1] * shape[2] * shape[3])}

    def forward(self, x, weights, ctx):
        return T.conv2d(x, weights[f"{self.name}.weight"], stride=self.stride, pad=self.pad)


def _affine(x: Tensor, weights: Mapping[str, Tensor], name: str) -> Tensor:
    c = x.shape[1]
    shape = (1, c) + (1,) * (x.data.ndim - 2)
    scale = T.reshape(weights[f"{name}.weight"], shape)
    shift = T.reshape(weights[f"{name}.bias"], shape)
    return x * scale + shift


class _Norm(Layer):
    def __init__(self, name: str, channels: int, spec: NormSpec):
        super().__init__(name, channels, channels)
        self.channels = channels
        self.spec = spec

    def param_specs(self):
        return {f"{self.name}.weight": ((self.channels,), 'norm'),
                f"{self.name}.bias": ((self.channels,), 'norm')}

    def init_params(self, rng):
        return {f"{self.name}.weight": np.ones(self.channels, dtype=np.float32),
                f"{self.name}.bias": np.zeros(self.channels, dtype=np.float32)}


class BatchNorm(_Norm):
    """BatchNorm with running statistics; pruned inputs use the first c stored entries."""
    kind = 'norm'

    def __init__(self, name: str, channels: int, spec: NormSpec):
        super().__init__(name, channels, spec)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.replay_batch_stats = False

    def forward(self, x, weights, ctx):
        c = x.shape[1]
        axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
        if ctx.training:
            if x.shape[0] < 2:
                raise ValueError(f"{self.name}: BatchNorm training needs a batch of at least 2")
            batch_mean = x.data.mean(axis=axes)
            n = x.data.size // c
            batch_var = x.data.var(axis=axes) * (n / (n - 1))
            m = self.spec.bn_momentum
            self.running_mean[:c] = (1 - m) * self.running_mean[:c] + m * batch_mean
            self.running_var[:c] = (1 - m) * self.running_var[:c] + m * batch_var
            out = T.normalize(x, axes, self.spec.bn_eps)
        else:
            batch_mean = x.data.mean(axis=axes).astype(np.float32)
            batch_var = x.data.var(axis=axes).astype(np.float32)
            if self.replay_batch_stats:
                self.running_mean[:c] = batch_mean
                self.running_var[:c] = batch_var
            if ctx.observer is not None:
                ctx.observer(self.name, self.running_mean[:c].copy(), batch_mean,
                             self.running_var[:c].copy(), batch_var)
            shape = (1, c) + (1,) * (x.data.ndim - 2)
            mu = self.running_mean[:c].reshape(shape)
            inv_std = 1.0 / np.sqrt(self.running_var[:c].reshape(shape) + self.spec.bn_eps)
            out = (x - Tensor(mu)) * Tensor(inv_std)
        return _affine(out, weights, self.name)


class GroupNorm(_Norm):
    """Stateless: each sample normalized over channel groups and all spatial positions."""
    kind = 'norm'

    def groups_for(self, channels: int, ndim: int) -> int:
        g = self.spec.effective_groups(channels)
        # a 2-d activation has one element per channel; per-channel groups would zero it out
        if ndim == 2 and g == channels and channels > 1:
            return 1
        return g

    def forward(self, x, weights, ctx):
        n, c = x.shape[0], x.shape[1]
        if c == 0:
            raise ValueError(f"{self.name}: GroupNorm on zero channels")
        g = self.groups_for(c, x.data.ndim)
        spatial = x.shape[2:]
        grouped = T.reshape(x, (n, g, c // g) + spatial)
        normed = T.normalize(grouped, tuple(range(2, grouped.data.ndim)), self.spec.gn_eps)
        return _affine(T.reshape(normed, x.shape), weights, self.name)


class ReLU(Layer):
    kind = 'activation'

    def forward(self, x, weights, ctx):
        out = T.relu(x)
        return ctx.act_quant(out) if ctx.act_quant is not None else out


class AvgPool(Layer):
    kind = 'pool'

    def __init__(self, name: str, channels: int, kernel: int = 2):
        super().__init__(name, channels, channels)
        self.kernel = kernel

    def forward(self, x, weights, ctx):
        return T.avgpool2d(x, self.kernel)


class GlobalAvgPool(Layer):
    kind = 'pool'

    def forward(self, x, weights, ctx):
        return T.mean(x, axes=(2, 3))


class Flatten(Layer):
    kind = 'flatten'

    def forward(self, x, weights, ctx):
        return T.flatten(x) if x.data.ndim > 2 else x


class Model:
    def __init__(self, config: ModelConfig, layers: List[Layer]):
        self.config = config
        self.layers = layers
        self.params: Dict[str, Parameter] = {}
        compressible = self.compressible_layers()
        for layer in compressible:
            layer.descriptor.is_first_layer = layer is compressible[0]
            layer.descriptor.is_last_layer = layer is compressible[-1]

    def descriptors(self) -> List[LayerDescriptor]:
        return [layer.descriptor for layer in self.layers]

    def compressible_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if layer.kind in ('linear', 'conv')]

    def norm_layers(self) -> List[_Norm]:
        return [layer for layer in self.layers if isinstance(layer, _Norm)]

    def param_specs(self) -> Dict[str, Tuple[Tuple[int, ...], str]]:
        specs = {}
        for layer in self.layers:
            specs.update(layer.param_specs())
        return specs

    def init_weights(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        weights = {}
        for layer in self.layers:
            weights.update(layer.init_params(rng))
        return weights

    def make_parameters(self, rng: np.random.Generator) -> Dict[str, Parameter]:
        roles = {name: role for name, (_, role) in self.param_specs().items()}
        return {name: Parameter(name, value, roles[name]) for name, value in self.init_weights(rng).items()}

    def forward(self, x, weights: Optional[Mapping[str, Tensor]] = None, training: bool = False,
                act_quant: Optional[Callable[[Tensor], Tensor]] = None,
                observer: Optional[Observer] = None) -> Tensor:
        weights = self.params if weights is None else weights
        ctx = ForwardContext(training=training, act_quant=act_quant, observer=observer)
        out = T.as_tensor(x)
        for layer in self.layers:
            out = layer.forward(out, weights, ctx)
        return out

    __call__ = forward

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers = {}
        for layer in self.norm_layers():
            if isinstance(layer, BatchNorm):
                buffers[f"{layer.name}.running_mean"] = layer.running_mean
                buffers[f"{layer.name}.running_var"] = layer.running_var
        return buffers

    def load_buffers(self, buffers: Mapping[str, np.ndarray]):
        for layer in self.norm_layers():
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(buffers[f"{layer.name}.running_mean"], dtype=np.float32)
                layer.running_var = np.array(buffers[f"{layer.name}.running_var"], dtype=np.float32)

    def copy(self) -> 'Model':
        return copy.deepcopy(self, memo={id(self.params): self.params})


def _norm_layer(name: str, channels: int, spec: NormSpec) -> _Norm:
    return BatchNorm(name, channels, spec) if spec.kind == 'batch' else GroupNorm(name, channels, spec)


def _build_mlp(config: ModelConfig) -> List[Layer]:
    layers: List[Layer] = [Flatten('flatten')]
    in_features = int(np.prod(config.input_shape))
    for i, width in enumerate(config.widths, start=1):
        layers += [Linear(f"fc{i}", in_features, width),
                   _norm_layer(f"norm{i}", width, config.norm),
                   ReLU(f"relu{i}", width, width)]
        in_features = width
    layers.append(Linear(f"fc{len(config.widths) + 1}", in_features, config.num_classes, bias=True))
    return layers


def _build_small_cnn(config: ModelConfig) -> List[Layer]:
    layers: List[Layer] = []
    in_channels, height, width = config.input_shape
    for i, channels in enumerate(config.channels, start=1):
        layers += [Conv2d(f"conv{i}", in_channels, channels),
                   _norm_layer(f"norm{i}", channels, config.norm),
                   ReLU(f"relu{i}", channels, channels),
                   AvgPool(f"pool{i}", channels)]
        in_channels = channels
        height, width = height // 2, width // 2
    if height < 1 or width < 1:
        raise ValueError(f"input {config.input_shape} is too small for {len(config.channels)} pooling stages")
    layers += [GlobalAvgPool('gap', in_channels, in_channels),
               Linear('fc', in_channels, config.num_classes, bias=True)]
    return layers


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    builder = _build_mlp if config.architecture == 'mlp' else _build_small_cnn
    model = Model(config, builder(config))
    model.params = model.make_parameters(np.random.default_rng(seed))
    logger.info(f"Built {config.architecture} with {sum(p.size for p in model.params.values())} parameters "
                f"and {config.norm.kind} normalization")
    return model


def replace_bn_with_gn(model: Model, spec: Optional[NormSpec] = None) -> Model:
    """Swap every BatchNorm for a GroupNorm; affine parameters carry over, running stats are dropped."""
    config = copy.deepcopy(model.config)
    norm = copy.deepcopy(spec) if spec is not None else config.norm
    norm.kind = 'group'
    config.norm = norm
    layers = []
    for layer in model.layers:
        if isinstance(layer, BatchNorm):
            layers.append(GroupNorm(layer.name, layer.channels, norm))
        else:
            layers.append(copy.deepcopy(layer))
    replaced = Model(config, layers)
    replaced.params = model.params
    return replaced
