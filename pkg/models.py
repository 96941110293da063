from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Tuple


def _from_dict(cls, data: Dict[str, Any]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        nested = f.metadata.get('nested')
        if nested is not None and isinstance(value, dict):
            value = nested.from_dict(value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


class _Record:
    """to_dict / from_dict shared by the plain records below."""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        return _from_dict(cls, data)


@dataclass
class NormSpec(_Record):
    kind: str = 'group'
    groups_rule: str = 'fixed'
    groups: int = 32
    affine: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    gn_eps: float = 1e-5

    def effective_groups(self, channels: int) -> int:
        if channels <= 0:
            raise ValueError("normalization needs at least one channel")
        if self.groups_rule == 'per_channel':
            return channels
        if channels < self.groups or channels % self.groups:
            return channels
        return self.groups

    def validate(self):
        if self.kind not in ('batch', 'group'):
            raise ValueError(f"norm kind must be batch or group, got {self.kind!r}")
        if self.groups_rule not in ('fixed', 'per_channel'):
            raise ValueError(f"groups rule must be fixed or per_channel, got {self.groups_rule!r}")
        if self.groups < 1:
            raise ValueError("fixed group count must be at least 1")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")
        if self.bn_eps <= 0 or self.gn_eps <= 0:
            raise ValueError("normalization eps must be positive")


@dataclass
class ModelConfig(_Record):
    architecture: str = 'mlp'
    widths: Tuple[int, ...] = (256, 256)
    channels: Tuple[int, ...] = (16, 32, 64)
    num_classes: int = 10
    input_shape: Tuple[int, ...] = (64,)
    norm: NormSpec = field(default_factory=NormSpec, metadata={'nested': NormSpec})

    def validate(self):
        if self.architecture not in ('mlp', 'small_cnn'):
            raise ValueError(f"architecture must be mlp or small_cnn, got {self.architecture!r}")
        plan = self.widths if self.architecture == 'mlp' else self.channels
        if not plan or any(w <= 0 for w in plan):
            raise ValueError("layer widths/channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ValueError("input shape must be positive")
        if self.architecture == 'small_cnn' and len(self.input_shape) != 3:
            raise ValueError("small_cnn expects input_shape C,H,W")
        self.norm.validate()


@dataclass
class TrainConfig(_Record):
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    warmup_epochs: int = 5
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    quant_lr: float = 0.025
    act_quant_start: float = 0.8
    warmup_fraction: float = 0.8
    checkpoint_every: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup epochs must be smaller than epochs")
        if self.lr <= 0 or self.quant_lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if not 0.0 <= self.act_quant_start <= 1.0 or not 0.0 < self.warmup_fraction <= 1.0:
            raise ValueError("training fractions must lie in [0, 1]")


@dataclass
class CompressionSpec(_Record):
    kind: str = 'unstructured'
    width_min: float = 0.25
    width_max: float = 1.0
    bits_min: int = 2
    bits_span: int = 6
    warmup: bool = False
    warmup_fraction: float = 0.8
    exempt_first_last: bool = True
    quantize_first_last: bool = True

    def validate(self):
        if self.kind not in ('structured', 'unstructured', 'quantization'):
            raise ValueError(f"compression kind must be structured, unstructured or quantization, got {self.kind!r}")
        if not 0.0 < self.width_min <= self.width_max <= 1.0:
            raise ValueError("structured width range must lie in (0, 1]")
        if not (2 <= self.bits_min and self.bits_min + self.bits_span <= 8):
            raise ValueError("quantization bit range must lie in [2, 8]")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ValueError("warmup fraction must lie in (0, 1]")


@dataclass
class WarmupSchedule(_Record):
    total: int
    current: int = 0

    def __post_init__(self):
        if self.total <= 0:
            raise ValueError("warmup length must be positive")
        if self.current < 0:
            raise ValueError("iteration counter must be non-negative")


@dataclass
class QuantParams(_Record):
    bits: int
    scale: float
    zero_point: int

    @property
    def qmin(self) -> int:
        return 0

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1


@dataclass
class SamplerSpec(_Record):
    mode: str = 'unstructured_biased'
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    endpoint_prob: float = 0.25
    levels: Tuple[float, ...] = (1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6, 1.0)
    values_are_alpha: bool = False
    seed: int = 0

    def validate(self):
        if self.mode not in ('structured_sandwich', 'unstructured_biased', 'quant_discrete'):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if not 0.0 <= self.alpha_min < self.alpha_max <= 1.0:
            raise ValueError("sampler needs 0 <= alpha_min < alpha_max <= 1")
        if not 0.0 <= self.endpoint_prob <= 0.5:
            raise ValueError("endpoint probability must lie in [0, 0.5]")
        if not self.levels or any(not 0.0 < v <= 1.0 for v in self.levels):
            raise ValueError("discrete levels must lie in (0, 1]")


@dataclass
class BaselineSpec(_Record):
    kind: str = 'fixed_topk'
    target: float = 0.5
    bits: int = 8
    widths: Tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    width_min: float = 0.25
    width_max: float = 1.0
    norm: str = 'batch'

    def validate(self):
        if self.kind not in ('fixed_topk', 'fixed_bits', 'ns_style', 'us_style'):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.kind == 'fixed_topk' and not 0.0 <= self.target < 1.0:
            raise ValueError("TopK target sparsity must lie in [0, 1)")
        if self.kind == 'fixed_bits' and not 2 <= self.bits <= 8:
            raise ValueError("baseline bit width must lie in [2, 8]")
        if self.kind == 'ns_style' and any(not 0.0 < w <= 1.0 for w in self.widths):
            raise ValueError("width factors must lie in (0, 1]")
        if self.kind == 'us_style' and not 0.0 < self.width_min < self.width_max <= 1.0:
            raise ValueError("width range must lie in (0, 1]")
        if self.norm not in ('batch', 'group'):
            raise ValueError("baseline norm must be batch or group")


@dataclass
class CostReport(_Record):
    dense_flops: int
    compressed_flops: int
    nonzero_params: int
    storage_bits: int
    overhead_flops: int
    layers: int = 0
    batch_size: int = 1
    per_layer: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def overhead_ratio(self) -> float:
        return self.overhead_flops / self.compressed_flops if self.compressed_flops else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['overhead_ratio'] = self.overhead_ratio
        return data
