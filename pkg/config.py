import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Dict, Mapping, Optional, get_args, get_origin, get_type_hints

from dotenv import dotenv_values, load_dotenv

from models import BaselineSpec, CompressionSpec, ModelConfig, SamplerSpec, TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    LOG_LEVEL: str = 'INFO'
    OUTPUT_DIR: str = 'runs'
    EVAL_WORKERS: int = 1
    PREFETCH: int = 2

    @classmethod
    def from_env(cls):
        load_dotenv()
        return cls(
            LOG_LEVEL=os.getenv('LCS_LOG_LEVEL', 'INFO'),
            OUTPUT_DIR=os.getenv('LCS_OUTPUT_DIR', 'runs'),
            EVAL_WORKERS=int(os.getenv('LCS_EVAL_WORKERS', '1')),
            PREFETCH=min(int(os.getenv('LCS_PREFETCH', '2')), 2),
        )


@dataclass
class SubspaceConfig:
    kind: str = 'line'
    beta: float = 1.0


@dataclass
class DataConfig:
    source: str = 'synthetic'
    n_per_class: int = 1000
    separation: float = 0.35
    noise: float = 0.8
    test_fraction: float = 0.2
    flip: bool = False
    train_images: str = ''
    train_labels: str = ''
    test_images: str = ''
    test_labels: str = ''
    train_files: str = ''
    test_file: str = ''


@dataclass
class EvalConfig:
    grid_points: int = 33
    batch_size: int = 128


@dataclass
class OutputConfig:
    dir: str = ''
    checkpoint: str = 'model.lcss'
    log: str = 'progress.csv'


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    subspace: SubspaceConfig = field(default_factory=SubspaceConfig)
    compression: CompressionSpec = field(default_factory=CompressionSpec)
    sampler: SamplerSpec = field(default_factory=lambda: SamplerSpec(alpha_min=0.025))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Mapping[str, str]] = None) -> 'RunConfig':
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        values = dict(dotenv_values(path))
        values.update(overrides or {})
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: Mapping[str, Optional[str]]) -> 'RunConfig':
        cfg = cls()
        for key, raw in values.items():
            _assign(cfg, key, raw)
        cfg.sync()
        cfg.validate()
        return cfg

    def sync(self):
        """Seeds descend from train.seed."""
        self.sampler.seed = self.train.seed

    def validate(self):
        try:
            self.model.validate()
            self.compression.validate()
            self.sampler.validate()
            self.train.validate()
            self.baseline.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        norm = self.model.norm
        if self.compression.kind == 'structured' and norm.kind == 'group' and norm.groups_rule != 'per_channel':
            raise ConfigError("structured compression with GroupNorm needs model.norm.groups_rule=per_channel")
        if self.subspace.kind not in ('line', 'point', 'hybrid'):
            raise ConfigError(f"subspace.kind must be line, point or hybrid, got {self.subspace.kind!r}")
        if self.subspace.kind == 'hybrid' and self.compression.kind != 'structured':
            raise ConfigError("the hybrid subspace only applies to structured compression")
        if self.subspace.beta < 0:
            raise ConfigError("subspace.beta must be non-negative")
        expected_mode = {'structured': 'structured_sandwich', 'unstructured': 'unstructured_biased',
                         'quantization': 'quant_discrete'}[self.compression.kind]
        if self.sampler.mode != expected_mode:
            raise ConfigError(f"{self.compression.kind} compression samples with {expected_mode}, "
                              f"not {self.sampler.mode}")
        if self.compression.kind == 'unstructured' and self.sampler.alpha_min <= 0:
            raise ConfigError("unstructured sampling needs sampler.alpha_min > 0 (alpha=0 would prune every weight)")
        if self.data.source not in ('synthetic', 'idx', 'cifar'):
            raise ConfigError(f"data.source must be synthetic, idx or cifar, got {self.data.source!r}")
        if self.eval.grid_points < 2 or self.eval.batch_size < 1:
            raise ConfigError("eval.grid_points must be >= 2 and eval.batch_size >= 1")

    def effective_lr(self) -> float:
        return self.train.quant_lr if self.compression.kind == 'quantization' else self.train.lr

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        return cls.from_values(_flatten(data))


def _to_plain(obj) -> Any:
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _flatten(data: Mapping[str, Any], prefix: str = '') -> Dict[str, str]:
    flat = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, path + '.'))
        elif isinstance(value, (list, tuple)):
            flat[path] = ','.join(repr(v) if isinstance(v, float) else str(v) for v in value)
        else:
            flat[path] = repr(value) if isinstance(value, float) else str(value)
    return flat


def _parse_scalar(kind, raw: str, key: str):
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(text)
            return lowered in ('true', '1', 'yes')
        if kind is int:
            return int(text)
        if kind is float:
            if '/' in text:
                num, den = text.split('/', 1)
                return float(num) / float(den)
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}")


def _convert(annotation, raw: str, key: str):
    if get_origin(annotation) is tuple:
        item = get_args(annotation)[0]
        return tuple(_parse_scalar(item, part, key) for part in raw.split(',') if part.strip())
    return _parse_scalar(annotation, raw, key)


def _assign(cfg: RunConfig, key: str, raw: Optional[str]):
    if raw is None:
        raise ConfigError(f"{key}: missing value")
    target: Any = cfg
    parts = key.strip().split('.')
    for i, part in enumerate(parts):
        hints = get_type_hints(type(target))
        if part not in hints:
            where = '.'.join(parts[:i]) or 'top level'
            raise ConfigError(f"unknown config field {key!r} (no {part!r} in {where})")
        if i == len(parts) - 1:
            if is_dataclass(hints[part]):
                raise ConfigError(f"{key} is a section, not a field")
            setattr(target, part, _convert(hints[part], raw, key))
        else:
            target = getattr(target, part)
            if not is_dataclass(target):
                raise ConfigError(f"unknown config field {key!r}")


def parse_overrides(pairs) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    if not overrides:
        return cfg
    values = _flatten(cfg.to_dict())
    values.update(overrides)
    return RunConfig.from_values(values)


def run_dir(cfg: RunConfig, settings: Config) -> str:
    return cfg.output.dir or os.path.join(settings.OUTPUT_DIR, f"{cfg.compression.kind}-{cfg.subspace.kind}-"
                                                                 f"seed{cfg.train.seed}")
