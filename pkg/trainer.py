import copy
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tensor as T
from checkpoint import checkpoint_from_run, save_checkpoint
from compression import activation_quantizer, compress, gamma, level, warmup_gamma, width_to_alpha
from config import Config, RunConfig
from data_handlers import DataHandler, Dataset
from layers import Model, build_model, replace_bn_with_gn
from models import BaselineSpec, CompressionSpec, NormSpec, SamplerSpec, TrainConfig, WarmupSchedule
from subspace import AlphaSampler, PointSubspace, PointWarmupSampler, StepContext, Subspace, build_subspace
from tensor import NonFiniteError, Parameter

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'step', 'alpha', 'gamma', 'loss', 'lr']

# (alpha, compression level) pairs for one batch
Plan = Callable[[StepContext], List[Tuple[float, float]]]


class TrainingDivergedError(RuntimeError):
    pass


def seed_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator number ``index`` under the run seed (0 and 1 initialize the endpoints)."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(index + 1)[index])


@dataclass
class OptimizerState:
    buffers: List[np.ndarray] = field(default_factory=list)


class SGD:
    """SGD with heavy-ball momentum; weight decay only touches conv/linear weights."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p, buf in zip(self.params, self.state.buffers):
            grad = p.grad
            if self.weight_decay and p.role == 'weight':
                grad = grad + self.weight_decay * p.data
            buf *= self.momentum
            buf += grad
            p.data -= np.float32(lr) * buf


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int, base_lr: Optional[float] = None) -> float:
    base = cfg.lr if base_lr is None else base_lr
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return base * step / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainResult:
    model: Model
    subspace: Subspace
    spec: CompressionSpec
    history: pd.DataFrame
    steps: int = 0
    passes: int = 0

    def save_history(self, path: str):
        self.history.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')


def _run(model: Model, subspace: Subspace, spec: CompressionSpec, plan: Plan, data: Dataset,
         cfg: TrainConfig, base_lr: float, handler: DataHandler, data_rng: np.random.Generator,
         flip: bool = False, on_epoch: Optional[Callable[[int], None]] = None,
         label: str = 'subspace') -> TrainResult:
    steps_per_epoch = handler.steps_per_epoch(data, cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    act_quant_step = math.ceil(cfg.act_quant_start * total)
    optimizer = SGD(subspace.parameters(), cfg.momentum, cfg.weight_decay)
    rows = []
    step = passes = 0

    for epoch in range(cfg.epochs):
        started = time.time()
        epoch_losses = []
        for x, y in handler.iter_batches(data, cfg.batch_size, rng=data_rng, flip=flip):
            lr = lr_at(step, cfg, steps_per_epoch, base_lr)
            optimizer.zero_grad()
            total_loss = None
            try:
                for alpha, gamma_value in plan(StepContext(step, total)):
                    weights = subspace.materialize(min(max(alpha, 0.0), 1.0))
                    compressed, _ = compress(weights, spec, gamma_value, model)
                    act_quant = None
                    if spec.kind == 'quantization' and step >= act_quant_step:
                        act_quant = activation_quantizer(int(round(gamma_value)))
                    logits = model.forward(x, compressed, training=True, act_quant=act_quant)
                    loss = T.softmax_cross_entropy(logits, y)
                    value = loss.item()
                    rows.append((epoch, step, alpha, gamma_value, value, lr))
                    epoch_losses.append(value)
                    total_loss = loss if total_loss is None else total_loss + loss
                    passes += 1
                reg = subspace.regularizer()
                if reg is not None:
                    total_loss = total_loss + reg
                T.backward(total_loss)
                optimizer.step(lr)
            except NonFiniteError as e:
                logger.error(f"Training {label} diverged at epoch {epoch}, step {step} (lr={lr:.4g}): {e}")
                raise TrainingDivergedError(
                    f"non-finite values at step {step} with lr {lr:.4g}; lower train.lr") from e
            step += 1
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs} ({label}): mean loss {np.mean(epoch_losses):.4f}, "
                    f"lr {lr:.4g}, {time.time() - started:.1f}s")
        if on_epoch is not None:
            on_epoch(epoch + 1)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(model, subspace, spec, history, step, passes)


def _subspace_plan(spec: CompressionSpec, sampler, warmup_steps: Optional[int]) -> Plan:
    def plan(ctx: StepContext) -> List[Tuple[float, float]]:
        schedule = WarmupSchedule(warmup_steps, ctx.step) if warmup_steps else None
        return [(alpha, level(spec, alpha, schedule)) for alpha in sampler.sample(ctx)]
    return plan


def train_subspace(model: Model, subspace: Subspace, spec: CompressionSpec, sampler, data: Dataset,
                   cfg: TrainConfig, handler: Optional[DataHandler] = None, base_lr: Optional[float] = None,
                   flip: bool = False, on_epoch: Optional[Callable[[int], None]] = None) -> TrainResult:
    """Sample alphas, sum the losses of the compressed materialized networks, add the regularizer, step once."""
    handler = handler or DataHandler()
    if base_lr is None:
        base_lr = cfg.quant_lr if spec.kind == 'quantization' else cfg.lr
    total = cfg.epochs * handler.steps_per_epoch(data, cfg.batch_size)
    # the point subspace warms up through its sampler instead
    warmup_steps = None
    if spec.warmup and spec.kind == 'unstructured' and subspace.kind != 'point':
        warmup_steps = max(1, math.ceil(spec.warmup_fraction * total))
    plan = _subspace_plan(spec, sampler, warmup_steps)
    logger.info(f"Training {subspace.kind} subspace with {spec.kind} compression for {cfg.epochs} epochs "
                f"({total} steps, base lr {base_lr})")
    return _run(model, subspace, spec, plan, data, cfg, base_lr, handler, seed_stream(cfg.seed, 2),
                flip=flip, on_epoch=on_epoch, label=f"{subspace.kind}/{spec.kind}")


def point_subspace_warmup_policy(sampler_spec: SamplerSpec, cfg: TrainConfig,
                                 rng: Optional[np.random.Generator] = None) -> PointWarmupSampler:
    return PointWarmupSampler(sampler_spec, cfg.warmup_fraction, rng if rng is not None else seed_stream(cfg.seed, 3))


def make_sampler(cfg: RunConfig):
    if cfg.subspace.kind == 'point' and cfg.compression.kind == 'unstructured' and cfg.compression.warmup:
        return point_subspace_warmup_policy(cfg.sampler, cfg.train)
    return AlphaSampler(cfg.sampler, cfg.compression, rng=seed_stream(cfg.train.seed, 3))


def prepare_model(cfg: RunConfig) -> Model:
    """Build the network; subspace training never keeps BatchNorm."""
    model = build_model(cfg.model, seed=cfg.train.seed)
    if cfg.model.norm.kind == 'batch':
        rule = 'per_channel' if cfg.compression.kind == 'structured' else 'fixed'
        logger.warning(f"Replacing BatchNorm with GroupNorm ({rule} groups) for subspace training")
        model = replace_bn_with_gn(model, NormSpec(kind='group', groups_rule=rule, groups=cfg.model.norm.groups))
        cfg.model = model.config
    return model


def _writer(cfg: RunConfig, out_dir: Optional[str], model: Model, subspace: Subspace, training: dict):
    if not out_dir:
        return None

    def on_epoch(epoch: int):
        every = cfg.train.checkpoint_every
        if every and epoch % every == 0 and epoch < cfg.train.epochs:
            path = os.path.join(out_dir, f"epoch{epoch:03d}-{cfg.output.checkpoint}")
            save_checkpoint(path, checkpoint_from_run(cfg, model, subspace, dict(training, epochs_completed=epoch)))
    return on_epoch


def _finish(result: TrainResult, cfg: RunConfig, out_dir: Optional[str], training: dict) -> TrainResult:
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.save_history(os.path.join(out_dir, cfg.output.log))
        meta = dict(training, epochs_completed=cfg.train.epochs, steps=result.steps)
        save_checkpoint(os.path.join(out_dir, cfg.output.checkpoint),
                        checkpoint_from_run(cfg, result.model, result.subspace, meta))
    return result


def train_from_config(cfg: RunConfig, data: Optional[Tuple[Dataset, Dataset]] = None,
                      settings: Optional[Config] = None, out_dir: Optional[str] = None) -> TrainResult:
    settings = settings or Config()
    handler = DataHandler(settings.PREFETCH)
    train, _ = data if data is not None else handler.load(cfg.data, cfg.model, cfg.train.seed)
    model = prepare_model(cfg)
    subspace = build_subspace(cfg.subspace.kind, model, cfg.train.seed, cfg.subspace.beta)
    training = {'seed': cfg.train.seed, 'epochs': cfg.train.epochs}
    on_epoch = _writer(cfg, out_dir, model, subspace, training)
    result = train_subspace(model, subspace, cfg.compression, make_sampler(cfg), train, cfg.train,
                            handler=handler, base_lr=cfg.effective_lr(), flip=cfg.data.flip, on_epoch=on_epoch)
    return _finish(result, cfg, out_dir, training)


def run_trials(cfg: RunConfig, seeds: Sequence[int], data: Optional[Tuple[Dataset, Dataset]] = None,
               settings: Optional[Config] = None) -> List[TrainResult]:
    """One training run per seed; the dataset stays fixed across trials."""
    results = []
    for seed in seeds:
        trial = copy.deepcopy(cfg)
        trial.train.seed = seed
        trial.sync()
        logger.info(f"Trial with seed {seed}")
        results.append(train_from_config(trial, data=data, settings=settings))
    return results


def baseline_run_config(cfg: RunConfig) -> RunConfig:
    """The run config a baseline is trained and later evaluated under."""
    out = copy.deepcopy(cfg)
    spec = out.baseline
    kind = {'fixed_topk': 'unstructured', 'fixed_bits': 'quantization'}.get(spec.kind, 'structured')
    out.compression.kind = kind
    out.sampler.mode = {'unstructured': 'unstructured_biased', 'quantization': 'quant_discrete',
                        'structured': 'structured_sandwich'}[kind]
    if kind == 'structured':
        out.compression.width_min, out.compression.width_max = spec.width_min, spec.width_max
    out.subspace.kind = 'point'
    out.model.norm.kind = spec.norm
    if spec.norm == 'group' and kind == 'structured':
        out.model.norm.groups_rule = 'per_channel'
    out.validate()
    return out


def _baseline_plan(spec: BaselineSpec, compression: CompressionSpec, warmup_steps: int,
                   rng: np.random.Generator) -> Plan:
    structured = CompressionSpec(kind='structured', width_min=spec.width_min, width_max=spec.width_max)

    def widths(values):
        return [(width_to_alpha(w, structured), w) for w in values]

    def plan(ctx: StepContext) -> List[Tuple[float, float]]:
        if spec.kind == 'fixed_topk':
            alpha = 1.0 - spec.target
            return [(alpha, warmup_gamma(alpha, WarmupSchedule(warmup_steps, ctx.step)))]
        if spec.kind == 'fixed_bits':
            alpha = (spec.bits - compression.bits_min) / compression.bits_span
            return [(alpha, float(spec.bits))]
        if spec.kind == 'ns_style':
            return widths(spec.widths)
        lo, hi = spec.width_min, spec.width_max
        return widths([lo, hi, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))])
    return plan


def train_fixed_baseline(cfg: RunConfig, data: Optional[Tuple[Dataset, Dataset]] = None,
                         settings: Optional[Config] = None, out_dir: Optional[str] = None) -> TrainResult:
    """One network trained for one target (or a width set) with BatchNorm unless configured otherwise."""
    run_cfg = baseline_run_config(cfg)
    spec = run_cfg.baseline
    settings = settings or Config()
    handler = DataHandler(settings.PREFETCH)
    train, _ = data if data is not None else handler.load(run_cfg.data, run_cfg.model, run_cfg.train.seed)
    model = build_model(run_cfg.model, seed=run_cfg.train.seed)
    subspace = PointSubspace.from_model(model)
    compression = run_cfg.compression
    total = run_cfg.train.epochs * handler.steps_per_epoch(train, run_cfg.train.batch_size)
    warmup_steps = max(1, math.ceil(compression.warmup_fraction * total))
    plan = _baseline_plan(spec, compression, warmup_steps, seed_stream(run_cfg.train.seed, 3))
    training = {'seed': run_cfg.train.seed, 'epochs': run_cfg.train.epochs, 'baseline': spec.to_dict()}
    logger.info(f"Training {spec.kind} baseline with {spec.norm} normalization for {run_cfg.train.epochs} epochs")
    result = _run(model, subspace, compression, plan, train, run_cfg.train, run_cfg.effective_lr(), handler,
                  seed_stream(run_cfg.train.seed, 2), flip=run_cfg.data.flip,
                  on_epoch=_writer(run_cfg, out_dir, model, subspace, training), label=spec.kind)
    return _finish(result, run_cfg, out_dir, training)


def baseline_level(cfg: RunConfig) -> float:
    """The compression level a baseline was trained for (its own setting in drift and sweep comparisons)."""
    spec = cfg.baseline
    if spec.kind == 'fixed_topk':
        return spec.target
    if spec.kind == 'fixed_bits':
        return float(spec.bits)
    return gamma(cfg.compression, 1.0)
