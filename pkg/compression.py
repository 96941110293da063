import logging
import math
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

import tensor as T
from layers import Conv2d, Linear, Model, _Norm
from models import CompressionSpec, CostReport, QuantParams, WarmupSchedule
from tensor import Tensor

logger = logging.getLogger(__name__)

Weights = Mapping[str, Tensor]


class CompressionError(ValueError):
    pass


def gamma_structured(alpha: float, spec: Optional[CompressionSpec] = None) -> float:
    """Width factor: the affine map [0, 1] -> [width_min, width_max]."""
    spec = spec or CompressionSpec(kind='structured')
    return spec.width_min + (spec.width_max - spec.width_min) * alpha


def width_to_alpha(width: float, spec: Optional[CompressionSpec] = None) -> float:
    spec = spec or CompressionSpec(kind='structured')
    return (width - spec.width_min) / (spec.width_max - spec.width_min)


def gamma_unstructured(alpha: float) -> float:
    return 1.0 - alpha


def gamma_quant(alpha: float, spec: Optional[CompressionSpec] = None) -> int:
    """Bit width bits_min + bits_span * alpha, rounded to the nearest integer."""
    spec = spec or CompressionSpec(kind='quantization')
    return int(np.rint(spec.bits_min + spec.bits_span * alpha))


def gamma(spec: CompressionSpec, alpha: float) -> float:
    if spec.kind == 'structured':
        return gamma_structured(alpha, spec)
    if spec.kind == 'unstructured':
        return gamma_unstructured(alpha)
    return float(gamma_quant(alpha, spec))


def warmup_gamma(alpha: float, schedule: WarmupSchedule) -> float:
    d = max(1.0 - schedule.current / schedule.total, 0.0)
    return (1.0 - alpha) * (1.0 - d)


def level(spec: CompressionSpec, alpha: float, schedule: Optional[WarmupSchedule] = None) -> float:
    """Compression level for alpha, with the sparsity warmup when it is enabled."""
    if spec.warmup and spec.kind == 'unstructured' and schedule is not None:
        return warmup_gamma(alpha, schedule)
    return gamma(spec, alpha)


def _keep(channels: int, width: float) -> int:
    return max(1, int(np.rint(width * channels)))


def structured_channels(model: Model, width: float) -> Dict[str, Tuple[int, int]]:
    """(kept inputs, kept outputs) for every conv/linear/norm layer at width factor ``width``."""
    if width <= 0 or width > 1:
        raise CompressionError(f"structured width factor must lie in (0, 1], got {width}")
    compressible = model.compressible_layers()
    active = compressible[0].descriptor.in_channels
    channels = {}
    for layer in model.layers:
        d = layer.descriptor
        if layer.kind in ('linear', 'conv'):
            k_out = d.out_channels if d.is_last_layer else _keep(d.out_channels, width)
            channels[layer.name] = (active, k_out)
            active = k_out
        elif isinstance(layer, _Norm):
            channels[layer.name] = (active, active)
    return channels


def apply_structured(weights: Weights, width: float, model: Model) -> Tuple[Dict[str, Tensor], Dict[str, Tuple[int, int]]]:
    channels = structured_channels(model, width)
    out = dict(weights)
    for layer in model.layers:
        if layer.name not in channels:
            continue
        k_in, k_out = channels[layer.name]
        if layer.kind in ('linear', 'conv'):
            w = weights[f"{layer.name}.weight"]
            if w.shape[0] > k_out or w.shape[1] > k_in:
                out[f"{layer.name}.weight"] = w[:k_out, :k_in]
            bias = f"{layer.name}.bias"
            if bias in weights and weights[bias].shape[0] > k_out:
                out[bias] = weights[bias][:k_out]
        else:
            for key in (f"{layer.name}.weight", f"{layer.name}.bias"):
                if weights[key].shape[0] > k_out:
                    out[key] = weights[key][:k_out]
    return out, channels


def prunable_weight_names(model: Model, spec: Optional[CompressionSpec] = None, exempt: Optional[bool] = None) -> List[str]:
    if exempt is None:
        exempt = spec.exempt_first_last if spec is not None else True
    names = []
    for layer in model.compressible_layers():
        d = layer.descriptor
        if exempt and (d.is_first_layer or d.is_last_layer):
            continue
        names.append(f"{layer.name}.weight")
    return names


def topk_mask(values: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the floor(sparsity * n) smallest magnitudes; equal magnitudes go in index order."""
    n = values.size
    k = math.floor(sparsity * n)
    mask = np.ones(n, dtype=values.dtype)
    if k:
        order = np.argsort(np.abs(values).reshape(-1), kind='stable')
        mask[order[:k]] = 0
    return mask.reshape(values.shape)


def apply_topk(weights: Weights, sparsity: float, prunable: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
    if not 0.0 <= sparsity < 1.0:
        raise CompressionError(f"TopK sparsity must lie in [0, 1), got {sparsity}")
    out = dict(weights)
    for name in (list(weights) if prunable is None else prunable):
        w = weights[name]
        if math.floor(sparsity * w.size) == 0:
            continue
        out[name] = w * Tensor(topk_mask(w.data, sparsity))
    return out


def quantize_array(values: np.ndarray, bits: int) -> Tuple[QuantParams, np.ndarray]:
    if values.size == 0:
        raise CompressionError("cannot quantize an empty tensor")
    qmax = 2 ** bits - 1
    x = values.astype(np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        zero_point = int(np.clip(np.rint(-lo), 0, qmax))
        return QuantParams(bits, 1.0, zero_point), values.copy()
    scale = (hi - lo) / qmax
    zero_point = int(np.clip(np.rint(-lo / scale), 0, qmax))
    q = np.clip(np.rint(x / scale) + zero_point, 0, qmax)
    return QuantParams(bits, scale, zero_point), (scale * (q - zero_point)).astype(values.dtype)


def quantize_affine(t: Tensor, bits: int) -> Tuple[QuantParams, Tensor]:
    """Per-tensor affine fake-quantization; gradients pass straight through the rounding."""
    if not 2 <= bits <= 8:
        raise CompressionError(f"bit width must lie in [2, 8], got {bits}")
    params, dequantized = quantize_array(t.data, bits)
    return params, T.straight_through(t, dequantized)


def quantize_activation(x: Tensor, bits: int) -> Tensor:
    return quantize_affine(x, bits)[1]


def activation_quantizer(bits: int) -> Callable[[Tensor], Tensor]:
    return lambda x: quantize_activation(x, bits)


def apply_quantization(weights: Weights, bits: int, model: Model, spec: CompressionSpec) -> Dict[str, Tensor]:
    out = dict(weights)
    for layer in model.compressible_layers():
        d = layer.descriptor
        if not spec.quantize_first_last and (d.is_first_layer or d.is_last_layer):
            continue
        name = f"{layer.name}.weight"
        out[name] = quantize_affine(weights[name], bits)[1]
    return out


def compress(weights: Weights, spec: CompressionSpec, level_value: float, model: Model) -> Tuple[Dict[str, Tensor], Dict[str, Tuple[int, int]]]:
    """f(weights, gamma): returns the compressed weights and the active-channel map (structured only)."""
    if spec.kind == 'structured':
        return apply_structured(weights, level_value, model)
    if spec.kind == 'unstructured':
        return apply_topk(weights, level_value, prunable_weight_names(model, spec)), {}
    return apply_quantization(weights, int(round(level_value)), model, spec), {}


def _layer_geometry(model: Model) -> Dict[str, Tuple[int, int, int]]:
    """Output height, width and kernel area of each conv/linear layer for one sample."""
    shape = tuple(model.config.input_shape)
    h, w = (shape[1], shape[2]) if len(shape) == 3 else (1, 1)
    geometry = {}
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            geometry[layer.name] = (h, w, layer.kernel * layer.kernel)
        elif layer.kind == 'pool':
            kernel = getattr(layer, 'kernel', None)
            h, w = (h // kernel, w // kernel) if kernel else (1, 1)
        elif isinstance(layer, Linear):
            geometry[layer.name] = (1, 1, 1)
    return geometry


def compression_cost(model: Model, spec: CompressionSpec, level_value: float,
                     subspace_kind: str = 'line', batch_size: int = 128) -> CostReport:
    """Forward cost of one batch against the one-off cost of materializing and compressing.

    Dense cost of a conv is d1*d2*H*W*kh*kw per sample. Overheads: structured marks
    each layer (1 op), TopK and quantization touch every weight of a layer once,
    line materialization touches every interpolated element, a point costs nothing.
    """
    geometry = _layer_geometry(model)
    specs = model.param_specs()
    channels = structured_channels(model, level_value) if spec.kind == 'structured' else {}
    prunable = set(prunable_weight_names(model, spec)) if spec.kind == 'unstructured' else set()
    bits = int(round(level_value)) if spec.kind == 'quantization' else 32

    dense = compressed = nonzero = storage = overhead = 0
    per_layer = {}
    layers = model.compressible_layers()
    for layer in layers:
        d = layer.descriptor
        h, w, k = geometry[layer.name]
        name = f"{layer.name}.weight"
        before = compressed
        dense += d.in_channels * d.out_channels * h * w * k
        n = d.in_channels * d.out_channels * k
        if spec.kind == 'structured':
            k_in, k_out = channels[layer.name]
            kept = k_in * k_out * k
            compressed += kept * h * w
            nonzero += kept
            storage += kept * 32
            overhead += 1
        elif spec.kind == 'unstructured':
            kept = n - math.floor(level_value * n) if name in prunable else n
            compressed += kept * h * w
            nonzero += kept
            storage += kept * 32
            overhead += n if name in prunable else 0
        else:
            quantized = spec.quantize_first_last or not (d.is_first_layer or d.is_last_layer)
            compressed += n * h * w
            nonzero += n
            storage += n * (bits if quantized else 32)
            overhead += n if quantized else 0
        per_layer[layer.name] = (d.in_channels * d.out_channels * h * w * k * batch_size,
                                 (compressed - before) * batch_size)

    for key, (shape, role) in specs.items():
        if role == 'weight':
            continue
        count = int(np.prod(shape))
        if spec.kind == 'structured':
            layer_name = key.rsplit('.', 1)[0]
            count = channels[layer_name][1] if layer_name in channels else count
        nonzero += count
        storage += count * 32

    if subspace_kind == 'line':
        overhead += sum(int(np.prod(shape)) for shape, _ in specs.values())
    elif subspace_kind == 'hybrid':
        overhead += sum(int(np.prod(shape)) for shape, role in specs.values() if role == 'norm')

    report = CostReport(dense_flops=dense * batch_size, compressed_flops=compressed * batch_size,
                        nonzero_params=nonzero, storage_bits=storage, overhead_flops=overhead,
                        layers=len(layers), batch_size=batch_size, per_layer=per_layer)
    logger.debug(f"Cost at level {level_value} ({spec.kind}, {subspace_kind}): {report.to_dict()}")
    return report
