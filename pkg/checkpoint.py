import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from config import RunConfig
from layers import Model, build_model
from subspace import LinearSubspace, PointSubspace, StructuredHybridSubspace, Subspace
from tensor import Parameter

logger = logging.getLogger(__name__)

MAGIC = b'LCSS'
VERSION = 1
SET_LABELS = ('w', 'w1', 'w2', 'shared', 'buffer')


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    metadata: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def subspace_kind(self) -> str:
        return self.metadata.get('subspace', 'point')

    def group(self, label: str) -> Dict[str, np.ndarray]:
        prefix = f"{label}/"
        return {name[len(prefix):]: value for name, value in self.tensors.items() if name.startswith(prefix)}


def save_checkpoint(path: str, checkpoint: Checkpoint) -> int:
    """Write the LCSS container; returns the number of bytes written."""
    meta = json.dumps(checkpoint.metadata, sort_keys=True).encode('utf-8')
    chunks = [MAGIC, struct.pack('<I', checkpoint.version), struct.pack('<I', len(meta)), meta]
    for name, value in checkpoint.tensors.items():
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {name[:40]}...")
        array = np.asarray(value)
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.astype('<f4').tobytes())
    payload = b''.join(chunks)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        with open(path, 'wb') as f:
            f.write(payload)
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise
    logger.info(f"Saved checkpoint {path} ({len(checkpoint.tensors)} tensors, {len(payload)} bytes)")
    return len(payload)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as f:
        raw = f.read()
    reader = _Reader(raw, path)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not an LCSS checkpoint (bad magic)")
    version, = reader.unpack('<I')
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    meta_len, = reader.unpack('<I')
    try:
        metadata = json.loads(reader.take(meta_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable metadata: {e}")

    tensors: Dict[str, np.ndarray] = {}
    while not reader.done:
        name_len, = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        if name in tensors:
            raise CheckpointFormatError(f"{path}: duplicate tensor record {name!r}")
        rank, = reader.unpack('<B')
        shape = reader.unpack(f'<{rank}I')
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(4 * count), dtype='<f4').astype(np.float32)
        tensors[name] = data.reshape(shape)
    return Checkpoint(metadata, tensors, version)


def checkpoint_from_run(cfg: RunConfig, model: Model, subspace: Subspace,
                        training: Optional[Mapping[str, Any]] = None) -> Checkpoint:
    metadata = {'config': cfg.to_dict(), 'subspace': subspace.kind, 'training': dict(training or {})}
    tensors: Dict[str, np.ndarray] = {}
    for label, params in subspace.endpoint_sets().items():
        for name, p in params.items():
            tensors[f"{label}/{name}"] = p.data
    for name, value in model.buffers().items():
        tensors[f"buffer/{name}"] = value
    return Checkpoint(metadata, tensors)


def _parameters(model: Model, values: Mapping[str, np.ndarray]) -> Dict[str, Parameter]:
    specs = model.param_specs()
    missing = set(values) ^ set(specs)
    if missing:
        raise CheckpointFormatError(f"checkpoint tensors do not match the model: {sorted(missing)}")
    params = {}
    for name, value in values.items():
        shape, role = specs[name]
        if tuple(value.shape) != tuple(shape):
            raise CheckpointFormatError(f"{name}: stored shape {value.shape}, model expects {shape}")
        params[name] = Parameter(name, value, role)
    return params


def restore(checkpoint: Checkpoint) -> Tuple[RunConfig, Model, Subspace]:
    """Rebuild the run config, the model skeleton and the trained subspace."""
    cfg = RunConfig.from_dict(checkpoint.metadata['config'])
    model = build_model(cfg.model, seed=cfg.train.seed)
    kind = checkpoint.subspace_kind
    if kind == 'point':
        subspace: Subspace = PointSubspace(_parameters(model, checkpoint.group('w')))
        model.params = subspace.w
    elif kind == 'line':
        subspace = LinearSubspace(_parameters(model, checkpoint.group('w1')),
                                  _parameters(model, checkpoint.group('w2')), cfg.subspace.beta)
    elif kind == 'hybrid':
        shared = checkpoint.group('shared')
        first = dict(shared, **checkpoint.group('w1'))
        second = dict(shared, **checkpoint.group('w2'))
        p1, p2 = _parameters(model, first), _parameters(model, second)
        subspace = StructuredHybridSubspace({n: p1[n] for n in shared},
                                            {n: p for n, p in p1.items() if n not in shared},
                                            {n: p for n, p in p2.items() if n not in shared})
    else:
        raise CheckpointFormatError(f"unknown subspace kind {kind!r}")
    buffers = checkpoint.group('buffer')
    if buffers:
        model.load_buffers(buffers)
    return cfg, model, subspace
