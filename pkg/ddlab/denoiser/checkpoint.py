"""
Versioned binary checkpoint container for models and adapters.

Layout:
    b"DDLAB1" | uint64 LE header length | JSON header | float64 LE blocks

The JSON header is canonical (sorted keys, compact) and lists every block
name and shape in storage order, so equal weights give equal bytes.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from ddlab.denoiser.lora import LoraAdapter
from ddlab.denoiser.network import Architecture, DenoiserModel, Role
from ddlab.errors import CheckpointFormatError, MissingCheckpoint

logger = logging.getLogger(__name__)

MAGIC = b"DDLAB1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


class BlockSpec(BaseModel):
    name: str
    shape: List[int]


class LoraSpec(BaseModel):
    rank: int
    scale: float
    targets: List[int]


class CheckpointHeader(BaseModel):
    """Everything needed to rebuild the stored object except the numbers."""
    format_version: int = FORMAT_VERSION
    role: Role
    architecture: Dict[str, Any]
    schedule_id: str
    training: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    method: Optional[str] = None
    lora: Optional[LoraSpec] = None
    meta: Dict[str, Any] = Field(default_factory=dict)
    blocks: List[BlockSpec]


def _pack(header: CheckpointHeader, arrays: List[np.ndarray]) -> bytes:
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _LENGTH.pack(len(header_bytes)), header_bytes]
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack(content: bytes) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    if not content.startswith(MAGIC):
        raise CheckpointFormatError(f"Bad magic {content[:len(MAGIC)]!r}, expected {MAGIC!r}")
    offset = len(MAGIC)
    if len(content) < offset + _LENGTH.size:
        raise CheckpointFormatError("Checkpoint truncated before header length")
    (header_len,) = _LENGTH.unpack_from(content, offset)
    offset += _LENGTH.size
    if len(content) < offset + header_len:
        raise CheckpointFormatError("Checkpoint truncated inside header")
    try:
        header = CheckpointHeader.model_validate(json.loads(content[offset:offset + header_len]))
    except (json.JSONDecodeError, UnicodeDecodeError, ValidationError) as e:
        raise CheckpointFormatError(f"Invalid checkpoint header: {e}")
    if header.format_version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {header.format_version}")
    offset += header_len

    blocks: Dict[str, np.ndarray] = {}
    for spec in header.blocks:
        count = int(np.prod(spec.shape)) if spec.shape else 1
        n_bytes = 8 * count
        if len(content) < offset + n_bytes:
            raise CheckpointFormatError(f"Checkpoint truncated in block {spec.name}")
        blocks[spec.name] = np.frombuffer(content, dtype="<f8", count=count, offset=offset) \
            .astype(np.float64).reshape(spec.shape)
        offset += n_bytes
    if offset != len(content):
        raise CheckpointFormatError(f"{len(content) - offset} trailing bytes after last block")
    return header, blocks


def encode_model(
    model: DenoiserModel,
    training: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    method: Optional[str] = None,
) -> bytes:
    """Serialize a base or distilled model, its alpha_bar table included."""
    names = list(model.arch.param_shapes())
    arrays = [model.params[name] for name in names] + [model.alpha_bar]
    blocks = [BlockSpec(name=name, shape=list(arr.shape)) for name, arr in zip(names + ["alpha_bar"], arrays)]
    header = CheckpointHeader(
        role=model.role,
        architecture=model.arch.to_dict(),
        schedule_id=model.schedule_id,
        training=training or {},
        seed=seed,
        method=method,
        meta=model.meta,
        blocks=blocks,
    )
    return _pack(header, arrays)


def decode_model(content: bytes) -> Tuple[DenoiserModel, CheckpointHeader]:
    header, blocks = _unpack(content)
    if header.role == Role.LORA:
        raise CheckpointFormatError("Checkpoint holds an adapter, not a model")
    try:
        arch = Architecture(**header.architecture)
    except (TypeError, ValueError) as e:
        raise CheckpointFormatError(f"Invalid architecture in checkpoint: {e}")
    expected = arch.param_shapes()
    for name, shape in expected.items():
        if name not in blocks or blocks[name].shape != shape:
            raise CheckpointFormatError(f"Block {name} missing or not of shape {shape}")
    if "alpha_bar" not in blocks:
        raise CheckpointFormatError("Checkpoint has no alpha_bar table")
    model = DenoiserModel(
        arch=arch,
        params={name: blocks[name] for name in expected},
        alpha_bar=blocks["alpha_bar"],
        schedule_id=header.schedule_id,
        role=header.role,
        meta=dict(header.meta),
    )
    return model, header


def encode_adapter(adapter: LoraAdapter, model: DenoiserModel, training: Optional[Dict[str, Any]] = None,
                   seed: Optional[int] = None) -> bytes:
    """Serialize an adapter together with the architecture it was trained for."""
    named = adapter.params()
    header = CheckpointHeader(
        role=Role.LORA,
        architecture=model.arch.to_dict(),
        schedule_id=model.schedule_id,
        training=training or {},
        seed=seed,
        lora=LoraSpec(rank=adapter.rank, scale=adapter.scale, targets=list(adapter.targets)),
        meta=adapter.meta,
        blocks=[BlockSpec(name=name, shape=list(arr.shape)) for name, arr in named.items()],
    )
    return _pack(header, list(named.values()))


def decode_adapter(content: bytes) -> Tuple[LoraAdapter, CheckpointHeader]:
    header, blocks = _unpack(content)
    if header.role != Role.LORA or header.lora is None:
        raise CheckpointFormatError(f"Checkpoint role is {header.role.value}, expected lora")
    targets = tuple(header.lora.targets)
    try:
        down = {i: blocks[f"down{i}"] for i in targets}
        up = {i: blocks[f"up{i}"] for i in targets}
    except KeyError as e:
        raise CheckpointFormatError(f"Adapter block {e} missing")
    adapter = LoraAdapter(rank=header.lora.rank, scale=header.lora.scale, targets=targets,
                          down=down, up=up, meta=dict(header.meta))
    return adapter, header


def _read(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"Checkpoint not found: {path}")
    return path.read_bytes()


def load_model(path: Path) -> Tuple[DenoiserModel, CheckpointHeader]:
    model, header = decode_model(_read(path))
    logger.info(f"Loaded {header.role.value} model from {path}")
    return model, header


def load_adapter(path: Path) -> Tuple[LoraAdapter, CheckpointHeader]:
    adapter, header = decode_adapter(_read(path))
    logger.info(f"Loaded rank-{adapter.rank} adapter from {path}")
    return adapter, header
