"""Checkpoint files, encoder-only weight transfer, and freeze policies.

File layout (all integers little-endian)::

    b"EHCK" | version u32 | body length u64 | body | crc64 u64

``body`` holds a length-prefixed UTF-8 JSON metadata block followed by the
tensor table: count u32, then per tensor ``name_len u16, name, ndim u8,
dims u64 * ndim`` and its float64 payload in row-major order.  The trailing
checksum is CRC-64/XZ over ``body``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .models import DepressionModel, PretrainModel, parameter_census
from .nn import Module

MAGIC = b"EHCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TransferError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones)
# ---------------------------------------------------------------------------

_POLY = 0xC96C5795D7870F42


def _crc_table() -> list[int]:
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _POLY if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    tab = _TABLE
    for b in data:
        crc = tab[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_model(cls, model: Module, **metadata) -> "Checkpoint":
        tensors = OrderedDict((name, np.array(p.data, dtype=np.float64))
                              for name, p in model.parameters().items())
        meta = {"model_kind": getattr(model, "kind", type(model).__name__)}
        config = getattr(model, "config", None)
        if config is not None:
            meta["model_config"] = config.to_dict()
            meta["task"] = meta["model_config"]["task"]
        meta.update(metadata)
        return cls(meta, tensors)

    def to_bytes(self) -> bytes:
        parts = []
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(meta)))
        parts.append(meta)
        parts.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            parts.append(struct.pack("<HB", len(raw), arr.ndim))
            parts.append(raw)
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        body = b"".join(parts)
        return _HEAD.pack(MAGIC, VERSION, len(body)) + body + struct.pack("<Q", crc64(body))

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(blob) < _HEAD.size:
            raise TruncatedError(f"{source}: file shorter than the header")
        magic, version, n = _HEAD.unpack_from(blob)
        if magic != MAGIC:
            raise BadMagicError(f"{source}: bad magic {magic!r}")
        if version != VERSION:
            raise VersionError(f"{source}: format version {version}, this build reads {VERSION}")
        if len(blob) < _HEAD.size + n + 8:
            raise TruncatedError(f"{source}: {len(blob)} bytes, expected {_HEAD.size + n + 8}")
        body = blob[_HEAD.size:_HEAD.size + n]
        (stored,) = struct.unpack_from("<Q", blob, _HEAD.size + n)
        if crc64(body) != stored:
            raise ChecksumError(f"{source}: checksum mismatch")
        off = 0
        (mlen,) = struct.unpack_from("<I", body, off)
        off += 4
        metadata = json.loads(body[off:off + mlen].decode("utf-8"))
        off += mlen
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", body, off)
            off += 3
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if name in tensors:
                raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
            off += size
        return cls(metadata, tensors)


def save_checkpoint(obj, path, **metadata) -> Checkpoint:
    """Write a model (or a ready :class:`Checkpoint`) to ``path`` atomically."""
    ckpt = obj if isinstance(obj, Checkpoint) else Checkpoint.from_model(obj, **metadata)
    if isinstance(obj, Checkpoint) and metadata:
        ckpt = Checkpoint({**obj.metadata, **metadata}, obj.tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), str(path))


def load_into(model: Module, ckpt: Checkpoint, strict: bool = True) -> None:
    """Copy every checkpoint tensor into the same-named parameter."""
    params = model.parameters()
    if strict and set(params) != set(ckpt.tensors):
        missing = sorted(set(params) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(params))
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in ckpt.tensors.items():
        if name not in params:
            continue
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.dtype)


def build_model(ckpt: Checkpoint, dtype=np.float64) -> Module:
    """Reconstruct the model a checkpoint was saved from."""
    from .models import ModelConfig

    config = ModelConfig.from_dict(ckpt.metadata["model_config"])
    cls = {"asr_pretrain": PretrainModel, "depression": DepressionModel}[ckpt.metadata["model_kind"]]
    model = cls(config, seed=0, dtype=dtype)
    load_into(model, ckpt)
    return model


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


@dataclass
class TransferReport:
    prefix: str
    copied: list[str]
    shapes: dict[str, tuple[int, ...]]


def transfer_encoder(source: Checkpoint, destination: Module, prefix: str = "encoder.") -> TransferReport:
    """Copy all and only ``prefix`` tensors from ``source`` into ``destination``.

    Every shape is checked before anything is written, so a failed transfer
    leaves the destination untouched.
    """
    dest = destination.parameters()
    for bad in ("decoder.", "ctc_head."):
        if any(n.startswith(bad) for n in dest):
            raise TransferError(f"destination model carries {bad!r} parameters; ASR parts do not belong downstream")
    src = OrderedDict((n, a) for n, a in source.tensors.items() if n.startswith(prefix))
    if not src:
        raise TransferError(f"source checkpoint has no {prefix!r} tensors")
    want = [n for n in dest if n.startswith(prefix)]
    if set(want) != set(src):
        raise TransferError(f"{prefix} names differ: missing {sorted(set(want) - set(src))[:3]}, "
                            f"unexpected {sorted(set(src) - set(want))[:3]}")
    for name, arr in src.items():
        if dest[name].shape != arr.shape:
            raise TransferError(f"{name}: source shape {arr.shape} vs destination {dest[name].shape}")
    for name, arr in src.items():
        dest[name].data = arr.astype(dest[name].dtype)
    return TransferReport(prefix, list(src), {n: tuple(a.shape) for n, a in src.items()})


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------


class FreezePolicy(str, Enum):
    TL1 = "tl1"                          # pretraining: update encoder and decoder
    TL2 = "tl2"                          # pretraining: decoder and CTC projection frozen
    FINETUNE_ENCODER = "finetune_encoder"
    FREEZE_ENCODER = "freeze_encoder"


_FROZEN = {
    FreezePolicy.TL1: (),
    FreezePolicy.TL2: ("decoder.", "ctc_head."),
    FreezePolicy.FINETUNE_ENCODER: (),
    FreezePolicy.FREEZE_ENCODER: ("encoder.",),
}
_VALID_FOR = {
    FreezePolicy.TL1: "asr_pretrain",
    FreezePolicy.TL2: "asr_pretrain",
    FreezePolicy.FINETUNE_ENCODER: "depression",
    FreezePolicy.FREEZE_ENCODER: "depression",
}


def freeze_prefixes(model: Module, prefixes) -> list[str]:
    """Mark every parameter under ``prefixes`` frozen and all others trainable."""
    params = model.parameters()
    for pre in prefixes:
        if not any(n.startswith(pre) for n in params):
            raise ValueError(f"freeze prefix {pre!r} matches no parameter")
    frozen = []
    for name, p in params.items():
        hit = any(name.startswith(pre) for pre in prefixes)
        p.trainable = not hit
        if hit:
            frozen.append(name)
    return frozen


def apply_freeze(model: Module, policy) -> list[str]:
    policy = FreezePolicy(policy)
    kind = getattr(model, "kind", None)
    if _VALID_FOR[policy] != kind:
        raise ValueError(f"policy {policy.value} does not apply to a {kind} model")
    return freeze_prefixes(model, _FROZEN[policy])


__all__ = [
    "Checkpoint", "CheckpointError", "BadMagicError", "VersionError", "TruncatedError",
    "ChecksumError", "TransferError", "TransferReport", "FreezePolicy", "crc64",
    "save_checkpoint", "load_checkpoint", "load_into", "build_model", "transfer_encoder",
    "freeze_prefixes", "apply_freeze", "parameter_census",
]
