"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GLYPHCKP"            magic, 8 bytes
    u32 version
    u64 payload length
    payload:
        u32 header length, header as sorted-key JSON (config, step, accuracy,
            rng state, optimizer scalars)
        u32 tensor count, then per tensor:
            u16 name length, name (utf-8), u8 ndim, u64 * ndim dims,
            float64 values in row-major order
    u32 CRC-32 of the payload

Tensors are always stored as float64, so float32 models round-trip exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .classifier import CHANNELS, ClassifierParams
from .generator import GeneratorParams
from .optim import Adam
from .trainer import Checkpoint, ModelState, TrainConfig

MAGIC = b"GLYPHCKP"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    opt = ckpt.state.optimizer
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "val_acc": ckpt.val_acc,
        "rng_state": ckpt.rng_state,
        "adam": {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blocks = []
    params = ckpt.state.params()
    for name, p in params.items():
        blocks.append(_tensor_block(name, p.data))
    for name in params:
        blocks.append(_tensor_block(f"adam.m.{name}", opt.m[name]))
        blocks.append(_tensor_block(f"adam.v.{name}", opt.v[name]))
    payload = struct.pack("<I", len(hjson)) + hjson + struct.pack("<I", len(blocks)) + b"".join(blocks)
    return _PREAMBLE.pack(MAGIC, VERSION, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREAMBLE.size:
        raise CheckpointTruncatedError(f"file is {len(buf)} bytes, shorter than the preamble")
    magic, version, length = _PREAMBLE.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    end = _PREAMBLE.size + length
    if len(buf) < end + 4:
        raise CheckpointTruncatedError(f"payload declares {length} bytes, file holds {len(buf) - _PREAMBLE.size - 4}")
    if len(buf) > end + 4:
        raise CheckpointFormatError(f"{len(buf) - end - 4} trailing bytes after checksum")
    payload = buf[_PREAMBLE.size:end]
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(payload) != crc:
        raise CheckpointChecksumError("checksum mismatch; checkpoint is corrupted")
    return _parse_payload(payload)


def _parse_payload(payload: bytes) -> Checkpoint:
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<I")
    header = json.loads(payload[pos:pos + hlen])
    pos += hlen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = payload[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
    if pos != len(payload):
        raise CheckpointFormatError("payload length does not match its contents")

    config = TrainConfig(**header["config"])
    dt = np.dtype(config.dtype)

    def param(name):
        return Tensor(arrays[name].astype(dt), requires_grad=True)

    gen = GeneratorParams(*(param(f"gen.{k}") for k in ("embedding", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")))
    blocks = range(len(CHANNELS) - 1)
    clf = ClassifierParams(
        [param(f"cls.conv{i}.kernel") for i in blocks],
        [param(f"cls.conv{i}.bias") for i in blocks],
        param("cls.head_w"),
        param("cls.head_b"),
    )
    a = header["adam"]
    state = ModelState(gen, clf, None)
    opt = Adam(state.params(), lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    opt.t = a["t"]
    for name in opt.params:
        opt.m[name] = arrays[f"adam.m.{name}"].astype(dt)
        opt.v[name] = arrays[f"adam.v.{name}"].astype(dt)
    state.optimizer = opt
    return Checkpoint(state, config, header["step"], header["val_acc"], header["rng_state"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
