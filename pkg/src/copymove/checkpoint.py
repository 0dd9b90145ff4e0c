"""Self-describing checkpoint files.

A checkpoint is one binary file holding the named parameter arrays, the full
model config as a plain-text block, and the training step, protected by a
CRC32 of everything that precedes it.  Byte layout (all integers little
endian, arrays C-order):

    offset 0   magic            8 bytes, b"CMCKPT01"
    offset 8   format_version   u32
    offset 12  training_step    u64
    offset 20  config_len       u32, then config_len bytes of UTF-8
               (the flat key=value model config text)
               n_arrays         u32
               per array:
                   name_len     u16, then name_len bytes of UTF-8
                   dtype_code   u8  (0 = float32, 1 = float64)
                   ndim         u8
                   shape        ndim x u64
                   data         raw bytes
    trailer    crc32            u32 over every preceding byte

Loading verifies the magic, the checksum, and the version, then checks that
the stored array names and shapes match a model freshly built from the
stored config, so a truncated, corrupted, or mismatched file always fails
loudly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, model_config_from_text, model_config_to_text
from .errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError

MAGIC = b"CMCKPT01"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class Checkpoint:
    params: dict
    config: ModelConfig
    training_step: int = 0
    format_version: int = FORMAT_VERSION


def _as_array(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    return arr


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.format_version),
             struct.pack("<Q", ckpt.training_step)]
    config_bytes = model_config_to_text(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<I", len(config_bytes)))
    parts.append(config_bytes)
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        arr = _as_array(value)
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointIntegrityError(f"truncated checkpoint {self.path}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, stored_crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != stored_crc:
        raise CheckpointIntegrityError(f"checksum mismatch in {path}")
    r = _Reader(body, path)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}")
    (training_step,) = r.unpack("<Q")
    (config_len,) = r.unpack("<I")
    try:
        config = model_config_from_text(r.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"bad config block in {path}: {exc}") from exc
    (n_arrays,) = r.unpack("<I")
    params = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} in {path}")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dtype.itemsize)
        params[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{path} has {len(body) - r.pos} trailing bytes")
    return Checkpoint(params=params, config=config, training_step=training_step,
                      format_version=version)


def _expected_shapes(config: ModelConfig):
    from .model import build_model
    return {name: tuple(p.shape) for name, p in build_model(config).state_dict().items()}


def _validate_against_config(ckpt: Checkpoint, path) -> None:
    expected = _expected_shapes(ckpt.config)
    stored = {name: arr.shape for name, arr in ckpt.params.items()}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(
            f"{path} parameter names disagree with its config "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, shape in stored.items():
        if shape != expected[name]:
            raise CheckpointError(
                f"{path} array {name!r} has shape {shape}, config implies {expected[name]}")


def save_checkpoint(params, config: ModelConfig, path, training_step=0) -> None:
    """Write a checkpoint; ``params`` maps names to arrays or tensors."""
    ckpt = Checkpoint(params={k: _as_array(v) for k, v in params.items()},
                      config=config, training_step=training_step)
    data = serialize_checkpoint(ckpt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, validate=True) -> Checkpoint:
    """Read a checkpoint back; raises on any corruption or mismatch."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = deserialize_checkpoint(data, path=str(path))
    if validate:
        _validate_against_config(ckpt, path)
    return ckpt


def checkpoint_from_model(model, training_step=0) -> Checkpoint:
    params = {name: tensor.detach().cpu().numpy().copy()
              for name, tensor in model.state_dict().items()}
    return Checkpoint(params=params, config=model.config, training_step=training_step)


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32, debug=False):
    from .model import build_model
    model = build_model(ckpt.config, dtype=dtype, debug=debug)
    state = {name: torch.as_tensor(arr).to(dtype) for name, arr in ckpt.params.items()}
    model.load_state_dict(state, strict=True)
    return model
