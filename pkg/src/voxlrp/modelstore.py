"""Bit-exact binary serialization of model configuration and parameters.

File layout (all integers little-endian, payloads row-major float64):

    offset 0    8 bytes   magic "NNLRP001"
    offset 8    4 bytes   u32 format version (currently 1)
    offset 12   4 bytes   u32 flags (bit 0: optimizer state present)
    offset 16   4 bytes   u32 length C of the config text
    offset 20   C bytes   model config text (UTF-8, the config grammar)
    then        4 bytes   u32 number of parameter blocks
    per block   2 bytes   u16 name length L
                L bytes   tensor name, "<layer-index>.<tensor-name>"
                1 byte    u8 number of axes
                4/axis    u32 extents
                8/value   float64 payload
    if flag     8 bytes   u64 Adam timestep
    bit 0 set   4 bytes   u32 number of moment blocks
                ...       blocks as above, names suffixed ".m" / ".v"
    trailer     4 bytes   u32 CRC-32 (zlib) of every preceding byte

Saving the same model twice yields byte-identical files.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ModelFileError
from .layers import ModelConfig, ParamSet, check_params, format_model_config, parse_model_config
from .trainer import AdamState

MAGIC = b"NNLRP001"
VERSION = 1
_FLAG_OPTIMIZER = 1


def _pack_block(name: str, arr: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("utf-8")
    parts = [struct.pack("<H", len(name_b)), name_b, struct.pack("<B", payload.ndim)]
    parts.append(struct.pack(f"<{payload.ndim}I", *payload.shape))
    parts.append(payload.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFileError("truncated", f"needed {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_block(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u16()).decode("utf-8")
    ndim = r.u8()
    shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
    return name, np.ascontiguousarray(data, dtype=np.float64)


def save_model(
    config: ModelConfig,
    params: ParamSet,
    path: str | Path,
    adam_state: AdamState | None = None,
) -> None:
    """Write config + parameters (and optionally optimizer state) with a CRC trailer."""
    check_params(config, params)
    config_text = format_model_config(config).encode("utf-8")
    flags = _FLAG_OPTIMIZER if adam_state is not None else 0
    parts = [MAGIC, struct.pack("<II", VERSION, flags), struct.pack("<I", len(config_text)), config_text]
    blocks = list(params.named_tensors())
    parts.append(struct.pack("<I", len(blocks)))
    parts.extend(_pack_block(name, arr) for name, arr in blocks)
    if adam_state is not None:
        parts.append(struct.pack("<Q", adam_state.t))
        moment_blocks = [(f"{k}.m", v) for k, v in adam_state.m.items()]
        moment_blocks += [(f"{k}.v", v) for k, v in adam_state.v.items()]
        parts.append(struct.pack("<I", len(moment_blocks)))
        parts.extend(_pack_block(name, arr) for name, arr in moment_blocks)
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path: str | Path) -> tuple[ModelConfig, ParamSet, AdamState | None]:
    """Read a model file back; every loaded tensor is bit-identical to what was saved."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 4:
        raise ModelFileError("truncated", f"file is only {len(raw)} bytes")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFileError("checksum", "CRC-32 mismatch; file is corrupted")
    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise ModelFileError("magic", f"not a model file (expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise ModelFileError("version", f"unsupported format version {version}")
    flags = r.u32()
    config_text = r.take(r.u32()).decode("utf-8")
    config = parse_model_config(config_text)
    n_blocks = r.u32()
    tensors = dict(_read_block(r) for _ in range(n_blocks))
    param_layers: list[dict[str, np.ndarray]] = [dict() for _ in config.layers]
    for key, arr in tensors.items():
        idx, _, name = key.partition(".")
        try:
            param_layers[int(idx)][name] = arr
        except (ValueError, IndexError):
            raise ModelFileError("shape", f"block {key!r} does not address a layer") from None
    params = ParamSet(param_layers)
    try:
        check_params(config, params)
    except Exception as exc:
        raise ModelFileError("shape", str(exc)) from None
    state = None
    if flags & _FLAG_OPTIMIZER:
        state = AdamState(params)
        state.t = r.u64()
        n_moments = r.u32()
        moments = dict(_read_block(r) for _ in range(n_moments))
        for key in state.m:
            try:
                state.m[key] = moments[f"{key}.m"]
                state.v[key] = moments[f"{key}.v"]
            except KeyError as exc:
                raise ModelFileError("shape", f"missing optimizer block {exc}") from None
    if r.pos != len(body):
        raise ModelFileError("truncated", f"{len(body) - r.pos} unexpected trailing bytes")
    return config, params, state
