"""PWLC: a block-sharded binary weight file.

Layout (all integers little-endian)::

    b"PWLC" | version: u32 | header_len: u64 | header (UTF-8 JSON) | payload

The header lists one shard per block, then one for the head (for a converter
bank: one shard per boundary). Each shard records its byte range within the
payload, a CRC-32 of those bytes and the tensors it holds. Tensors are raw
little-endian float32 (integer buffers as int64), so a single shard can be read
with one seek and one read.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .blocknet import BlockNet, BlockNetSpec
from .converter import ConverterBank

MAGIC = b"PWLC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")

_DTYPES = {torch.float32: "f4", torch.float64: "f4", torch.float16: "f4", torch.int64: "i8"}
_NP = {"f4": "<f4", "i8": "<i8"}
_TORCH = {"f4": torch.float32, "i8": torch.int64}


class CheckpointError(IOError):
    pass


class FormatError(CheckpointError):
    """Not a PWLC file, or an unsupported version."""


class IntegrityError(CheckpointError):
    """A shard's bytes are missing or do not match their checksum."""

    def __init__(self, message: str, shard: str):
        super().__init__(message)
        self.shard = shard


@dataclass(frozen=True)
class ShardInfo:
    index: int
    name: str
    offset: int  # relative to the payload start
    length: int
    crc32: int
    tensors: tuple  # of dicts: name, dtype, shape, offset (within shard), length


@dataclass(frozen=True)
class Header:
    kind: str  # "net" or "bank"
    arch: str
    role: str
    num_blocks: int
    meta: dict  # BlockNetSpec dict or bank description
    shards: tuple
    payload_offset: int

    @property
    def spec(self) -> BlockNetSpec:
        if self.kind != "net":
            raise CheckpointError("converter-bank checkpoints carry no network spec")
        return BlockNetSpec.from_dict(self.meta)

    def shard(self, index: int) -> ShardInfo:
        if not 0 <= index < len(self.shards):
            raise IndexError(f"shard index {index} outside [0, {len(self.shards)})")
        return self.shards[index]

    def shard_sizes(self) -> list[int]:
        return [s.length for s in self.shards]


def _units(obj) -> tuple[list[str], list[nn.Module]]:
    if isinstance(obj, BlockNet):
        return obj.unit_names(), [obj.unit(i) for i in range(obj.num_blocks + 1)]
    if isinstance(obj, ConverterBank):
        return [f"boundary{i + 1}" for i in range(len(obj))], list(obj.pairs)
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    code = _DTYPES.get(t.dtype)
    if code is None:
        raise TypeError(f"unsupported tensor dtype {t.dtype}")
    arr = t.detach().cpu().to(_TORCH[code]).contiguous().numpy()
    return code, arr.astype(_NP[code], copy=False).tobytes()


def save_checkpoint(obj, path) -> Header:
    """Write a BlockNet or ConverterBank; returns the header that was written."""
    names, units = _units(obj)
    shards, chunks, offset = [], [], 0
    for index, (name, unit) in enumerate(zip(names, units)):
        entries, parts, inner = [], [], 0
        for tname, tensor in unit.state_dict().items():
            code, raw = _tensor_bytes(tensor)
            entries.append({"name": tname, "dtype": code, "shape": list(tensor.shape),
                            "offset": inner, "length": len(raw)})
            parts.append(raw)
            inner += len(raw)
        blob = b"".join(parts)
        shards.append({"index": index, "name": name, "offset": offset, "length": len(blob),
                       "crc32": zlib.crc32(blob), "tensors": entries})
        chunks.append(blob)
        offset += len(blob)

    if isinstance(obj, BlockNet):
        head = {"kind": "net", "arch": obj.spec.arch, "role": obj.spec.role,
                "num_blocks": obj.num_blocks, "meta": obj.spec.to_dict()}
    else:
        head = {"kind": "bank", "arch": "", "role": "bank", "num_blocks": len(obj),
                "meta": obj.describe()}
    head["shards"] = shards
    text = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(text)))
        f.write(text)
        for blob in chunks:
            f.write(blob)
    return _parse_header(head, _PREAMBLE.size + len(text))


def _parse_header(d: dict, payload_offset: int) -> Header:
    shards = tuple(ShardInfo(s["index"], s["name"], s["offset"], s["length"], s["crc32"],
                             tuple(s["tensors"])) for s in d["shards"])
    return Header(d["kind"], d["arch"], d["role"], d["num_blocks"], d["meta"], shards,
                  payload_offset)


class CheckpointReader:
    """Ranged reads from one PWLC file; counts every byte it reads."""

    def __init__(self, path):
        self.path = Path(path)
        self.bytes_read = 0
        self._f = self.path.open("rb")
        try:
            self.header = self._read_header()
        except Exception:
            self._f.close()
            raise

    def _read(self, n: int) -> bytes:
        data = self._f.read(n)
        self.bytes_read += len(data)
        return data

    def _read_header(self) -> Header:
        pre = self._read(_PREAMBLE.size)
        if len(pre) < _PREAMBLE.size:
            raise FormatError(f"{self.path}: file too short for a PWLC preamble")
        magic, version, length = _PREAMBLE.unpack(pre)
        if magic != MAGIC:
            raise FormatError(f"{self.path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported PWLC version {version}")
        text = self._read(length)
        if len(text) < length:
            raise FormatError(f"{self.path}: header truncated")
        try:
            d = json.loads(text.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: unreadable header ({exc})") from exc
        return _parse_header(d, _PREAMBLE.size + length)

    def read_shard(self, index: int) -> dict[str, torch.Tensor]:
        info = self.header.shard(index)
        self._f.seek(self.header.payload_offset + info.offset)
        # one writable buffer per shard; tensors view into it without copying
        blob = bytearray(info.length)
        got = self._f.readinto(blob)
        self.bytes_read += got
        if got < info.length:
            raise IntegrityError(f"{self.path}: shard {info.name} truncated "
                                 f"({got} of {info.length} bytes)", info.name)
        if zlib.crc32(blob) != info.crc32:
            raise IntegrityError(f"{self.path}: checksum mismatch in shard {info.name}",
                                 info.name)
        out = {}
        for t in info.tensors:
            dtype = np.dtype(_NP[t["dtype"]])
            arr = np.frombuffer(blob, dtype=dtype, count=t["length"] // dtype.itemsize,
                                offset=t["offset"])
            out[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]))
        return out

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_header(path) -> Header:
    """Parse only the preamble and header; tensor payloads are not touched."""
    with CheckpointReader(path) as r:
        return r.header


def load_block(path, index: int) -> dict[str, torch.Tensor]:
    """State dict of one shard: block ``index`` (0-based) or the head at ``num_blocks``."""
    with CheckpointReader(path) as r:
        if not 0 <= index < len(r.header.shards):
            raise IndexError(f"block index {index} outside [0, {len(r.header.shards)}) "
                             f"for {path}")
        return r.read_shard(index)


def _install(unit: nn.Module, state: dict, name: str, assign: bool = False) -> None:
    own = unit.state_dict()
    if set(own) != set(state):
        raise CheckpointError(f"shard {name} does not match the module's parameters")
    with torch.no_grad():
        for k, v in state.items():
            if own[k].shape != v.shape:
                raise CheckpointError(f"shard {name}: tensor {k} has shape {tuple(v.shape)}, "
                                      f"expected {tuple(own[k].shape)}")
    unit.load_state_dict(state, assign=assign)


def install_shard(unit: nn.Module, state: dict, name: str = "") -> nn.Module:
    _install(unit, state, name)
    return unit


def skeleton(factory):
    """Build a module without allocating or initialising its tensors.

    Every parameter lives on the meta device until a shard is installed with
    ``assign=True``, so loading does not pay for an initialisation it discards.
    """
    with torch.device("meta"):
        return factory()


def load_checkpoint(path):
    """Rebuild the stored BlockNet (or ConverterBank) with every shard verified."""
    with CheckpointReader(path) as r:
        h = r.header
        if h.kind == "net":
            obj = skeleton(lambda: BlockNet(h.spec))
        elif h.kind == "bank":
            obj = skeleton(lambda: ConverterBank.from_description(h.meta))
        else:
            raise FormatError(f"{path}: unknown checkpoint kind {h.kind!r}")
        _, units = _units(obj)
        if len(units) != len(h.shards):
            raise FormatError(f"{path}: {len(h.shards)} shards for {len(units)} units")
        for info, unit in zip(h.shards, units):
            _install(unit, r.read_shard(info.index), info.name, assign=True)
    obj.eval()
    return obj
