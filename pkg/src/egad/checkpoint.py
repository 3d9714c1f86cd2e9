"""Binary container for checkpoints and prepared datasets.

Layout (all integers little-endian)::

    b"EGAD" | u32 version | u32 len + arch id (utf-8) | u32 entry count
    per entry: u32 len + name | u8 dtype tag | u32 rank | u32 dims... | raw values
    8-byte blake2b digest of every preceding byte

Preprocessing statistics ride along as entries under ``prep/``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import ModelBundle, build_model

MAGIC = b"EGAD"
VERSION = 1
DIGEST_SIZE = 8

_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
    np.dtype("bool"): 5,
}
_DTYPES = {v: k for k, v in _TAGS.items()}


def _digest(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=DIGEST_SIZE).digest()


def encode_container(arch: str, entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    a = arch.encode()
    parts += [struct.pack("<I", len(a)), a, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise TypeError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        n = name.encode()
        parts += [struct.pack("<I", len(n)), n, struct.pack("<BI", _TAGS[dt], arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    blob = b"".join(parts)
    return blob + _digest(blob)


def decode_container(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < 4 + 4 + DIGEST_SIZE or blob[:4] != MAGIC:
        raise FormatError("not an EGAD container (bad magic or truncated header)")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if _digest(body) != digest:
        raise FormatError("container digest mismatch: file is corrupted or truncated")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise FormatError(f"truncated container at byte {pos}")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"truncated container at byte {pos}")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise FormatError(f"container version {version}, this build reads {VERSION}")
    (alen,) = take("<I")
    arch = take_bytes(alen).decode()
    (count,) = take("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = take_bytes(nlen).decode()
        tag, rank = take("<BI")
        if tag not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype tag {tag}")
        dims = take(f"<{rank}I") if rank else ()
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(take_bytes(nbytes), dtype=dt).reshape(dims).copy()
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after last entry")
    return arch, entries


def write_container(path, arch: str, entries: dict[str, np.ndarray]) -> bytes:
    blob = encode_container(arch, entries)
    Path(path).write_bytes(blob)
    return blob


def read_container(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())


def json_entry(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def from_json_entry(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


@dataclass
class Checkpoint:
    arch: str
    bundle: ModelBundle
    config: dict = field(default_factory=dict)
    prep: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    log: list[tuple[float, float]] = field(default_factory=list)
    version: int = VERSION

    def scoring_bundle(self, use_ema: bool = True) -> ModelBundle:
        """The bundle to score with; EMA weights unless told otherwise."""
        return self.bundle.ema_copy() if use_ema else self.bundle

    def to_entries(self) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        for net_name, net in self.bundle.networks().items():
            for name, p in net.store.params.items():
                entries[f"raw/{net_name}/{name}"] = p.data
                entries[f"ema/{net_name}/{name}"] = p.ema
            for name, buf in net.store.buffers.items():
                entries[f"buf/{net_name}/{name}"] = buf
        for name, arr in self.prep.items():
            entries[f"prep/{name}"] = arr
        entries["meta/config"] = json_entry(self.config)
        entries["meta/epoch"] = np.asarray(self.epoch, dtype=np.int64)
        entries["meta/log"] = np.asarray(self.log, dtype=np.float64).reshape(-1, 2)
        return entries

    @classmethod
    def from_entries(cls, arch: str, entries: dict[str, np.ndarray]) -> "Checkpoint":
        dtype = next(v.dtype for k, v in entries.items() if k.startswith("raw/"))
        bundle = build_model(arch, dtype=dtype)
        for net_name, net in bundle.networks().items():
            for name, p in net.store.params.items():
                try:
                    p.data = entries[f"raw/{net_name}/{name}"]
                    p.ema = entries[f"ema/{net_name}/{name}"]
                except KeyError as exc:
                    raise FormatError(f"checkpoint lacks parameter {exc.args[0]}") from None
                if p.data.shape != p.ema.shape:
                    raise FormatError(f"{net_name}/{name}: raw and EMA shapes differ")
            for name in net.store.buffers:
                net.store.buffers[name] = entries[f"buf/{net_name}/{name}"]
        prep = {k[5:]: v for k, v in entries.items() if k.startswith("prep/")}
        log = [tuple(r) for r in entries["meta/log"].tolist()]
        return cls(arch, bundle, from_json_entry(entries["meta/config"]), prep,
                   int(entries["meta/epoch"]), log)


def save_checkpoint(ckpt: Checkpoint, path) -> bytes:
    return write_container(path, ckpt.arch, ckpt.to_entries())


def load_checkpoint(path) -> Checkpoint:
    arch, entries = read_container(path)
    return Checkpoint.from_entries(arch, entries)
