"""SWCK checkpoint files.

Layout (little-endian)::

    magic      4 bytes  b"SWCK"
    version    u32
    text_len   u32, then text_len bytes of UTF-8 key=value config text
    n_tensors  u32
    per tensor: name_len u32, name bytes, rank u32, dims u32[rank], f32 payload
    crc32      u32 over every preceding byte

The config text holds the run configuration plus ``step`` and
``detachable`` (parameter prefixes that may be dropped, i.e. the
pre-training heads). Optimizer moments are stored as ordinary tensors named
``opt.m/<param>`` and ``opt.v/<param>``; the optimizer step count and
hyperparameters go into the text as ``opt.*`` keys.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffops import ParamStore
from ..errors import FormatError
from .config import RunConfig, parse_pairs
from .optim import OptimState

MAGIC = b"SWCK"
VERSION = 1
_U32 = struct.Struct("<I")
_OPT_KEYS = ("lr", "beta1", "beta2", "eps", "weight_decay", "step")


@dataclass
class Checkpoint:
    config: RunConfig
    params: ParamStore
    step: int = 0
    opt: OptimState | None = None
    detachable: tuple = field(default_factory=tuple)


def _meta_text(ck: Checkpoint) -> str:
    lines = [ck.config.to_text(), f"step={ck.step}\n", f"detachable={','.join(ck.detachable)}\n"]
    if ck.opt is not None:
        lines += [f"opt.{k}={getattr(ck.opt, k)!r}\n" for k in _OPT_KEYS]
    return "".join(lines)


def _tensors(ck: Checkpoint):
    for name, t in ck.params.items():
        yield name, t.data
    if ck.opt is not None:
        for name in sorted(ck.opt.m):
            yield "opt.m/" + name, ck.opt.m[name]
            yield "opt.v/" + name, ck.opt.v[name]


def dumps(ck: Checkpoint) -> bytes:
    text = _meta_text(ck).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(text)), text]
    tensors = list(_tensors(ck))
    parts.append(_U32.pack(len(tensors)))
    for name, arr in tensors:
        if arr.dtype != np.float32:
            raise TypeError(f"checkpoint tensors are float32, {name} is {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def save_checkpoint(path, ck: Checkpoint) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ck))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes, src):
        self.raw, self.pos, self.src = raw, 0, src

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.src}: truncated while reading {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def loads(raw: bytes, src="<bytes>") -> Checkpoint:
    r = _Reader(raw, src)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{src}: bad magic {magic!r} at offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{src}: unsupported checkpoint version {version} at offset 4")
    if len(raw) < 8 + 4:
        raise FormatError(f"{src}: truncated, {len(raw)} bytes")
    stored = _U32.unpack_from(raw, len(raw) - 4)[0]
    if zlib.crc32(raw[:-4]) != stored:
        raise FormatError(f"{src}: checksum mismatch (file corrupted or truncated)")
    r.raw = raw[:-4]
    try:
        text = r.take(r.u32("config length"), "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{src}: config text is not UTF-8") from exc
    pairs = {}
    extra = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        (extra if key in ("step", "detachable") or key.startswith("opt.") else pairs)[key] = value
    cfg = RunConfig().replace(**parse_pairs("".join(f"{k}={v}\n" for k, v in pairs.items())))
    params, moments = ParamStore(), {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        dims = tuple(r.u32(f"dims of {name}") for _ in range(r.u32(f"rank of {name}")))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count, f"payload of {name}"), dtype="<f4").reshape(dims)
        arr = arr.astype(np.float32)  # native-order, writable copy
        if name.startswith("opt."):
            moments[name] = arr
        else:
            params.add(name, arr)
    if r.pos != len(r.raw):
        raise FormatError(f"{src}: {len(r.raw) - r.pos} unexpected bytes at offset {r.pos}")
    opt = None
    if "opt.step" in extra:
        opt = OptimState(**{k: (int if k == "step" else float)(extra["opt." + k]) for k in _OPT_KEYS})
        for name in params:
            if "opt.m/" + name in moments:
                opt.m[name] = moments["opt.m/" + name]
                opt.v[name] = moments["opt.v/" + name]
    detachable = tuple(p for p in extra.get("detachable", "").split(",") if p)
    return Checkpoint(cfg, params, int(extra.get("step", 0)), opt, detachable)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return loads(path.read_bytes(), path)
