"""ParamStore and its binary archive.

Layout::

    CGTK1\\n
    <count>\\n
    <name> <dtype> <ndim> <extent>...\\n     (count manifest lines)
    raw little-endian values, one block per manifest line, in order
"""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CGTK1\n"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ParamStore(OrderedDict):
    """Ordered name -> array map."""

    def __setitem__(self, name, value):
        if not isinstance(name, str) or not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid array name {name!r}")
        arr = np.asarray(value)
        if arr.dtype not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        super().__setitem__(name, arr)

    @classmethod
    def from_module(cls, module) -> "ParamStore":
        store = cls()
        for name, arr in module.state().items():
            store[name] = arr
        return store

    def manifest(self) -> list[str]:
        return [" ".join([name, _TAGS[a.dtype], str(a.ndim), *map(str, a.shape)]) for name, a in self.items()]

    def to_bytes(self) -> bytes:
        manifest = self.manifest()
        head = MAGIC + f"{len(manifest)}\n".encode() + "".join(line + "\n" for line in manifest).encode()
        blocks = [np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes() for a in self.values()]
        return head + b"".join(blocks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamStore":
        if not raw.startswith(MAGIC):
            raise FormatError("bad magic, expected CGTK1", 0)
        pos = len(MAGIC)

        def read_line() -> str:
            nonlocal pos
            end = raw.find(b"\n", pos)
            if end < 0:
                raise FormatError("truncated manifest", pos)
            line = raw[pos:end].decode("ascii", errors="replace")
            start, pos = pos, end + 1
            return line, start

        line, at = read_line()
        try:
            count = int(line)
        except ValueError:
            raise FormatError(f"bad entry count {line!r}", at) from None
        entries = []
        for _ in range(count):
            line, at = read_line()
            parts = line.split()
            try:
                name, tag, ndim = parts[0], parts[1], int(parts[2])
                shape = tuple(int(p) for p in parts[3:])
                dtype = _DTYPES[tag]
            except (IndexError, ValueError, KeyError):
                raise FormatError(f"malformed manifest line {line!r}", at) from None
            if len(shape) != ndim or any(s < 0 for s in shape):
                raise FormatError(f"manifest line {line!r}: extents do not match ndim", at)
            entries.append((name, dtype, shape))
        store = cls()
        for name, dtype, shape in entries:
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(raw):
                raise FormatError(f"truncated data block for {name}", pos)
            arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
            store[name] = arr.astype(dtype.newbyteorder("="))
            pos += nbytes
        if pos != len(raw):
            raise FormatError(f"{len(raw) - pos} trailing bytes", pos)
        return store


def checkpoint_save(store: ParamStore, path) -> None:
    Path(path).write_bytes(store.to_bytes())


def checkpoint_load(path) -> ParamStore:
    return ParamStore.from_bytes(Path(path).read_bytes())
