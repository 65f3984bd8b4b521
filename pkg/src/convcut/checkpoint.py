"""CCUT checkpoint format.

Layout (all integers u32 little-endian)::

    b"CCUT"  version=1  entry_count
    per entry, in sorted-name order:
        name_len  name (UTF-8)  rank  dims[rank]  data (f32 little-endian, row-major)

There is no padding, compression or trailing data.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import LoadError
from .nn import Module

MAGIC = b"CCUT"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)      # in the model, absent from the file
    unexpected: list[str] = field(default_factory=list)   # in the file, absent from the model
    mismatched: list[str] = field(default_factory=list)   # present in both with different shapes

    @property
    def clean(self) -> bool:
        return not (self.missing or self.unexpected or self.mismatched)


def _arrays(source: Module | Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    items = source.named_parameters() if isinstance(source, Module) else source.items()
    return {name: np.asarray(getattr(v, "data", v)) for name, v in items}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes, path: str = "<bytes>") -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise LoadError(f"{path}: truncated file while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    if take(4, "magic") != MAGIC:
        raise LoadError(f"{path}: bad magic, not a CCUT checkpoint")
    version = u32("version")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(u32("entry count")):
        try:
            name = take(u32(f"entry {i} name length"), f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError(f"{path}: entry {i} name is not valid UTF-8") from exc
        dims = tuple(u32(f"{name} dims") for _ in range(u32(f"{name} rank")))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * count, f"{name} data"), dtype="<f4").reshape(dims)
        if name in out:
            raise LoadError(f"{path}: duplicate entry {name!r}")
        out[name] = data.astype(np.float32)
    if pos != len(buf):
        raise LoadError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return out


def save_checkpoint(source: Module | Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    """Write a model's parameters (or a name -> array mapping) to ``path``."""
    data = encode(_arrays(source))
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write checkpoint {path}: {exc.strerror}") from exc


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read ({exc.strerror})") from exc
    return decode(buf, str(path))


def load_checkpoint(path: str | os.PathLike, model: Module, strict: bool = True) -> LoadReport:
    """Copy matching entries of the checkpoint at ``path`` into ``model``.

    In strict mode any missing, unexpected or mis-shaped entry raises
    :class:`LoadError` and the model is left untouched. Lenient mode copies
    what matches and reports the rest.
    """
    entries = read_checkpoint(path)
    params = dict(model.named_parameters())
    report = LoadReport()
    for name in sorted(params):
        if name not in entries:
            report.missing.append(name)
        elif entries[name].shape != params[name].shape:
            report.mismatched.append(name)
        else:
            report.loaded.append(name)
    report.unexpected = sorted(set(entries) - set(params))
    if strict and not report.clean:
        problems = (
            [f"missing {n!r}" for n in report.missing]
            + [f"unexpected {n!r}" for n in report.unexpected]
            + [
                f"shape mismatch for {n!r}: file {entries[n].shape}, model {params[n].shape}"
                for n in report.mismatched
            ]
        )
        raise LoadError(f"{path}: " + "; ".join(problems))
    for name in report.loaded:
        params[name].data = entries[name].copy()
    return report
