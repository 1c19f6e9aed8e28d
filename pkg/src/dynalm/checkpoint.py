"""DYNALM1 checkpoint files.

Layout::

    DYNALM1
    <name> <dtype> <d0,d1,...> <byte offset>     one line per array
    #config
    key = value                                  run configuration snapshot
    <blank line>
    <body: arrays as little-endian float64, in manifest order>

Offsets are relative to the start of the body.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = "DYNALM1"
DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


class Checkpoint:
    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, config: Mapping[str, str] | None = None):
        self.arrays: Dict[str, np.ndarray] = {}
        self.config: Dict[str, str] = dict(config or {})
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, arr) -> None:
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid array name {name!r}")
        self.arrays[name] = np.array(arr, dtype=DTYPE, order="C")

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise CheckpointError(f"checkpoint has no array {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.arrays]
        if missing:
            raise CheckpointError(f"checkpoint is missing arrays: {', '.join(missing)}")

    def to_bytes(self) -> bytes:
        lines = [MAGIC]
        offset = 0
        for name, arr in self.arrays.items():
            shape = ",".join(str(d) for d in arr.shape) or "-"
            lines.append(f"{name} {DTYPE} {shape} {offset}")
            offset += arr.nbytes
        lines.append("#config")
        for key in sorted(self.config):
            value = str(self.config[key])
            if "\n" in value or "\n" in key:
                raise CheckpointError(f"config entry {key!r} contains a newline")
            lines.append(f"{key} = {value}")
        header = ("\n".join(lines) + "\n\n").encode("utf-8")
        return header + b"".join(arr.tobytes() for arr in self.arrays.values())

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        end = blob.find(b"\n\n")
        if end < 0 or not blob.startswith(MAGIC.encode() + b"\n"):
            raise CheckpointError(f"{source}: not a {MAGIC} checkpoint")
        header = blob[:end].decode("utf-8").split("\n")
        body = memoryview(blob)[end + 2 :]
        ckpt = cls()
        in_config = False
        expected = 0
        for line in header[1:]:
            if line == "#config":
                in_config = True
                continue
            if in_config:
                key, sep, value = line.partition(" = ")
                if not sep:
                    raise CheckpointError(f"{source}: bad config line {line!r}")
                ckpt.config[key] = value
                continue
            try:
                name, dtype, shape_s, off_s = line.split(" ")
                shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
                offset = int(off_s)
            except ValueError:
                raise CheckpointError(f"{source}: bad manifest line {line!r}") from None
            if dtype != DTYPE:
                raise CheckpointError(f"{source}: unsupported dtype {dtype!r} for {name!r}")
            if offset != expected:
                raise CheckpointError(f"{source}: manifest offset of {name!r} is {offset}, expected {expected}")
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(body):
                raise CheckpointError(f"{source}: body too short for {name!r}")
            ckpt.arrays[name] = np.frombuffer(body[offset : offset + nbytes], dtype=DTYPE).reshape(shape).copy()
            expected = offset + nbytes
        if expected != len(body):
            raise CheckpointError(f"{source}: {len(body) - expected} trailing bytes after the last array")
        return ckpt

    def save(self, path) -> Path:
        path = Path(path)
        atomic_write_bytes(path, self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), str(path))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
