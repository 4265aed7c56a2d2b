"""Binary checkpoint format.

    magic      b"XFUS"
    version    u32
    meta       u32 length + UTF-8 ``key = value`` lines (kind, modality, step)
    config     u32 length + canonical FuseConfig text
    rng        u32 length + JSON of the numpy bit-generator state
    manifest   u32 count, then per tensor: u16 name length, name, u8 ndim, ndim x u32 dims
    payload    every tensor in manifest order as little-endian f64

All integers are little-endian.  The file must end exactly after the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import FuseConfig

MAGIC = b"XFUS"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    """Tensor names or shapes do not match the model being loaded into."""


@dataclass
class Checkpoint:
    kind: str  # "autoencoder" or "fusion"
    config: FuseConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    modality: str = ""

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, a.shape) for n, a in self.params.items()]

    def to_bytes(self) -> bytes:
        meta = f"kind = {self.kind}\nmodality = {self.modality}\nstep = {int(self.step)}\n"
        parts = [MAGIC, struct.pack("<I", VERSION)]
        for text in (meta, self.config.to_text(), json.dumps(self.rng_state, sort_keys=True)):
            raw = text.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw]
        parts.append(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in self.params.values():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        reader = _Reader(buf)
        if reader.take(4) != MAGIC:
            raise CorruptCheckpointError("bad magic bytes")
        version = reader.unpack("<I")
        if version != VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
        meta_text = reader.text()
        config_text = reader.text()
        rng_text = reader.text()
        try:
            meta = dict(line.split(" = ", 1) for line in meta_text.splitlines() if line)
            config = FuseConfig.from_text(config_text)
            rng_state = json.loads(rng_text)
            kind, step = meta["kind"], int(meta["step"])
        except (ValueError, KeyError) as exc:
            raise CorruptCheckpointError(f"bad header: {exc}") from exc
        count = reader.unpack("<I")
        manifest = []
        for _ in range(count):
            name = reader.text("<H")
            ndim = reader.unpack("<B")
            dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
            manifest.append((name, dims))
        if len({n for n, _ in manifest}) != len(manifest):
            raise CorruptCheckpointError("duplicate tensor names in manifest")
        params = {}
        for name, dims in manifest:
            n = int(np.prod(dims, dtype=np.int64))
            params[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if reader.remaining():
            raise CorruptCheckpointError(f"{reader.remaining()} unexpected trailing bytes")
        return cls(kind, config, params, step, rng_state, meta.get("modality", ""))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def text(self, length_fmt: str = "<I") -> str:
        try:
            return self.take(self.unpack(length_fmt)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("header text is not UTF-8") from exc

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return Checkpoint.from_bytes(buf)


def apply_params(store, params: dict[str, np.ndarray], prefix_map: dict[str, str] | None = None,
                 strict: bool = True) -> None:
    """Copy checkpoint tensors into a ParamStore, checking names and shapes.

    ``prefix_map`` renames checkpoint prefixes (e.g. ``{"encoder.": "enc_ir."}``);
    entries whose prefix is not mapped are ignored when a map is given.
    """
    seen = set()
    for name, arr in params.items():
        target = name
        if prefix_map is not None:
            for src, dst in prefix_map.items():
                if name.startswith(src):
                    target = dst + name[len(src):]
                    break
            else:
                continue
        if target not in store:
            raise ArchitectureMismatchError(f"checkpoint tensor {name!r} has no counterpart in the model")
        p = store[target]
        if p.shape != arr.shape:
            raise ArchitectureMismatchError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.data[...] = arr
        seen.add(target)
    if strict:
        expected = {n for n in store if prefix_map is None or any(n.startswith(d) for d in prefix_map.values())}
        missing = expected - seen
        if missing:
            raise ArchitectureMismatchError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[0]!r}")
