"""Checkpoint container: text header plus raw little-endian float64 payload.

Layout::

    format_version 1
    module <name>
    param <name> <shape, comma separated> <byte offset>
    ...
    meta <key> <value>
    ...
    end
    <payload bytes>

Offsets are relative to the first payload byte.  Parameters are stored in
manifest order with no gaps, so the manifest covers the payload exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import ClassStats, UnseenDistribution
from .errors import ConfigError, DependencyError

CHECKPOINT_FORMAT_VERSION = 1
_END = b"end\n"


@dataclass
class Checkpoint:
    module: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        lines = [f"format_version {CHECKPOINT_FORMAT_VERSION}", f"module {self.module}"]
        chunks, offset = [], 0
        for name, arr in self.arrays.items():
            if any(ch.isspace() for ch in name):
                raise ConfigError(f"parameter name {name!r} contains whitespace")
            arr = np.asarray(arr, dtype=np.float64)
            shape = ",".join(str(s) for s in arr.shape) or "-"
            lines.append(f"param {name} {shape} {offset}")
            blob = arr.astype("<f8").tobytes()
            chunks.append(blob)
            offset += len(blob)
        for key, value in self.meta.items():
            if any(ch.isspace() for ch in key) or "\n" in str(value):
                raise ConfigError(f"meta entry {key!r} must be a single token with a one-line value")
            lines.append(f"meta {key} {value}")
        header = ("\n".join(lines) + "\n").encode("utf-8") + _END
        return header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        pos = raw.find(b"\n" + _END)
        if pos < 0:
            raise ConfigError(f"{source}: checkpoint header has no end marker")
        head = raw[:pos + 1].decode("utf-8").splitlines()
        payload = raw[pos + 1 + len(_END):]
        if not head or head[0] != f"format_version {CHECKPOINT_FORMAT_VERSION}":
            raise ConfigError(f"{source}: unsupported checkpoint format ({head[0] if head else 'empty'})")
        module, manifest, meta = None, [], {}
        for line in head[1:]:
            kind, _, rest = line.partition(" ")
            if kind == "module":
                module = rest
            elif kind == "param":
                name, shape, offset = rest.split(" ")
                dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
                manifest.append((name, dims, int(offset)))
            elif kind == "meta":
                key, _, value = rest.partition(" ")
                meta[key] = value
            else:
                raise ConfigError(f"{source}: unknown header line {line!r}")
        arrays, expected = {}, 0
        for name, dims, offset in manifest:
            if offset != expected:
                raise ConfigError(f"{source}: parameter {name} starts at {offset}, expected {expected}")
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(dims)
            expected = offset + nbytes
        if expected != len(payload):
            raise ConfigError(f"{source}: manifest covers {expected} bytes but payload has {len(payload)}")
        return cls(module or "", arrays, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write the container and return the sha256 of its bytes."""
    data = ckpt.to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, module: str | None = None) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise DependencyError(f"checkpoint {p} does not exist")
    ckpt = Checkpoint.from_bytes(p.read_bytes(), str(p))
    if module is not None and ckpt.module != module:
        raise ConfigError(f"{p}: expected a {module!r} checkpoint, found {ckpt.module!r}")
    return ckpt


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model and stats adapters


def params_checkpoint(module: str, params: dict, **meta) -> Checkpoint:
    return Checkpoint(module, {k: p.data for k, p in params.items()}, {k: str(v) for k, v in meta.items()})


def restore_params(params: dict, ckpt: Checkpoint) -> None:
    if set(params) != set(ckpt.arrays):
        raise ConfigError(f"checkpoint parameters {sorted(ckpt.arrays)} do not match model {sorted(params)}")
    for k, p in params.items():
        if p.data.shape != ckpt.arrays[k].shape:
            raise ConfigError(f"parameter {k}: checkpoint shape {ckpt.arrays[k].shape} != model {p.data.shape}")
        p.data[...] = ckpt.arrays[k]


def bank_checkpoint(module: str, records) -> Checkpoint:
    """One record per class: id, n_y, mean, variance, provenance.

    ``UnseenDistribution`` records additionally keep their log-variance and
    neighbour ids so that reloading is exact.
    """
    ck = Checkpoint(module)
    ids = []
    for rec in records:
        c = int(rec.class_id)
        ids.append(str(c))
        ck.arrays[f"class.{c}.mean"] = rec.mean
        if isinstance(rec, UnseenDistribution):
            ck.arrays[f"class.{c}.var"] = rec.var
            ck.arrays[f"class.{c}.log_var"] = rec.log_var
            ck.meta[f"class.{c}.n_y"] = "0"
            ck.meta[f"class.{c}.neighbors"] = ",".join(str(n) for n in rec.neighbors) or "-"
        else:
            ck.arrays[f"class.{c}.var"] = rec.var
            ck.meta[f"class.{c}.n_y"] = str(int(rec.count))
        ck.meta[f"class.{c}.provenance"] = rec.provenance
    ck.meta["classes"] = ",".join(ids) or "-"
    return ck


def bank_from_checkpoint(ck: Checkpoint) -> dict:
    out = {}
    ids = [] if ck.meta.get("classes", "-") == "-" else [int(c) for c in ck.meta["classes"].split(",")]
    for c in ids:
        mean, var = ck.arrays[f"class.{c}.mean"], ck.arrays[f"class.{c}.var"]
        prov = ck.meta[f"class.{c}.provenance"]
        if f"class.{c}.log_var" in ck.arrays:
            raw = ck.meta.get(f"class.{c}.neighbors", "-")
            neighbors = () if raw == "-" else tuple(int(n) for n in raw.split(","))
            out[c] = UnseenDistribution(c, mean, ck.arrays[f"class.{c}.log_var"], prov, neighbors)
        else:
            out[c] = ClassStats(c, mean, var, int(ck.meta[f"class.{c}.n_y"]), prov)
    return out
