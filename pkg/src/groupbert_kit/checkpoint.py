"""Checkpoint files: a line-oriented text header followed by raw little-endian float32 data.

Layout::

    groupbert-kit-checkpoint 1
    config <model config as one-line JSON>
    extra <one-line JSON object>                      (optional)
    param <name> f32le <d0>x<d1>x... <offset> <nbytes>  (one per tensor, creation order)
    end-header
    <binary section>

``offset`` counts bytes from the first byte after the ``end-header`` line.
Names never contain whitespace. Lines end with a single ``\\n``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io_utils import atomic_write
from .model import Model, ModelConfig, parameter_specs
from .tensor import PRECISIONS, Tensor, default_dtype

MAGIC = "groupbert-kit-checkpoint 1"
END = "end-header"


class CheckpointError(ValueError):
    pass


@dataclass
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int


@dataclass
class Header:
    config: ModelConfig
    params: list[ParamEntry]
    extra: dict = field(default_factory=dict)
    data_start: int = 0


def encode(model: Model, extra: dict | None = None) -> bytes:
    lines = [MAGIC, "config " + json.dumps(model.config.to_dict(), sort_keys=True)]
    if extra:
        lines.append("extra " + json.dumps(extra, sort_keys=True))
    chunks = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        shape = "x".join(str(n) for n in p.shape)
        lines.append(f"param {name} f32le {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append(END)
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)


def save_checkpoint(model: Model, path: Path | str, extra: dict | None = None) -> Path:
    return atomic_write(path, encode(model, extra))


def read_header(blob: bytes) -> Header:
    end = blob.find(("\n" + END + "\n").encode())
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError("not a groupbert-kit checkpoint (bad magic or missing end-header)")
    text = blob[:end].decode("utf-8")
    config, extra, params = None, {}, []
    for lineno, line in enumerate(text.split("\n")[1:], 2):
        key, _, rest = line.partition(" ")
        if key == "config":
            config = ModelConfig.from_dict(json.loads(rest))
        elif key == "extra":
            extra = json.loads(rest)
        elif key == "param":
            parts = rest.split(" ")
            if len(parts) != 5 or parts[1] != "f32le":
                raise CheckpointError(f"header line {lineno}: malformed param entry {line!r}")
            shape = tuple(int(n) for n in parts[2].split("x"))
            params.append(ParamEntry(parts[0], shape, int(parts[3]), int(parts[4])))
        else:
            raise CheckpointError(f"header line {lineno}: unknown record {key!r}")
    if config is None:
        raise CheckpointError("checkpoint header has no config record")
    return Header(config, params, extra, end + len(END) + 2)


def load_checkpoint(path: Path | str, precision: str | None = None) -> tuple[Model, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, extra)``."""
    blob = Path(path).read_bytes()
    header = read_header(blob)
    expected = {name: shape for name, shape, _ in parameter_specs(header.config)}
    found = {e.name: e.shape for e in header.params}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        surplus = sorted(set(found) - set(expected))
        wrong = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        raise CheckpointError(f"parameter manifest does not match config: missing={missing[:5]} "
                              f"unexpected={surplus[:5]} wrong_shape={wrong[:5]}")
    dtype = PRECISIONS[precision] if precision else default_dtype()
    params = {}
    for entry in header.params:
        start = header.data_start + entry.offset
        if entry.nbytes != 4 * int(np.prod(entry.shape)) or start + entry.nbytes > len(blob):
            raise CheckpointError(f"{entry.name}: byte range inconsistent with shape {entry.shape}")
        arr = np.frombuffer(blob, dtype="<f4", count=entry.nbytes // 4, offset=start).reshape(entry.shape)
        params[entry.name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
    return Model(header.config, params), header.extra
