"""Averaged attention maps and normalised positional entropy."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .io_utils import atomic_write
from .model import Model, encoder_forward
from .tensor import no_grad


@dataclass
class AttentionMap:
    values: np.ndarray  # [L, L], row i = query position
    layer: int = 0
    head: int = 0
    sequences_averaged: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"attention map must be square, got {self.values.shape}")

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class Batch:
    """Token ids with their segment ids and padding mask (true = real token)."""

    tokens: np.ndarray
    segments: np.ndarray | None = None
    mask: np.ndarray | None = None


def _as_batch(item) -> Batch:
    if isinstance(item, Batch):
        return item
    if hasattr(item, "tokens"):
        return Batch(item.tokens, getattr(item, "segments", None), getattr(item, "mask", None))
    tokens = np.asarray(item, dtype=np.int64)
    return Batch(tokens if tokens.ndim == 2 else tokens[None, :])


def collect_attention(model: Model, batches: Iterable, max_sequences: int = 1000) -> dict[int, dict]:
    """Sum attention maps per unpadded length.

    Returns ``{length: {"count": n, "sums": [layers][heads, L, L]}}``. Rows of
    padded queries are dropped before summation.
    """
    buckets: dict[int, dict] = {}
    seen = 0
    for item in batches:
        if seen >= max_sequences:
            break
        batch = _as_batch(item)
        tokens = np.asarray(batch.tokens)
        mask = np.ones(tokens.shape, dtype=bool) if batch.mask is None else np.asarray(batch.mask, dtype=bool)
        with no_grad():
            out = encoder_forward(model, tokens, batch.segments, mask, retain_attention=True)
        for b in range(tokens.shape[0]):
            if seen >= max_sequences:
                break
            n = int(mask[b].sum())
            if not mask[b, :n].all():
                raise ValueError("padding must be a suffix of each sequence")
            slot = buckets.setdefault(n, {"count": 0, "sums": None})
            maps = [layer_maps[b, :, :n, :n] for layer_maps in out.attention]
            if slot["sums"] is None:
                slot["sums"] = [m.astype(np.float64, copy=True) for m in maps]
            else:
                for acc, m in zip(slot["sums"], maps):
                    acc += m
            slot["count"] += 1
            seen += 1
    return buckets


def average_attention_maps(model: Model, batches: Iterable, max_sequences: int = 1000,
                           length: int | None = None) -> dict[tuple[int, int], AttentionMap]:
    """Mean attention map for every ``(layer, head)``.

    Sequences are bucketed by unpadded length and only one bucket is
    averaged: ``length`` if given, otherwise the most populated bucket (ties
    go to the longer length).
    """
    buckets = collect_attention(model, batches, max_sequences)
    if not buckets:
        raise ValueError("no sequences to average")
    if length is None:
        counts = Counter({n: slot["count"] for n, slot in buckets.items()})
        length = max(counts, key=lambda n: (counts[n], n))
    if length not in buckets:
        raise ValueError(f"no sequences of unpadded length {length} (have {sorted(buckets)})")
    slot = buckets[length]
    count = slot["count"]
    maps = {}
    for layer, sums in enumerate(slot["sums"]):
        for head in range(sums.shape[0]):
            maps[(layer, head)] = AttentionMap(sums[head] / count, layer, head, count)
    return maps


def positional_entropy(attention: AttentionMap | np.ndarray) -> float:
    """``-(1 / (L log L)) * sum_ij a_ij log a_ij`` with ``0 log 0 = 0``; uniform rows give 1."""
    a = attention.values if isinstance(attention, AttentionMap) else np.asarray(attention, dtype=np.float64)
    length = a.shape[-1]
    if a.ndim != 2 or a.shape[0] != length:
        raise ValueError(f"attention map must be square, got {a.shape}")
    if length < 2:
        raise ValueError("positional entropy needs L >= 2 (log L = 0 otherwise)")
    if np.any(a < 0) or np.max(np.abs(a.sum(axis=1) - 1.0)) > 1e-5:
        raise ValueError("attention map rows must be non-negative and sum to 1")
    # For row-stochastic a, -sum(a log a) = L log L - sum(a log(L a)). The
    # right-hand form is exact for uniform rows (L a == 1) and one-hot rows.
    positive = a > 0
    terms = a[positive] * np.log(length * a[positive])
    h = 1.0 - math.fsum(terms.tolist()) / (length * math.log(length))
    if h < -1e-9 or h > 1 + 1e-9:
        raise ValueError(f"entropy {h} outside [0, 1]; is the map row-stochastic?")
    return float(min(max(h, 0.0), 1.0))


@dataclass
class EntropyReport:
    mean: float
    per_head: dict[tuple[int, int], float]
    per_layer: list[list[tuple[int, float]]] = field(default_factory=list)  # heads sorted by entropy
    length: int = 0
    sequences: int = 0

    def to_dict(self) -> dict:
        return {
            "mean_entropy": self.mean,
            "length": self.length,
            "sequences": self.sequences,
            "layers": [[{"head": h, "entropy": e} for h, e in heads] for heads in self.per_layer],
        }


def entropy_report(maps: dict[tuple[int, int], AttentionMap]) -> EntropyReport:
    per_head = {key: positional_entropy(m) for key, m in maps.items()}
    layers = sorted({layer for layer, _ in per_head})
    per_layer = [sorted(((h, e) for (l, h), e in per_head.items() if l == layer), key=lambda t: (t[1], t[0]))
                 for layer in layers]
    any_map = next(iter(maps.values()))
    return EntropyReport(float(np.mean(list(per_head.values()))), per_head, per_layer,
                         any_map.length, any_map.sequences_averaged)


def model_entropy(model: Model, batches: Iterable, max_sequences: int = 1000,
                  length: int | None = None) -> EntropyReport:
    """Unweighted mean positional entropy over all layers and heads."""
    return entropy_report(average_attention_maps(model, batches, max_sequences, length))


# ---------------------------------------------------------------------------
# heatmaps


def heatmap_pixels(values: np.ndarray, vmax: float = 0.1, gamma: float = 1.0 / 3.0) -> np.ndarray:
    """8-bit grayscale: clip to ``[0, vmax]``, scale to ``[0, 1]``, raise to ``gamma``."""
    scaled = np.clip(np.asarray(values, dtype=np.float64), 0.0, vmax) / vmax
    return np.round(255.0 * scaled ** gamma).astype(np.uint8)


def pgm_bytes(pixels: np.ndarray) -> bytes:
    """Binary (P5) PGM; readable by Pillow, netpbm and most viewers."""
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Inverse of :func:`pgm_bytes` (single-newline header layout)."""
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError("expected an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)


def map_csv(values: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(values):
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def write_heatmaps(maps: dict[tuple[int, int], AttentionMap], out_dir: Path, report: EntropyReport | None = None) -> list[Path]:
    """One CSV and one PGM per head; heads numbered by ascending entropy when ``report`` is given."""
    out_dir = Path(out_dir)
    written = []
    order = {}
    if report is not None:
        for layer, heads in enumerate(report.per_layer):
            for rank, (head, _) in enumerate(heads):
                order[(layer, head)] = rank
    for (layer, head), amap in sorted(maps.items()):
        stem = f"layer{layer:02d}_head{head:02d}"
        if order:
            stem += f"_rank{order[(layer, head)]:02d}"
        written.append(atomic_write(out_dir / f"{stem}.csv", map_csv(amap.values)))
        written.append(atomic_write(out_dir / f"{stem}.pgm", pgm_bytes(heatmap_pixels(amap.values))))
    return written
