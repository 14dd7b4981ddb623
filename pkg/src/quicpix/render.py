"""Histogram -> 8-bit RGB image, content digests, dedup and PNG output.

Image layout: time bins run left to right (column = time bin), length bins
run top to bottom (row = length bin), origin top-left. Red carries
server-to-client counts, green client-to-server, blue is always zero.
"""
from __future__ import annotations

import enum
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .windowing import CHANNELS, WindowHistogram


class MissingTraceStats(ValueError):
    pass


class IoFailure(OSError):
    pass


class NormalizationMode(enum.Enum):
    PER_WINDOW = "window"
    PER_TRACE = "trace"


# channel index (Direction value) -> RGB plane
_RGB_PLANE = {0: 0, 1: 1}

ChannelStats = Sequence[tuple[int, int]]


@dataclass(eq=False)
class TrafficImage:
    pixels: np.ndarray  # uint8, (length_bins, time_bins, 3)
    trace_id: str = ""
    window_index: int = 0
    window_start: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        """(time_bins, length_bins)."""
        return self.pixels.shape[1], self.pixels.shape[0]


def normalize(value: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 1.0 if value > 0 else 0.0
    return (value - lo) / (hi - lo)


def _scale_channel(counts: np.ndarray, lo: int, hi: int) -> np.ndarray:
    counts = counts.astype(np.int64)
    if hi == lo:
        return np.where(counts > 0, 255, 0).astype(np.uint8)
    # round half up of (c - lo) * 255 / (hi - lo), in integers
    span = hi - lo
    return ((2 * 255 * (counts - lo) + span) // (2 * span)).astype(np.uint8)


def trace_stats(histograms: Iterable[WindowHistogram]) -> list[tuple[int, int]]:
    """Per-channel (min, max) over every bin of every window of a trace."""
    lo = [None] * CHANNELS
    hi = [None] * CHANNELS
    for h in histograms:
        for c in range(CHANNELS):
            cmin, cmax = int(h.counts[..., c].min()), int(h.counts[..., c].max())
            lo[c] = cmin if lo[c] is None else min(lo[c], cmin)
            hi[c] = cmax if hi[c] is None else max(hi[c], cmax)
    return [(l or 0, h or 0) for l, h in zip(lo, hi)]


def render(
    hist: WindowHistogram,
    mode: NormalizationMode = NormalizationMode.PER_WINDOW,
    stats: Optional[ChannelStats] = None,
) -> TrafficImage:
    """Min-max scale each direction channel into 0..255.

    In per-trace mode ``stats`` must hold the per-channel (min, max) from
    :func:`trace_stats`. A channel whose min equals its max renders nonzero
    bins at 255.
    """
    if mode is NormalizationMode.PER_TRACE and stats is None:
        raise MissingTraceStats("per-trace normalization needs trace statistics")
    m, n, _ = hist.counts.shape
    pixels = np.zeros((n, m, 3), dtype=np.uint8)
    for c, plane in _RGB_PLANE.items():
        chan = hist.counts[..., c]
        if mode is NormalizationMode.PER_WINDOW:
            lo, hi = int(chan.min()), int(chan.max())
        else:
            lo, hi = stats[c]
        pixels[..., plane] = _scale_channel(chan, lo, hi).T
    return TrafficImage(pixels, hist.trace_id, hist.window_index, hist.window_start)


def image_digest(img: TrafficImage) -> str:
    """SHA-256 over (time_bins, length_bins, row-major RGB bytes); provenance excluded."""
    m, n = img.shape
    h = hashlib.sha256(struct.pack(">II", m, n))
    h.update(np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())
    return h.hexdigest()


@dataclass
class DedupReport:
    input: int = 0
    kept: int = 0
    dropped: int = 0

    def to_dict(self) -> dict:
        return {"input": self.input, "kept": self.kept, "dropped": self.dropped}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Deduplicator:
    """Stateful filter keeping the first occurrence of each (digest, label)."""

    report: DedupReport = field(default_factory=DedupReport)
    _seen: set = field(default_factory=set)

    def offer(self, digest: str, label: Hashable) -> bool:
        self.report.input += 1
        key = (digest, label)
        if key in self._seen:
            self.report.dropped += 1
            return False
        self._seen.add(key)
        self.report.kept += 1
        return True

    def filter(self, items: Iterable[tuple[TrafficImage, Hashable]]) -> Iterator[tuple[TrafficImage, Hashable]]:
        for img, label in items:
            if self.offer(image_digest(img), label):
                yield img, label


def dedup(items: Iterable[tuple[TrafficImage, Hashable]]) -> tuple[list[tuple[TrafficImage, Hashable]], DedupReport]:
    d = Deduplicator()
    kept = list(d.filter(items))
    return kept, d.report


def encode_png(pixels: np.ndarray) -> bytes:
    """8-bit RGB, no alpha, no interlace, filter 0 on every row, zlib level 9."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    height, width, planes = pixels.shape
    if planes != 3:
        raise ValueError("expected an RGB array")

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    raw = b"".join(b"\x00" + pixels[r].tobytes() for r in range(height))
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def write_png(img: TrafficImage, path) -> None:
    try:
        Path(path).write_bytes(encode_png(img.pixels))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected RGB PNG, got {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()
