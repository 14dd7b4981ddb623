"""Sliding time windows and per-window (time bin, length bin, direction) histograms.

All edge arithmetic runs on integer nanoseconds. Window length and overlap
are held as exact fractions, so e.g. a 0.3 s window split into 32 bins gives
a bin width of exactly 9.375 ms.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Optional, Union

import numpy as np

from .pcap import PacketRecord, TraceMeta

NS_PER_S = 1_000_000_000
CHANNELS = 2

Number = Union[int, float, str, Fraction]


def exact(value: Number) -> Fraction:
    """Decimal-faithful fraction: ``exact(0.3) == Fraction(3, 10)``."""
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def seconds_to_ns(value: Number) -> int:
    return round(exact(value) * NS_PER_S)


@dataclass(frozen=True)
class WindowSpec:
    window: Fraction = Fraction(1, 10)
    time_bins: int = 32
    length_bins: int = 32
    max_length: int = 1500
    overlap: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(self, "window", exact(self.window))
        object.__setattr__(self, "overlap", exact(self.overlap))
        if self.window <= 0:
            raise ValueError("window length must be positive")
        if self.time_bins < 1 or self.length_bins < 1:
            raise ValueError("bin counts must be positive")
        if self.max_length <= 0:
            raise ValueError("max_length must be positive")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        if (self.window * NS_PER_S).denominator != 1:
            raise ValueError("window length must be a whole number of nanoseconds")
        if self.step_ns < 1:
            raise ValueError("window step rounds to zero nanoseconds")

    @property
    def bin_width(self) -> Fraction:
        """Time-bin width in seconds."""
        return self.window / self.time_bins

    @property
    def length_bin_width(self) -> Fraction:
        """Length-bin width in bytes."""
        return Fraction(self.max_length, self.length_bins)

    @property
    def window_ns(self) -> int:
        return int(self.window * NS_PER_S)

    @property
    def step(self) -> Fraction:
        return self.window * (1 - self.overlap)

    @property
    def step_ns(self) -> int:
        # step is rounded to the nearest nanosecond; exact for decimal inputs
        return round(self.step * NS_PER_S)


@dataclass(eq=False)
class WindowHistogram:
    counts: np.ndarray  # (time_bins, length_bins, 2), channel = Direction value
    window_start_ns: int
    window_index: int = 0
    trace_id: str = ""

    @property
    def window_start(self) -> float:
        return self.window_start_ns / NS_PER_S

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        """Debug dump: one ``i,j,channel,count`` row per nonzero bin."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["i", "j", "channel", "count"])
        for i, j, c in zip(*np.nonzero(self.counts)):
            w.writerow([int(i), int(j), int(c), int(self.counts[i, j, c])])
        return out.getvalue()


def window_count(duration_ns: int, spec: WindowSpec) -> int:
    return duration_ns // spec.step_ns + 1


def enumerate_windows(trace: TraceMeta, spec: WindowSpec) -> list[tuple[int, float]]:
    """(index, start seconds) for every window whose start is at or before the trace end."""
    return [(k, k * spec.step_ns / NS_PER_S) for k in range(window_count(trace.duration_ns, spec))]


def length_bin(length: int, spec: WindowSpec) -> int:
    return min(length * spec.length_bins // spec.max_length, spec.length_bins - 1)


def bin_packet(packet: PacketRecord, window_start: Number, spec: WindowSpec) -> Optional[tuple[int, int]]:
    offset = packet.time_ns - seconds_to_ns(window_start)
    if not 0 <= offset < spec.window_ns:
        return None
    i = min(offset * spec.time_bins // spec.window_ns, spec.time_bins - 1)
    return i, length_bin(packet.length, spec)


def _packet_arrays(trace: TraceMeta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(trace.packets)
    times = np.fromiter((p.time_ns for p in trace.packets), dtype=np.int64, count=n)
    lengths = np.fromiter((p.length for p in trace.packets), dtype=np.int64, count=n)
    dirs = np.fromiter((int(p.direction) for p in trace.packets), dtype=np.int64, count=n)
    return times, lengths, dirs


def _fill(times, lengths, dirs, start_ns: int, spec: WindowSpec) -> np.ndarray:
    counts = np.zeros((spec.time_bins, spec.length_bins, CHANNELS), dtype=np.int64)
    if len(times):
        i = np.minimum((times - start_ns) * spec.time_bins // spec.window_ns, spec.time_bins - 1)
        j = np.minimum(lengths * spec.length_bins // spec.max_length, spec.length_bins - 1)
        np.add.at(counts, (i, j, dirs), 1)
    return counts


def build_histogram(trace: TraceMeta, window_start: Number, spec: WindowSpec, window_index: int = 0) -> WindowHistogram:
    start_ns = seconds_to_ns(window_start)
    times, lengths, dirs = _packet_arrays(trace)
    inside = (times >= start_ns) & (times < start_ns + spec.window_ns)
    counts = _fill(times[inside], lengths[inside], dirs[inside], start_ns, spec)
    return WindowHistogram(counts, start_ns, window_index, trace.trace_id)


def trace_histograms(trace: TraceMeta, spec: WindowSpec) -> Iterator[WindowHistogram]:
    """Histograms for every window of a trace, in window order."""
    times, lengths, dirs = _packet_arrays(trace)
    for k in range(window_count(trace.duration_ns, spec)):
        start = k * spec.step_ns
        lo, hi = np.searchsorted(times, [start, start + spec.window_ns], side="left")
        counts = _fill(times[lo:hi], lengths[lo:hi], dirs[lo:hi], start, spec)
        yield WindowHistogram(counts, start, k, trace.trace_id)
