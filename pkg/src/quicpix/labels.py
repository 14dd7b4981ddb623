"""Response-count labels, admission filter, trace-level splits and minority augmentation."""
from __future__ import annotations

import bisect
import enum
import json
import logging
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Union

import numpy as np

from .render import TrafficImage
from .windowing import seconds_to_ns

logger = logging.getLogger(__name__)

MAX_LABEL = 20
AUGMENT_SIGMA = 2.55
AUGMENT_RANGE = (10, 20)
MIN_TRACES_PER_SERVER = 5


class TooFewTraces(ValueError):
    pass


class InvalidHoldoutCount(ValueError):
    pass


class LabelOutOfAugmentationRange(ValueError):
    pass


@dataclass(frozen=True)
class ResponseEvent:
    trace_id: str
    timestamp: float

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("response timestamp must be non-negative")


def read_events(path) -> list[ResponseEvent]:
    """Load a JSON Lines sidecar of ``{"trace_id": ..., "t": seconds}`` objects."""
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                events.append(ResponseEvent(str(obj["trace_id"]), float(obj["t"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad event record ({exc})") from exc
    return events


def write_events(path, events: Iterable[ResponseEvent]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps({"trace_id": e.trace_id, "t": e.timestamp}) + "\n")


def event_times_ns(events: Iterable[ResponseEvent], trace_id: Optional[str] = None) -> list[int]:
    return sorted(seconds_to_ns(e.timestamp) for e in events if trace_id is None or e.trace_id == trace_id)


def label_window(events: Sequence, window_start, window) -> int:
    """Number of sorted event times in ``[window_start, window_start + window)``.

    Units only need to agree; the pipeline passes integer nanoseconds.
    """
    end = window_start + window
    return bisect.bisect_left(events, end) - bisect.bisect_left(events, window_start)


@dataclass(eq=False)
class LabeledSample:
    image: TrafficImage
    label: int
    server_label: str = ""

    @property
    def trace_id(self) -> str:
        return self.image.trace_id

    @property
    def window_index(self) -> int:
        return self.image.window_index

    @property
    def sample_id(self) -> str:
        return sample_id(self.trace_id, self.window_index)


def sample_id(trace_id: str, window_index: int) -> str:
    return f"{trace_id}/{window_index}"


def admit(sample, max_label: int = MAX_LABEL) -> bool:
    return sample.label <= max_label


class SplitMode(enum.Enum):
    KNOWN_SERVERS = "known-servers"
    LEAVE_SERVERS_OUT = "leave-servers-out"


class SampleRef(Protocol):
    sample_id: str
    trace_id: str
    server_label: str


@dataclass
class SplitManifest:
    mode: SplitMode
    seed: int
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    held_out_servers: list[str] = field(default_factory=list)
    flagged_servers: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"mode": self.mode.value, "seed": self.seed, "train": self.train, "test": self.test}
        if self.mode is SplitMode.LEAVE_SERVERS_OUT:
            d["held_out_servers"] = self.held_out_servers
        if self.flagged_servers:
            d["flagged_servers"] = self.flagged_servers
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(SplitMode(d["mode"]), int(d["seed"]), list(d["train"]), list(d["test"]),
                   list(d.get("held_out_servers", [])), list(d.get("flagged_servers", [])))


def _group(samples: Iterable[SampleRef]) -> dict[str, dict[str, list[str]]]:
    by_server: dict[str, dict[str, list[str]]] = defaultdict(dict)
    owner: dict[str, str] = {}
    for s in samples:
        if owner.setdefault(s.trace_id, s.server_label) != s.server_label:
            raise ValueError(f"trace {s.trace_id} appears under two servers")
        by_server[s.server_label].setdefault(s.trace_id, []).append(s.sample_id)
    return by_server


def _rng(seed: int, salt: str) -> random.Random:
    # string seeding is hashed with SHA-512, stable across runs and platforms
    return random.Random(f"{seed}:{salt}")


def split(
    samples: Iterable[SampleRef],
    mode: SplitMode = SplitMode.KNOWN_SERVERS,
    seed: int = 0,
    holdout: Union[int, Sequence[str], None] = None,
    train_fraction: float = 0.8,
    skip_small: bool = False,
) -> SplitManifest:
    """Assign whole traces to train or test.

    Known-servers mode shuffles each server's traces with a seeded generator
    and sends the first ``floor(0.8 * n)`` to train. Servers with fewer than
    five traces raise :class:`TooFewTraces`, or with ``skip_small`` are left
    out and listed in ``flagged_servers``.

    Leave-servers-out mode takes ``holdout`` as explicit server names or as a
    count of servers to draw with the seed.
    """
    by_server = _group(samples)
    servers = sorted(by_server)
    manifest = SplitManifest(mode, seed)

    if mode is SplitMode.KNOWN_SERVERS:
        small = [s for s in servers if len(by_server[s]) < MIN_TRACES_PER_SERVER]
        if small and not skip_small:
            raise TooFewTraces(f"servers with < {MIN_TRACES_PER_SERVER} traces: {', '.join(small)}")
        manifest.flagged_servers = small
        train_traces, test_traces = set(), set()
        for server in servers:
            if server in small:
                continue
            traces = sorted(by_server[server])
            _rng(seed, server).shuffle(traces)
            cut = math.floor(train_fraction * len(traces))
            train_traces.update(traces[:cut])
            test_traces.update(traces[cut:])
    else:
        if isinstance(holdout, int):
            if not 1 <= holdout < len(servers):
                raise InvalidHoldoutCount(f"cannot hold out {holdout} of {len(servers)} servers")
            held = sorted(_rng(seed, "holdout").sample(servers, holdout))
        else:
            held = sorted(set(holdout or ()))
            unknown = [s for s in held if s not in by_server]
            if unknown:
                raise InvalidHoldoutCount(f"unknown servers: {', '.join(unknown)}")
            if not 1 <= len(held) < len(servers):
                raise InvalidHoldoutCount(f"cannot hold out {len(held)} of {len(servers)} servers")
        manifest.held_out_servers = held
        test_traces = {t for s in held for t in by_server[s]}
        train_traces = {t for s in servers if s not in held for t in by_server[s]}

    for server in servers:
        for trace, ids in sorted(by_server[server].items()):
            if trace in train_traces:
                manifest.train.extend(ids)
            elif trace in test_traces:
                manifest.test.extend(ids)
    return manifest


def augment_minority(sample: LabeledSample, seed: int, sigma: float = AUGMENT_SIGMA) -> LabeledSample:
    """Add rounded, clamped Gaussian noise to the nonzero red/green pixels."""
    lo, hi = AUGMENT_RANGE
    if not lo <= sample.label <= hi:
        raise LabelOutOfAugmentationRange(f"label {sample.label} outside {lo}..{hi}")
    rng = np.random.default_rng(seed)
    px = sample.image.pixels.astype(np.float64)
    noise = rng.normal(0.0, sigma, size=px.shape)
    noise[..., 2] = 0.0
    noisy = np.floor(px + noise + 0.5)
    out = np.where(px > 0, np.clip(noisy, 0, 255), px).astype(np.uint8)
    return replace(sample, image=replace(sample.image, pixels=out))


@dataclass
class ResponseDistribution:
    counts: list[int]
    above_max: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def low_share(self) -> float:
        """Share of labels 0, 1 and 2 among in-range labels."""
        return sum(self.counts[:3]) / self.total if self.total else 0.0


def response_distribution(labels: Iterable[int], max_label: int = MAX_LABEL) -> ResponseDistribution:
    counts = [0] * (max_label + 1)
    above = 0
    for lab in labels:
        if lab > max_label:
            above += 1
        else:
            counts[lab] += 1
    return ResponseDistribution(counts, above)


def write_distribution_csv(path, dist: ResponseDistribution) -> None:
    lines = ["label,count"] + [f"{k},{c}" for k, c in enumerate(dist.counts)]
    Path(path).write_text("\n".join(lines) + "\n")
