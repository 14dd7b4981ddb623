"""End-to-end dataset build: captures + response sidecars -> images, manifest, splits, stats.

Input layout is ``<root>/<server_label>/<trace>.pcap`` with the labels of each
trace in ``<trace>.events.jsonl`` next to it. Outputs are assembled in a
hidden sibling directory and renamed into place only when the run succeeds.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import shutil
import tempfile
from collections import OrderedDict, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import labels as lab
from .labels import SplitManifest, SplitMode
from .metrics import evaluation_report, per_trace_eval
from .pcap import QuicFilterConfig, TraceMeta, parse_pcap
from .render import (
    Deduplicator,
    NormalizationMode,
    image_digest,
    render,
    trace_stats,
    write_png,
)
from .windowing import NS_PER_S, WindowSpec, exact, trace_histograms

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = [
    "sample_id", "trace_id", "server_label", "window_index", "window_start",
    "label", "admitted", "digest", "png_path",
]
STATS_FIELDS = ["server_label", "websites", "traces", "images"]
UNAVAILABLE = "NA"


class PipelineError(RuntimeError):
    pass


class MissingSidecar(PipelineError):
    pass


class DuplicateTraceId(PipelineError):
    pass


class MalformedManifest(ValueError):
    pass


class UnknownSampleId(KeyError):
    pass


class MissingPrediction(KeyError):
    pass


@dataclass
class PipelineConfig:
    window: Fraction = Fraction(1, 10)
    resolution: int = 32
    mtu: int = 1500
    overlap: Fraction = Fraction(0)
    normalization: NormalizationMode = NormalizationMode.PER_WINDOW
    dedup: bool = True
    max_label: int = lab.MAX_LABEL
    seed: int = 0
    split: SplitMode = SplitMode.KNOWN_SERVERS
    holdout: Union[int, list[str]] = field(default_factory=list)
    out: Path = Path("dataset")
    quic_ports: tuple[int, ...] = (443,)
    workers: int = 1
    websites: Optional[Path] = None

    def __post_init__(self):
        self.window = exact(self.window)
        self.overlap = exact(self.overlap)
        self.normalization = NormalizationMode(self.normalization)
        self.split = SplitMode(self.split)
        self.out = Path(self.out)
        if self.websites is not None:
            self.websites = Path(self.websites)
        self.quic_ports = tuple(int(p) for p in self.quic_ports)
        self.spec  # validates window parameters

    @property
    def spec(self) -> WindowSpec:
        return WindowSpec(self.window, self.resolution, self.resolution, self.mtu, self.overlap)

    @classmethod
    def load(cls, path=None, **overrides) -> "PipelineConfig":
        """Read a TOML file (flat keys or a ``[pipeline]`` table), then apply non-None overrides."""
        values: dict = {}
        if path is not None:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
            values.update(doc.get("pipeline", doc))
        values.update({k: v for k, v in overrides.items() if v is not None})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class ManifestRow:
    sample_id: str
    trace_id: str
    server_label: str
    window_index: int
    window_start: str
    label: int
    admitted: bool
    digest: str
    png_path: str

    def as_csv(self) -> list:
        return [self.sample_id, self.trace_id, self.server_label, self.window_index,
                self.window_start, self.label, int(self.admitted), self.digest, self.png_path]


@dataclass
class ServerStatsRow:
    server_label: str
    websites: Optional[int]
    traces: int
    images: int


def format_seconds(ns: int) -> str:
    sec, rem = divmod(ns, NS_PER_S)
    return f"{sec}.{rem:09d}"


@dataclass
class _TraceJob:
    server: str
    trace_id: str
    pcap: Path
    events: Path


@dataclass
class _RenderedWindow:
    window_index: int
    start_ns: int
    label: int
    digest: str
    image: object


@dataclass
class _TraceResult:
    job: _TraceJob
    trace: TraceMeta
    windows: list[_RenderedWindow]


def discover(root) -> list[_TraceJob]:
    root = Path(root)
    jobs, seen = [], {}
    for pcap in sorted(root.glob("*/*.pcap")):
        trace_id = pcap.stem
        if trace_id in seen:
            raise DuplicateTraceId(f"trace id {trace_id!r} in both {seen[trace_id]} and {pcap}")
        seen[trace_id] = pcap
        events = pcap.with_name(trace_id + ".events.jsonl")
        if not events.exists():
            raise MissingSidecar(f"{pcap}: no {events.name}")
        jobs.append(_TraceJob(pcap.parent.name, trace_id, pcap, events))
    jobs.sort(key=lambda j: j.trace_id)
    return jobs


def _process(job: _TraceJob, config: PipelineConfig) -> _TraceResult:
    spec = config.spec
    trace = parse_pcap(job.pcap, QuicFilterConfig(frozenset(config.quic_ports)), job.trace_id, job.server)
    events = lab.read_events(job.events)
    stray = sum(e.trace_id != job.trace_id for e in events)
    if stray:
        logger.warning("%s: ignoring %d events tagged with another trace id", job.events, stray)
    times = lab.event_times_ns(events, job.trace_id)
    hists = list(trace_histograms(trace, spec))
    stats = trace_stats(hists) if config.normalization is NormalizationMode.PER_TRACE else None
    windows = []
    for h in hists:
        img = render(h, config.normalization, stats)
        label = lab.label_window(times, h.window_start_ns, spec.window_ns)
        windows.append(_RenderedWindow(h.window_index, h.window_start_ns, label, image_digest(img), img))
    return _TraceResult(job, trace, windows)


def _promote(tmp: Path, out: Path) -> None:
    backup = None
    if out.exists():
        backup = out.with_name(f".{out.name}.old-{os.getpid()}")
        os.replace(out, backup)
    os.replace(tmp, out)
    if backup is not None:
        shutil.rmtree(backup)


def run_pipeline(config: PipelineConfig, input_dir) -> dict:
    """Build the dataset under ``config.out``; returns a summary of counters."""
    jobs = discover(input_dir)
    out = config.out
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
            results = list(pool.map(lambda j: _process(j, config), jobs))
        summary = _write_outputs(results, config, tmp)
        _promote(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return summary


def _write_outputs(results: Sequence[_TraceResult], config: PipelineConfig, root: Path) -> dict:
    images = root / "images"
    images.mkdir()
    dedup = Deduplicator()
    rows: list[ManifestRow] = []
    rejected = 0
    for res in results:
        tdir = images / res.job.server / res.job.trace_id
        tdir.mkdir(parents=True)
        for w in res.windows:
            rel = f"images/{res.job.server}/{res.job.trace_id}/{w.window_index:06d}.png"
            write_png(w.image, root / rel)
            admitted = w.label <= config.max_label
            if not admitted:
                rejected += 1
            elif config.dedup:
                admitted = dedup.offer(w.digest, w.label)
            rows.append(ManifestRow(
                lab.sample_id(res.job.trace_id, w.window_index), res.job.trace_id, res.job.server,
                w.window_index, format_seconds(w.start_ns), w.label, admitted, w.digest, rel,
            ))
    write_manifest(root / "manifest.csv", rows)

    manifest = lab.split(
        [r for r in rows if r.admitted], config.split, config.seed,
        holdout=config.holdout or None, skip_small=True,
    )
    for server in manifest.flagged_servers:
        logger.warning("server %s has fewer than %d traces; left out of the split", server, lab.MIN_TRACES_PER_SERVER)
    (root / "splits.json").write_text(manifest.to_json())

    websites = load_websites(config.websites) if config.websites else None
    known_servers = {r.job.server for r in results}
    write_stats(root / "stats.csv", stats(rows, websites, known_servers))
    dist = lab.response_distribution((r.label for r in rows if r.admitted), config.max_label)
    lab.write_distribution_csv(root / "responses.csv", dist)

    report = dedup.report.to_dict()
    report.update({
        "windows": len(rows),
        "rejected_over_max_label": rejected,
        "non_quic_packets": sum(r.trace.non_quic_packets for r in results),
        "mismatched_packets": sum(r.trace.mismatched_packets for r in results),
        "traces_without_quic": sum(r.trace.no_quic for r in results),
    })
    if not config.dedup:
        report.update(input=len(rows) - rejected, kept=len(rows) - rejected, dropped=0)
    (root / "dedup_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

    return {
        "traces": len(results),
        "windows": len(rows),
        "admitted": sum(r.admitted for r in rows),
        "rejected": rejected,
        "duplicates": report["dropped"],
        "train": len(manifest.train),
        "test": len(manifest.test),
        "flagged_servers": manifest.flagged_servers,
    }


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow(r.as_csv())


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise MalformedManifest(f"{path}: header {reader.fieldnames} != {MANIFEST_FIELDS}")
        rows = []
        for n, rec in enumerate(reader, 2):
            try:
                rows.append(ManifestRow(
                    rec["sample_id"], rec["trace_id"], rec["server_label"], int(rec["window_index"]),
                    rec["window_start"], int(rec["label"]), rec["admitted"] == "1", rec["digest"], rec["png_path"],
                ))
            except (TypeError, ValueError) as exc:
                raise MalformedManifest(f"{path}:{n}: {exc}") from exc
            if rec["admitted"] not in ("0", "1"):
                raise MalformedManifest(f"{path}:{n}: admitted must be 0 or 1")
    return rows


def load_websites(path) -> dict[str, int]:
    with open(path) as fh:
        return {str(k): int(v) for k, v in json.load(fh).items()}


def stats(
    rows: Iterable[ManifestRow],
    websites: Optional[Mapping[str, int]] = None,
    servers: Iterable[str] = (),
) -> list[ServerStatsRow]:
    """Per-server trace and admitted-image counts, one row per server in name order."""
    traces: dict[str, set] = defaultdict(set)
    images: dict[str, int] = defaultdict(int)
    for s in servers:
        traces[s]
    for r in rows:
        traces[r.server_label].add(r.trace_id)
        images[r.server_label] += r.admitted
    return [
        ServerStatsRow(s, None if websites is None else websites.get(s), len(traces[s]), images[s])
        for s in sorted(traces)
    ]


def write_stats(path, table: Iterable[ServerStatsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_FIELDS)
        for row in table:
            w.writerow([row.server_label, UNAVAILABLE if row.websites is None else row.websites, row.traces, row.images])


def read_predictions(path) -> dict[str, int]:
    """Sample id -> predicted label, from a JSON object or a ``sample_id,prediction`` CSV."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as fh:
            return {str(k): int(v) for k, v in json.load(fh).items()}
    with open(path, newline="") as fh:
        return {rec["sample_id"]: int(rec["prediction"]) for rec in csv.DictReader(fh)}


def evaluate(
    predictions: Mapping[str, int],
    rows: Sequence[ManifestRow],
    tolerances: Sequence[int] = (0, 1, 2),
    trace_tolerance: int = 3,
    splits: Optional[SplitManifest] = None,
) -> dict:
    """CAP at each tolerance plus per-trace summed-response accuracy.

    Every admitted row (restricted to the test side when ``splits`` is given)
    needs a prediction. Rows are evaluated when they have one; per-trace sums
    assume the manifest was built without window overlap.
    """
    by_id = {r.sample_id: r for r in rows}
    unknown = sorted(set(predictions) - set(by_id))
    if unknown:
        raise UnknownSampleId(f"{len(unknown)} unknown sample ids, first {unknown[0]!r}")
    scope = set(splits.test) if splits is not None else None
    required = [r.sample_id for r in rows if r.admitted and (scope is None or r.sample_id in scope)]
    missing = [s for s in required if s not in predictions]
    if missing:
        raise MissingPrediction(f"{len(missing)} samples without prediction, first {missing[0]!r}")

    evaluated = [r for r in rows if r.sample_id in predictions]
    y_true = [r.label for r in evaluated]
    y_pred = [predictions[r.sample_id] for r in evaluated]
    per_trace: OrderedDict[str, tuple[list, list]] = OrderedDict()
    for r in evaluated:
        labels, preds = per_trace.setdefault(r.trace_id, ([], []))
        labels.append(r.label)
        preds.append(predictions[r.sample_id])
    return evaluation_report(y_true, y_pred, tolerances, per_trace_eval(list(per_trace.values()), trace_tolerance))
