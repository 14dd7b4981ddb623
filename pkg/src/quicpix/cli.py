"""Command-line entry point.

Machine-readable summaries go to stdout as JSON; progress and warnings go to
stderr. Failures print ``{"error": ..., "message": ...}`` and exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import labels as lab
from . import pipeline as pl
from . import plots
from .metrics import dump_report
from .pcap import QuicFilterConfig, parse_pcap
from .windowing import WindowSpec, enumerate_windows

log = logging.getLogger("quicpix")


def _holdout(value: str):
    return int(value) if value.isdigit() else [s for s in value.split(",") if s]


def _add_run(sub):
    p = sub.add_parser("run", help="build an image dataset from a directory of captures")
    p.add_argument("input", type=Path, help="root with <server>/<trace>.pcap and <trace>.events.jsonl")
    p.add_argument("--config", type=Path, help="TOML config; flags override it")
    p.add_argument("--window", help="window length in seconds (0.1)")
    p.add_argument("--resolution", type=int, help="time and length bins per image (32)")
    p.add_argument("--mtu", type=int, help="largest binned packet length in bytes (1500)")
    p.add_argument("--overlap", help="fraction of overlap between consecutive windows (0)")
    p.add_argument("--normalize", dest="normalization", choices=["window", "trace"])
    p.add_argument("--dedup", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--max-label", dest="max_label", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=[m.value for m in lab.SplitMode])
    p.add_argument("--holdout", type=_holdout, help="comma-separated servers, or a count")
    p.add_argument("--websites", type=Path, help="JSON mapping server -> website count")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path)


def _cmd_run(args) -> dict:
    overrides = {k: getattr(args, k) for k in (
        "window", "resolution", "mtu", "overlap", "normalization", "dedup", "max_label",
        "seed", "split", "holdout", "websites", "workers", "out")}
    config = pl.PipelineConfig.load(args.config, **overrides)
    log.info("building dataset in %s", config.out)
    summary = pl.run_pipeline(config, args.input)
    summary["out"] = str(config.out)
    return summary


def _cmd_stats(args) -> dict:
    rows = pl.read_manifest(args.manifest)
    websites = pl.load_websites(args.websites) if args.websites else None
    out = args.out or args.manifest.parent
    out.mkdir(parents=True, exist_ok=True)
    table = pl.stats(rows, websites)
    pl.write_stats(out / "stats.csv", table)
    dist = lab.response_distribution((r.label for r in rows if r.admitted), args.max_label)
    lab.write_distribution_csv(out / "responses.csv", dist)
    result = {"servers": len(table), "images": sum(r.images for r in table), "low_label_share": dist.low_share}
    if not args.no_figures:
        result["figure"] = str(plots.response_distribution_figure(dist, out / "figures" / "response_distribution.png"))
    return result


def _cmd_evaluate(args) -> dict:
    rows = pl.read_manifest(args.manifest)
    splits = lab.SplitManifest.from_json(args.splits.read_text()) if args.splits else None
    report = pl.evaluate(pl.read_predictions(args.predictions), rows, args.tolerance, args.trace_tolerance, splits)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(dump_report(report))
        if not args.no_figures:
            fig = args.out.with_name(args.out.stem + "_per_trace.png")
            plots.per_trace_scatter(report["per_trace"]["points"], fig, args.trace_tolerance)
    return report


def _cmd_inspect(args) -> dict:
    trace = parse_pcap(args.pcap, QuicFilterConfig(frozenset(args.port)), args.pcap.stem)
    spec = WindowSpec(args.window)
    counts = trace.direction_counts()
    return {
        "trace_id": trace.trace_id,
        "client": trace.client,
        "server": trace.server,
        "packets": len(trace.packets),
        "client_to_server": counts.get(1, 0),
        "server_to_client": counts.get(0, 0),
        "duration": trace.duration,
        "windows": len(enumerate_windows(trace, spec)),
        "non_quic_packets": trace.non_quic_packets,
        "no_quic": trace.no_quic,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quicpix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)

    p = sub.add_parser("stats", help="per-server table, label histogram and figure from a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--websites", type=Path)
    p.add_argument("--max-label", type=int, default=lab.MAX_LABEL)
    p.add_argument("--out", type=Path, help="output directory (default: next to the manifest)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("evaluate", help="CAP and per-trace accuracy for a predictions file")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True, help="JSON {sample_id: label} or CSV sample_id,prediction")
    p.add_argument("--splits", type=Path, help="restrict required predictions to the test side")
    p.add_argument("--tolerance", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--trace-tolerance", type=int, default=3)
    p.add_argument("--out", type=Path, help="write the JSON report (and a scatter figure) here")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("inspect", help="summarize the QUIC trace in one capture")
    p.add_argument("pcap", type=Path)
    p.add_argument("--window", default="0.1")
    p.add_argument("--port", type=int, nargs="+", default=[443])
    return parser


COMMANDS = {"run": _cmd_run, "stats": _cmd_stats, "evaluate": _cmd_evaluate, "inspect": _cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc).strip("'\"")}))
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
