import csv
import json
import random

import numpy as np
import pytest

from quicpix import pipeline as pl
from quicpix.labels import SplitManifest
from quicpix.pcap import PcapWriter, quic_payload
from quicpix.render import NormalizationMode, read_png

from conftest import CLIENT, SERVER, synth_pcap, write_corpus


def one_trace_corpus(root, events=(0.05, 0.15, 0.151, 0.95)):
    """A single trace whose last packet sits exactly at t = 1.0 s."""
    d = root / "alpha"
    d.mkdir(parents=True)
    w = PcapWriter()
    base = 1_700_000_000 * 10**9
    for k in range(11):
        src, dst = (CLIENT, SERVER) if k % 2 else (SERVER, CLIENT)
        if k == 0:
            src, dst = CLIENT, SERVER
        w.write_udp(base + k * 100_000_000, src, dst, quic_payload(200 + 50 * k))
    (d / "solo.pcap").write_bytes(w.getvalue())
    with open(d / "solo.events.jsonl", "w") as fh:
        for t in events:
            fh.write(json.dumps({"trace_id": "solo", "t": t}) + "\n")
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_empty_input(tmp_path):
    (tmp_path / "in").mkdir()
    summary = pl.run_pipeline(pl.PipelineConfig(out=tmp_path / "out"), tmp_path / "in")
    assert summary["windows"] == 0
    assert read_csv(tmp_path / "out" / "manifest.csv") == []
    assert read_csv(tmp_path / "out" / "stats.csv") == []
    assert (tmp_path / "out" / "manifest.csv").read_text().strip() == ",".join(pl.MANIFEST_FIELDS)


def test_single_trace_window_count(tmp_path):
    one_trace_corpus(tmp_path / "in")
    out = tmp_path / "out"
    summary = pl.run_pipeline(pl.PipelineConfig(window="0.1", out=out), tmp_path / "in")
    rows = read_csv(out / "manifest.csv")
    assert len(rows) == 11 == summary["windows"]
    assert [r["window_start"] for r in rows[:3]] == ["0.000000000", "0.100000000", "0.200000000"]
    labels = [int(r["label"]) for r in rows]
    assert labels[:3] == [1, 2, 0] and labels[9] == 1 and sum(labels) == 4
    report = json.loads((out / "dedup_report.json").read_text())
    assert report["kept"] <= 11
    assert report["kept"] + report["dropped"] == report["input"]
    assert sum(r["admitted"] == "1" for r in rows) == report["kept"]
    for r in rows:
        px = read_png(out / r["png_path"])
        assert px.shape == (32, 32, 3)


def test_overlapping_windows(tmp_path):
    one_trace_corpus(tmp_path / "in")
    summary = pl.run_pipeline(pl.PipelineConfig(window="0.1", overlap="0.9", out=tmp_path / "o"), tmp_path / "in")
    assert summary["windows"] == 101


def test_two_server_stats(tmp_path):
    write_corpus(tmp_path / "in", {"alpha": 2, "beta": 1}, seed=5)
    out = tmp_path / "out"
    pl.run_pipeline(pl.PipelineConfig(out=out), tmp_path / "in")
    rows = read_csv(out / "manifest.csv")
    table = read_csv(out / "stats.csv")
    assert [r["server_label"] for r in table] == ["alpha", "beta"]
    assert [int(r["traces"]) for r in table] == [2, 1]
    for t in table:
        hand = sum(r["server_label"] == t["server_label"] and r["admitted"] == "1" for r in rows)
        assert int(t["images"]) == hand
    assert all(t["websites"] == "NA" for t in table)


def test_server_with_only_rejected_images(tmp_path):
    root = tmp_path / "in"
    write_corpus(root, {"alpha": 1}, seed=2)
    d = root / "wiggle"
    d.mkdir()
    data, _ = synth_pcap(0.05, 20, random.Random(1))
    (d / "w0.pcap").write_bytes(data)
    (d / "w0.events.jsonl").write_text("".join(json.dumps({"trace_id": "w0", "t": 0.001 * k}) + "\n" for k in range(25)))
    websites = tmp_path / "sites.json"
    websites.write_text(json.dumps({"wiggle": 4}))
    out = tmp_path / "out"
    pl.run_pipeline(pl.PipelineConfig(out=out, websites=websites), root)
    table = {r["server_label"]: r for r in read_csv(out / "stats.csv")}
    assert table["wiggle"] == {"server_label": "wiggle", "websites": "4", "traces": "1", "images": "0"}
    assert table["alpha"]["websites"] == "NA"
    rows = [r for r in read_csv(out / "manifest.csv") if r["trace_id"] == "w0"]
    assert rows and all(r["admitted"] == "0" and int(r["label"]) > 20 for r in rows)
    assert all((out / r["png_path"]).exists() for r in rows)  # raw archive keeps rejected images


def test_conservation_and_splits(tmp_path):
    write_corpus(tmp_path / "in", {"a": 6, "b": 5, "c": 2}, seed=8, max_events=30)
    out = tmp_path / "out"
    summary = pl.run_pipeline(pl.PipelineConfig(out=out, seed=3), tmp_path / "in")
    rows = pl.read_manifest(out / "manifest.csv")
    report = json.loads((out / "dedup_report.json").read_text())
    admitted = sum(r.admitted for r in rows)
    assert admitted + report["rejected_over_max_label"] + report["dropped"] == len(rows)
    splits = SplitManifest.from_json((out / "splits.json").read_text())
    assert splits.flagged_servers == ["c"]
    assert summary["flagged_servers"] == ["c"]
    train_traces = {s.rsplit("/", 1)[0] for s in splits.train}
    test_traces = {s.rsplit("/", 1)[0] for s in splits.test}
    assert not train_traces & test_traces
    admitted_ids = {r.sample_id for r in rows if r.admitted and r.server_label != "c"}
    assert set(splits.train) | set(splits.test) == admitted_ids


def test_leave_out_run(tmp_path):
    write_corpus(tmp_path / "in", {"a": 2, "b": 2, "cnn": 2}, seed=1)
    out = tmp_path / "out"
    pl.run_pipeline(pl.PipelineConfig(out=out, split="leave-servers-out", holdout=["cnn"]), tmp_path / "in")
    splits = json.loads((out / "splits.json").read_text())
    assert splits["held_out_servers"] == ["cnn"]
    assert all(s.startswith("cnn-") for s in splits["test"])
    assert not any(s.startswith("cnn-") for s in splits["train"])


def test_per_trace_normalization_run(tmp_path):
    write_corpus(tmp_path / "in", {"a": 1}, seed=4)
    cfg = pl.PipelineConfig(out=tmp_path / "pt", normalization="trace", dedup=False)
    assert cfg.normalization is NormalizationMode.PER_TRACE
    summary = pl.run_pipeline(cfg, tmp_path / "in")
    assert summary["duplicates"] == 0


def test_rerun_is_byte_identical_and_replaces(tmp_path):
    write_corpus(tmp_path / "in", {"a": 3}, seed=6)
    out = tmp_path / "out"
    pl.run_pipeline(pl.PipelineConfig(out=out), tmp_path / "in")
    first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    (out / "stale.txt").write_text("old")
    pl.run_pipeline(pl.PipelineConfig(out=out, workers=4), tmp_path / "in")
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second
    assert not any(p.name.startswith(".out") for p in tmp_path.iterdir())


def test_failure_leaves_no_partial_output(tmp_path):
    root = tmp_path / "in"
    write_corpus(root, {"a": 2}, seed=1)
    (root / "a" / "broken.pcap").write_bytes(b"not a pcap at all, nope")
    (root / "a" / "broken.events.jsonl").write_text("")
    with pytest.raises(ValueError):
        pl.run_pipeline(pl.PipelineConfig(out=tmp_path / "out"), root)
    assert list(tmp_path.iterdir()) == [root]


def test_missing_sidecar_and_duplicate_ids(tmp_path):
    root = tmp_path / "in"
    write_corpus(root, {"a": 1}, seed=1)
    (root / "a" / "a-000.events.jsonl").unlink()
    with pytest.raises(pl.MissingSidecar):
        pl.discover(root)
    root2 = tmp_path / "in2"
    write_corpus(root2, {"a": 1}, seed=1)
    (root2 / "b").mkdir()
    for f in (root2 / "a").iterdir():
        (root2 / "b" / f.name).write_bytes(f.read_bytes())
    with pytest.raises(pl.DuplicateTraceId):
        pl.discover(root2)


def test_config_toml_and_overrides(tmp_path):
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text('[pipeline]\nwindow = 0.3\nresolution = 16\noverlap = 0.9\nnormalization = "trace"\n')
    cfg = pl.PipelineConfig.load(cfg_path, resolution=None, seed=9)
    assert cfg.spec.bin_width * 1000 == pytest.approx(18.75)
    assert cfg.spec.time_bins == 16 and cfg.seed == 9
    assert cfg.normalization is NormalizationMode.PER_TRACE
    bad = tmp_path / "bad.toml"
    bad.write_text("windw = 3\n")
    with pytest.raises(ValueError):
        pl.PipelineConfig.load(bad)


def manifest_rows(labels_by_trace):
    rows = []
    for trace, labels in labels_by_trace.items():
        for k, lab in enumerate(labels):
            rows.append(pl.ManifestRow(f"{trace}/{k}", trace, "s", k, pl.format_seconds(k * 10**8), lab,
                                       lab <= 20, "0" * 64, f"images/s/{trace}/{k:06d}.png"))
    return rows


def test_evaluate_exact_predictions():
    rows = manifest_rows({"t1": [0, 3, 5], "t2": [1, 1]})
    rep = pl.evaluate({r.sample_id: r.label for r in rows}, rows)
    assert rep["cap"] == {"0": 1.0, "1": 1.0, "2": 1.0}
    assert rep["per_trace"]["accuracy"] == 1.0


def test_evaluate_off_by_one_half():
    rows = manifest_rows({"t1": [2, 2, 2, 2]})
    preds = {r.sample_id: r.label + (k % 2) for k, r in enumerate(rows)}
    rep = pl.evaluate(preds, rows)
    assert rep["cap"]["0"] == 0.5 and rep["cap"]["1"] == 1.0


def test_evaluate_worked_example():
    rows = manifest_rows({"trace": [1, 0, 2, 4, 1]})
    preds = dict(zip((r.sample_id for r in rows), [1, 0, 3, 4, 1]))
    rep = pl.evaluate(preds, rows)
    assert rep["per_trace"]["points"] == [[8, 9]]
    assert rep["per_trace"]["accuracy"] == 1.0


def test_evaluate_errors():
    rows = manifest_rows({"t": [1, 2]})
    with pytest.raises(pl.UnknownSampleId):
        pl.evaluate({"t/0": 1, "t/1": 2, "zzz/0": 1}, rows)
    with pytest.raises(pl.MissingPrediction):
        pl.evaluate({"t/0": 1}, rows)
    splits = SplitManifest(pl.SplitMode.KNOWN_SERVERS, 0, train=["t/1"], test=["t/0"])
    assert pl.evaluate({"t/0": 1}, rows, splits=splits)["cap"]["0"] == 1.0


def test_manifest_round_trip_and_malformed(tmp_path):
    rows = manifest_rows({"t": [1, 25]})
    pl.write_manifest(tmp_path / "m.csv", rows)
    back = pl.read_manifest(tmp_path / "m.csv")
    assert [r.as_csv() for r in back] == [r.as_csv() for r in rows]
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(pl.MalformedManifest):
        pl.read_manifest(tmp_path / "bad.csv")
    text = (tmp_path / "m.csv").read_text().replace(",1,1,", ",1,x,", 1)
    (tmp_path / "bad2.csv").write_text(text)
    with pytest.raises(pl.MalformedManifest):
        pl.read_manifest(tmp_path / "bad2.csv")


def test_stats_function():
    rows = manifest_rows({"a1": [1, 2], "a2": [30]}) + [
        pl.ManifestRow("b1/0", "b1", "B", 0, "0.000000000", 0, True, "f" * 64, "x.png")]
    for r in rows[:3]:
        r.server_label = "A"
    table = pl.stats(rows)
    assert [(t.server_label, t.traces, t.images) for t in table] == [("A", 2, 2), ("B", 1, 1)]
    assert pl.stats([]) == []


def test_predictions_file_formats(tmp_path):
    (tmp_path / "p.json").write_text('{"t/0": 3}')
    (tmp_path / "p.csv").write_text("sample_id,prediction\nt/0,3\n")
    assert pl.read_predictions(tmp_path / "p.json") == pl.read_predictions(tmp_path / "p.csv") == {"t/0": 3}


def test_images_match_direct_render(tmp_path):
    from quicpix.pcap import parse_pcap
    from quicpix.render import render
    from quicpix.windowing import WindowSpec, trace_histograms

    write_corpus(tmp_path / "in", {"a": 1}, seed=12)
    out = tmp_path / "out"
    pl.run_pipeline(pl.PipelineConfig(out=out), tmp_path / "in")
    trace = parse_pcap(tmp_path / "in" / "a" / "a-000.pcap")
    for h in trace_histograms(trace, WindowSpec()):
        png = out / "images" / "a" / "a-000" / f"{h.window_index:06d}.png"
        assert np.array_equal(read_png(png), render(h).pixels)
