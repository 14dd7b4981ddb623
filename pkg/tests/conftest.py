import json
import random
from pathlib import Path

import numpy as np
import pytest

from quicpix.pcap import Direction, PacketRecord, PcapWriter, TraceMeta, quic_payload

CLIENT = ("10.0.0.2", 51000)
SERVER = ("93.184.216.34", 443)
DATA = Path(__file__).parent / "data"


def make_trace(packets, trace_id="t0", server_label="srv"):
    """packets: iterable of (time_ns, length, Direction)."""
    recs = tuple(sorted((PacketRecord(t, n, d) for t, n, d in packets), key=lambda p: p.time_ns))
    return TraceMeta(trace_id, recs, CLIENT, SERVER, server_label)


def random_trace(rng, n_packets, span_ns, trace_id="r"):
    times = np.sort(rng.integers(0, span_ns, size=n_packets))
    if n_packets:
        times -= times[0]
    lengths = rng.integers(40, 1600, size=n_packets)
    dirs = rng.integers(0, 2, size=n_packets)
    return make_trace(((int(t), int(n), Direction(int(d))) for t, n, d in zip(times, lengths, dirs)), trace_id)


def synth_pcap(trace_len_s, n_packets, rng: random.Random, start_s=1_700_000_000, client=CLIENT, server=SERVER,
               noise=True):
    """A capture of one QUIC connection plus optional TCP / DNS noise.

    Returns (pcap bytes, list of QUIC packet (offset_ns, wire length, direction)).
    """
    w = PcapWriter()
    base = start_s * 10**9
    times = sorted(rng.randrange(0, int(trace_len_s * 1e6)) * 1000 for _ in range(n_packets - 1))
    times = [0] + times
    sent = []
    for k, t in enumerate(times):
        to_server = k == 0 or rng.random() < 0.4
        size = rng.randrange(60, 1300)
        src, dst = (client, server) if to_server else (server, client)
        w.write_udp(base + t, src, dst, quic_payload(size, long_header=k < 2))
        sent.append((t, 14 + 20 + 8 + size, Direction.CLIENT_TO_SERVER if to_server else Direction.SERVER_TO_CLIENT))
        if noise and rng.random() < 0.1:
            w.write_udp(base + t, client, ("8.8.8.8", 53), b"\x12\x34" + bytes(20))
            w.write_udp(base + t, client, server[:1] + (443,), b"x" * 10, proto=6)
    return w.getvalue(), sent


def write_corpus(root: Path, layout: dict, seed=0, duration_s=1.0, packets=150, max_events=6):
    """layout: server -> number of traces. Writes <server>/<trace>.pcap + sidecar."""
    rng = random.Random(seed)
    for server, n in sorted(layout.items()):
        d = root / server
        d.mkdir(parents=True, exist_ok=True)
        for k in range(n):
            trace_id = f"{server}-{k:03d}"
            data, _ = synth_pcap(duration_s, packets, rng)
            (d / f"{trace_id}.pcap").write_bytes(data)
            events = sorted(round(rng.uniform(0, duration_s), 6) for _ in range(rng.randrange(0, max_events)))
            with open(d / f"{trace_id}.events.jsonl", "w") as fh:
                for t in events:
                    fh.write(json.dumps({"trace_id": trace_id, "t": t}) + "\n")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, text = mark.args
    prev = _CRITERIA.get(number, (text, True))
    _CRITERIA[number] = (text, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
