"""Turn QUIC captures into labeled direction-colored traffic images, and score
response-count predictions."""
from .pcap import Direction, PacketRecord, QuicFilterConfig, TraceMeta, classify_quic, parse_pcap, resolve_direction
from .windowing import WindowHistogram, WindowSpec, bin_packet, build_histogram, enumerate_windows, trace_histograms
from .render import NormalizationMode, TrafficImage, dedup, image_digest, normalize, render, write_png
from .labels import LabeledSample, SplitMode, admit, augment_minority, label_window, response_distribution, split
from .metrics import (
    LossConfig, cap, composite_loss, distance_loss, focused_loss, inverse_frequency_weights,
    ordinal_loss, per_trace_eval,
)

__version__ = "0.1.0"
