"""Online evaluation: sequential slice processing with latency accounting.

Slices are consumed strictly in release order through a forward-only packet
cursor, so the loop provably never touches data released after the slice it
is working on.  Two clock modes:

* ``sim`` replays the sensor schedule deterministically: the clock jumps to
  each slice's last-point release time, a model (or test double) may advance
  it explicitly, and the per-slice inference time is the span from release to
  segmentation, queueing included.  Results are bit-reproducible.
* ``wall`` measures real compute time around the model call and around slice
  assembly (reported separately as preprocessing), with no schedule replay.

The real-time verdict compares mean inference time against the slice
acquisition window (``rotation_period * dtheta / 2pi``): processing slower
than acquisition falls behind the sensor.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Slice, assemble_slice
from .ingest import TWO_PI, SequentialPacketStream, concat_points
from .metrics import ConfusionMatrix

DEFAULT_ROTATION_PERIOD = 0.104


class WallClock:
    def now(self):
        return time.perf_counter()


class SimulatedClock:
    """Deterministic clock; only explicit advances move it."""

    def __init__(self, start=0.0):
        self.t = float(start)

    def now(self):
        return self.t

    def advance(self, dt):
        self.t += float(dt)

    def wait_until(self, t):
        self.t = max(self.t, float(t))


@dataclass
class EvalConfig:
    dtheta: float = TWO_PI / 5
    rotation_period: float = DEFAULT_ROTATION_PERIOD
    clock: str = "sim"              # "sim" | "wall"
    skip_rotations: int = 0         # warm-up rotations excluded from metrics

    def __post_init__(self):
        if not (0.0 < self.dtheta <= TWO_PI + 1e-12):
            raise ValueError("dtheta must lie in ]0, 2*pi]")
        if self.clock not in ("sim", "wall"):
            raise ValueError("clock must be 'sim' or 'wall'")

    @property
    def acquisition_window(self):
        return self.rotation_period * self.dtheta / TWO_PI


@dataclass
class LatencyReport:
    dtheta: float
    acquisition_window: float          # seconds per slice, nominal
    inference: list = field(default_factory=list)    # per-slice seconds
    preprocess: list = field(default_factory=list)   # per-slice seconds (wall mode)
    miou: float = float("nan")

    @property
    def mean_inference(self):
        return float(np.mean(self.inference)) if self.inference else 0.0

    @property
    def min_inference(self):
        return float(np.min(self.inference)) if self.inference else 0.0

    @property
    def max_inference(self):
        return float(np.max(self.inference)) if self.inference else 0.0

    @property
    def std_inference(self):
        return float(np.std(self.inference)) if self.inference else 0.0

    @property
    def mean_preprocess(self):
        return float(np.mean(self.preprocess)) if self.preprocess else 0.0

    @property
    def real_time(self):
        return bool(self.mean_inference <= self.acquisition_window)

    def row(self):
        return {
            "slice_pct": float(100.0 * self.dtheta / TWO_PI),
            "slice_deg": float(np.rad2deg(self.dtheta)),
            "acquisition_ms": float(1e3 * self.acquisition_window),
            "inference_mean_ms": float(1e3 * self.mean_inference),
            "inference_min_ms": float(1e3 * self.min_inference),
            "inference_max_ms": float(1e3 * self.max_inference),
            "inference_std_ms": float(1e3 * self.std_inference),
            "preprocess_mean_ms": float(1e3 * self.mean_preprocess),
            "total_latency_ms": float(1e3 * total_latency(self)),
            "miou": float(self.miou),
            "real_time": self.real_time,
        }


def total_latency(report: LatencyReport) -> float:
    """Acquisition plus mean inference, in seconds."""
    return report.acquisition_window + report.mean_inference


def iter_slices_from_packets(stream: SequentialPacketStream, dtheta):
    """Assemble slices incrementally; one packet may split across slices.

    A slice is emitted as soon as the packet holding its final point arrives;
    nothing past that packet has been read at that moment.
    """
    pending = []
    current_k = None
    index = 0
    while index < len(stream):
        packet = stream.read(index)
        index += 1
        pts = packet.points
        ks = np.floor(pts.theta_sensor / dtheta).astype(np.int64)
        for k in np.unique(ks):
            part = pts.take(np.nonzero(ks == k)[0])
            if current_k is None:
                current_k = int(k)
            if int(k) != current_k:
                if pending:
                    yield assemble_slice(concat_points(pending), current_k, dtheta)
                pending = []
                current_k = int(k)
            pending.append(part)
    if pending:
        yield assemble_slice(concat_points(pending), current_k, dtheta)


def eval_online(model, packets, cfg: EvalConfig, clock=None):
    """Run the online protocol; returns (ConfusionMatrix, LatencyReport).

    ``model`` needs ``new_buffer()``, ``segment_points(slice, buffer)`` and
    ``cfg.n_classes``.  Pass a shared :class:`SimulatedClock` to inject
    deterministic inference times from a test double.
    """
    if clock is None:
        clock = SimulatedClock() if cfg.clock == "sim" else WallClock()
    sim = isinstance(clock, SimulatedClock)
    stream = SequentialPacketStream(packets)
    buffer = model.new_buffer()
    conf = ConfusionMatrix(model.cfg.n_classes)
    report = LatencyReport(cfg.dtheta, cfg.acquisition_window)

    prep_start = clock.now() if not sim else None
    for slc in iter_slices_from_packets(stream, cfg.dtheta):
        t_ready = slc.t_last
        if sim:
            clock.wait_until(t_ready)
            preds, _ = model.segment_points(slc, buffer)
            report.inference.append(clock.now() - t_ready)
            report.preprocess.append(0.0)
        else:
            t0 = clock.now()
            report.preprocess.append(t0 - prep_start)
            preds, _ = model.segment_points(slc, buffer)
            report.inference.append(clock.now() - t0)
        if slc.rotation_index >= cfg.skip_rotations:
            conf.update(slc.points.label, preds)
        prep_start = clock.now() if not sim else None
    report.miou = conf.miou()
    return conf, report


def bench_latency(model, packets, cfg: EvalConfig, dthetas):
    """One eval_online per slice size; rows suit the latency-vs-slice plot."""
    if not len(list(dthetas)):
        raise ValueError("sweep must contain at least one slice size")
    reports = []
    for dt in dthetas:
        import dataclasses

        sub = dataclasses.replace(cfg, dtheta=float(dt))
        _, rep = eval_online(model, packets, sub)
        reports.append(rep)
    return reports


def reports_to_csv(reports):
    rows = [r.row() for r in reports]
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def reports_to_jsonl(reports):
    return "\n".join(json.dumps(r.row()) for r in reports) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
