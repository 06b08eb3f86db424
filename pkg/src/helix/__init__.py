"""Streaming LiDAR semantic segmentation with online latency accounting."""

from .attention import AttnConfig, KVBuffer
from .geometry import GridSpec, Slice, SparseCylGrid, default_grid_specs, slice_stream
from .harness import EvalConfig, LatencyReport, bench_latency, eval_online, total_latency
from .ingest import (
    Packet,
    PointCloud,
    SensorPose,
    SynthConfig,
    load_helixnet_sequence,
    parse_packet_stream,
    synth_scene,
    write_packet_stream,
)
from .metrics import ConfusionMatrix
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .sparseconv import UNetConfig

__version__ = "0.1.0"

__all__ = [
    "AttnConfig",
    "ConfusionMatrix",
    "EvalConfig",
    "GridSpec",
    "KVBuffer",
    "LatencyReport",
    "ModelConfig",
    "Packet",
    "PointCloud",
    "SegmentationModel",
    "SensorPose",
    "Slice",
    "SparseCylGrid",
    "SynthConfig",
    "UNetConfig",
    "bench_latency",
    "default_grid_specs",
    "eval_online",
    "load_checkpoint",
    "load_helixnet_sequence",
    "parse_packet_stream",
    "save_checkpoint",
    "slice_stream",
    "synth_scene",
    "total_latency",
    "write_packet_stream",
]
