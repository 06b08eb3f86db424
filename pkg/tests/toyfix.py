"""Shared desk-scale fixtures: a small labeled scene and a compact model."""

import numpy as np

from helix.attention import AttnConfig
from helix.geometry import slice_stream
from helix.ingest import SynthConfig, packets_to_points, synth_scene
from helix.model import ModelConfig, SegmentationModel
from helix.sparseconv import UNetConfig
from helix.training import drop_no_echo

TOY_SCENE = SynthConfig(
    packets_per_rotation=120,
    range_max=16.0,
    elev_lo_deg=-25.0,
    elev_hi_deg=45.0,
    n_buildings=3,
    n_static=2,
    n_movers=2,
    mover_speed=18.0,
    arena=11.0,
)


def toy_model_config(n_classes=4, mode="full", slice_by_slice=False, seed=0,
                     blocks=1, offsets=(0, 1), dtype="float64"):
    return ModelConfig(
        n_classes=n_classes,
        point_hidden=24,
        unet=UNetConfig(channels=(8, 16, 24)),
        attn=AttnConfig(blocks=blocks, heads=2, dim=24, key_dim=4, radius=8.0,
                        offsets=offsets, slice_by_slice=slice_by_slice),
        transformer_mode=mode,
        r_max=16.0,
        grid_l1=(0.4, 90, 0.4),
        seed=seed,
        dtype=dtype,
    )


def toy_model(**kw):
    return SegmentationModel(toy_model_config(**kw))


def scene_slices(seed=5, n_rotations=2, dtheta=2 * np.pi, config=TOY_SCENE,
                 keep_no_echo=False):
    packets, _ = synth_scene(seed=seed, n_rotations=n_rotations, config=config)
    points = packets_to_points(packets)
    if not keep_no_echo:
        points = drop_no_echo(points)
    return slice_stream(points, dtheta)
