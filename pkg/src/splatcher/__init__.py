"""Tile-parallel gaussian particle splatting with a pooled allocator and a
double-buffered streaming pipeline."""

from .errors import ConfigError, IngestError, InvariantError, PoolError, SplatError
from .ingest import FrameConfig, SceneSequence, build_config, load_params, load_scene, open_dataset
from .model import Camera, ColorMap, Image, Particle, ParticleChunk
from .pipeline import PipelineStats, bench, range_pass, run_animation, run_frame, run_multiworker, tonemap
from .render import reference_render, render_tiles

__version__ = "0.1.0"

__all__ = [
    "Camera", "ColorMap", "ConfigError", "FrameConfig", "Image", "IngestError", "InvariantError",
    "Particle", "ParticleChunk", "PipelineStats", "PoolError", "SceneSequence", "SplatError",
    "bench", "build_config", "load_params", "load_scene", "open_dataset", "range_pass",
    "reference_render", "render_tiles", "run_animation", "run_frame", "run_multiworker", "tonemap",
]
