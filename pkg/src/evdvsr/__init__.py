"""Event-assisted joint video deblurring and super-resolution.

The package is organized around five areas:

- :mod:`evdvsr.events` -- event simulation, blur/LR synthesis, exposure-aware
  segmentation, voxelization, and edge-mask extraction (everything upstream of
  the network).
- :mod:`evdvsr.model` -- the restoration network: reciprocal feature
  deblurring, hybrid deformable alignment with bidirectional recurrent
  propagation, and pixel-shuffle reconstruction.
- :mod:`evdvsr.training` -- losses, the optimization loop, checkpointing.
- :mod:`evdvsr.metrics` -- PSNR / SSIM and the temporal-consistency metrics.
- :mod:`evdvsr.cli` -- the ``evdvsr`` command-line driver.
"""

from evdvsr.config import ModelConfig, TrainConfig
from evdvsr.events import (
    Event,
    EventStream,
    ExposureWindow,
    SequenceSample,
    VoxelGrid,
    build_sequence_sample,
    downsample_bicubic,
    hr_edge_mask,
    segment_events,
    simulate_events,
    synthesize_blur,
    voxelize,
)
from evdvsr.model import EvDeblurVSR

__version__ = "0.1.0"

__all__ = [
    "Event",
    "EventStream",
    "ExposureWindow",
    "VoxelGrid",
    "SequenceSample",
    "ModelConfig",
    "TrainConfig",
    "EvDeblurVSR",
    "simulate_events",
    "synthesize_blur",
    "downsample_bicubic",
    "segment_events",
    "voxelize",
    "hr_edge_mask",
    "build_sequence_sample",
    "__version__",
]
