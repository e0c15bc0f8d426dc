"""Asymmetric image-to-image translation for nuclei segmentation.

An invertible flow maps an H&E patch to a segmentation map plus a residual
latent; a pair critic matches (map, embedding) pairs against real masks and
a standard-normal prior, and an SSIM term ties the map to a weak
Otsu/Voronoi target.
"""
from .errors import (
    DataError,
    DegenerateHistogramError,
    DegenerateSampleError,
    DomainError,
    FormatError,
    IoError,
    NumericError,
    OstrichError,
    SeedError,
    ShapeError,
    SingularMatrixError,
    SizeError,
    StateError,
)
from .flow import FlowStack, flow_forward, flow_inverse
from .trainer import TrainConfig, TrainState, checkpoint_load, checkpoint_save, train, train_step

__version__ = "0.1.0"
