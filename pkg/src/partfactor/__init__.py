"""Part-aware 3D shape modeling with a factorized latent space.

The pipeline maps an unlabeled voxel occupancy grid into per-part embedding
coordinates (a shape encoder followed by learned projection matrices that
approximately form a partition of the identity), reconstructs centered and
scaled part volumes with a shared decoder, and places them with predicted
12-DOF affine transforms applied by a differentiable trilinear resampler.
"""

from .voxel import (
    CHAIR_SCHEMA,
    AffineParams,
    FormatError,
    LabeledGrid,
    OccupancyGrid,
    PartSchema,
    PartSet,
    connected_components,
    extract_parts,
    label_from_points,
    miou,
    read_binvox,
    read_pflg,
    symmetry_score,
    write_binvox,
    write_pflg,
)

__all__ = [
    "CHAIR_SCHEMA",
    "AffineParams",
    "FormatError",
    "LabeledGrid",
    "OccupancyGrid",
    "PartSchema",
    "PartSet",
    "connected_components",
    "extract_parts",
    "label_from_points",
    "miou",
    "read_binvox",
    "read_pflg",
    "symmetry_score",
    "write_binvox",
    "write_pflg",
]

__version__ = "0.1.0"
