"""Kanizsa-triangle closure datasets and a small numpy CNN to probe them."""
from .geometry import (DatasetKind, GenerationExhausted, InducerSpec, InvalidGeometry, Label,
                       OracleTolerance, PerturbationKind, PerturbationRecord, Point2,
                       StimulusSpec, TrianglePose, make_invalid, make_valid, oracle_is_valid,
                       perturb_angle, perturb_offset, perturb_rot, vertices_of)
from .raster import Image, RasterConfig, point_in_inducer, rasterize

__all__ = ["DatasetKind", "GenerationExhausted", "Image", "InducerSpec", "InvalidGeometry", "Label",
           "OracleTolerance", "PerturbationKind", "PerturbationRecord", "Point2", "RasterConfig",
           "StimulusSpec", "TrianglePose", "make_invalid", "make_valid", "oracle_is_valid",
           "perturb_angle", "perturb_offset", "perturb_rot", "point_in_inducer", "rasterize",
           "vertices_of"]
__version__ = "0.1.0"
