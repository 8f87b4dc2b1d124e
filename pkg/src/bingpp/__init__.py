"""Fast, well-localized object proposals: binarized objectness scoring refined by edges and segments."""

from . import bing, edge_refine, evaluation, geometry, pipeline, raster, segment_refine
from .bing import BinarizedModel, load_model, save_model, scan, train_simple
from .errors import BingppError
from .geometry import Box, Proposal, ProposalSet, Source, iou, nms
from .pipeline import PipelineConfig, run_bingpp, run_many

__version__ = "0.1.0"

__all__ = [
    "BinarizedModel",
    "BingppError",
    "Box",
    "PipelineConfig",
    "Proposal",
    "ProposalSet",
    "Source",
    "bing",
    "edge_refine",
    "evaluation",
    "geometry",
    "iou",
    "load_model",
    "nms",
    "pipeline",
    "raster",
    "run_bingpp",
    "run_many",
    "save_model",
    "scan",
    "segment_refine",
    "train_simple",
]
