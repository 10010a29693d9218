"""Fine-grained classification with background suppression and
high-temperature refinement over a path-aggregation neck."""
from .backbone import BackboneAdapter, build_toy_backbone, extract_stages
from .errors import HerbsError
from .model import HerbsConfig, HerbsNet, build_variant, fuse_predictions
from .neck import PathAggregationNeck
from .refinement import TemperatureSchedule, refinement_loss, temperature_at
from .suppression import BsLossWeights, dropped_loss, merged_loss, select_topk

__all__ = [
    "BackboneAdapter", "BsLossWeights", "HerbsConfig", "HerbsError", "HerbsNet", "PathAggregationNeck",
    "TemperatureSchedule", "build_toy_backbone", "build_variant", "dropped_loss", "extract_stages",
    "fuse_predictions", "merged_loss", "refinement_loss", "select_topk", "temperature_at",
]
