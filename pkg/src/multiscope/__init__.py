"""Tuning video-analytics pipelines for counting and limit queries over tracked objects."""

from .geometry import Detection, Track, WindowSize
from .metrics import SpatialPattern, count_accuracy, limit_query
from .pipeline import Configuration, PipelineModels, run_dataset
from .refinement import TrackRefiner
from .scorer import LogisticMatchScorer
from .sim import SceneSpec, default_profile, default_scene_spec, generate
from .tuner import MultiScopeTuner
from .windows import WindowPlanner

__version__ = "0.1.0"

__all__ = [
    "Configuration", "Detection", "LogisticMatchScorer", "MultiScopeTuner", "PipelineModels", "SceneSpec",
    "SpatialPattern", "Track", "TrackRefiner", "WindowPlanner", "WindowSize", "count_accuracy",
    "default_profile", "default_scene_spec", "generate", "limit_query", "run_dataset",
]
