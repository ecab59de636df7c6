"""Prior-map-conditioned lane-level map updating on synthetic BEV scenes."""

__version__ = "0.1.0"

from .map_model import (ChangeRecord, LaneInstance, VectorMapTile,  # noqa: F401
                        STYLES)
from .synth_world import SamplePair, SceneConfig  # noqa: F401
from .model_core import MapUpdateNet, ModelConfig, Prediction  # noqa: F401
from .training import TrainConfig  # noqa: F401
from .update_engine import InferenceConfig, infer  # noqa: F401
from .evaluation import EvalConfig, evaluate_dataset  # noqa: F401
