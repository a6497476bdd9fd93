from .config import ModelConfig, preset
from .dense import DenseStochasticPredictor
from .keyin import KeyframePrediction, KeyInModel
from .networks import kl_gaussian

__all__ = ["DenseStochasticPredictor", "KeyInModel", "KeyframePrediction", "ModelConfig", "kl_gaussian", "preset"]
