"""Multi-source cross-scene domain generalization on a numpy autodiff engine."""
from .config import ConfigError, RunConfig
from .data import DataError, SceneRaster, SyntheticSpec, gen_synthetic, load_scene, save_scene
from .estimator import MSCDGClassifier
from .tensor import Tensor, backward, finite_diff_check, load_tensor, save_tensor
from .training import NumericalError, evaluate, predict, train

__all__ = [
    "ConfigError", "DataError", "MSCDGClassifier", "NumericalError", "RunConfig", "SceneRaster",
    "SyntheticSpec", "Tensor", "backward", "evaluate", "finite_diff_check", "gen_synthetic",
    "load_scene", "load_tensor", "predict", "save_scene", "save_tensor", "train",
]
__version__ = "0.1.0"
