"""Point cloud generation through geometry images and an adversarial VAE."""
from .autodiff import Adam, NonFiniteError, Tensor, backward
from .networks import Model, PRESETS
from .pointcloud import chamfer, chamfer_distance, knn, synthetic_shape

__all__ = ["Adam", "Model", "NonFiniteError", "PRESETS", "Tensor", "backward", "chamfer",
           "chamfer_distance", "knn", "synthetic_shape"]
