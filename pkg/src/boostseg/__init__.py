"""Patch-based 3D segmentation training with error-map boosted sampling
and population-based learning-rate adaptation, in numpy."""

__version__ = "0.1.0"

from .grid import ErrorMap, LabelMap, Patch, Volume  # noqa: E402

__all__ = ["ErrorMap", "LabelMap", "Patch", "Volume", "__version__"]
