"""Volumetric segmentation toolkit: cascaded attention U-Nets for liver and
tumor extraction from CT-like volumes, built on a small taped autodiff engine.

The package is desk-scale by design: every network from the published layer
tables can be built full-size for shape tracing and parameter counting, while
training and the end-to-end cascade run on synthetic phantom volumes with
reduced channel widths.
"""

from voxseg.errors import DataError, GradError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["DataError", "GradError", "NumericError", "ShapeError", "__version__"]
