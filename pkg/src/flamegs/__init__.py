"""Flame emission-field reconstruction from sparse calibrated projections.

Represents the flame as a set of anisotropic emissive 3D Gaussians optimized
through a differentiable splatting renderer, with ray-traced visual-hull
initialization, joint camera-pose refinement, and an ART voxel baseline.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
