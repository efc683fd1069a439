"""Diffusion-guided super-resolution of voxel radiance fields.

Subpackages map one-to-one onto the stages of the method: ``diffusion`` and
``denoisers`` provide the noise model, ``distill`` the SDS and renoised
distillation objectives, ``radiance`` the voxel field, ``scenegen`` the
procedural datasets, ``pipeline`` the upscale/synchronize alternation and
``metrics`` the evaluation.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
