"""Rigid registration of a 2D frame to a 3D volume.

Modules: ``geometry`` (poses and slice planes), ``resample`` (trilinear
slicing), ``simulate`` (phantom datasets), ``tensor`` (autodiff),
``network``, ``losses`` and ``metrics``, ``registrar`` (classical search,
network inference, training) and ``cli``.
"""
from .geometry import GridSpec, Pose
from .resample import Frame, Volume

__version__ = "0.1.0"
__all__ = ["Frame", "GridSpec", "Pose", "Volume", "__version__"]
