"""coopbev: a desk-scale simulator of multi-stage cooperative BEV perception.

Agents on a shared planar scene exchange confidence-routed messages --
sparse intermediate feature cells plus late-stage boxes -- over a noisy,
delayed, range-limited channel.  The receiver fuses features with
neighborhood cross-attention, filters and calibrates received boxes, and
the harness measures detection quality against transmitted bytes.
"""

__version__ = "0.1.0"

from .autodiff import NonFiniteError, Tensor, no_grad
from .geometry import BBox7, Pose2D

__all__ = ["Tensor", "NonFiniteError", "no_grad", "BBox7", "Pose2D", "__version__"]
