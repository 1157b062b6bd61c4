"""Thin zero-copy bindings for the hoverpost kernels.

Three functions cover the pipeline: ``bind_instance_segment`` decodes
prediction maps into labelled instances, ``bind_combined_loss`` returns
the blended loss with analytic gradients, and ``bind_metrics`` scores a
tile pair.  All of them validate the caller's arrays through
:class:`BoundArrayView`, which records dtype/shape/strides and keeps a
reference to the buffer rather than copying it.
"""

from .functions import bind_combined_loss, bind_instance_segment, bind_metrics
from .views import ACCEPTED_DTYPES, BoundArrayView, NotCContiguous

__version__ = "0.1.0"

__all__ = [
    "ACCEPTED_DTYPES",
    "BoundArrayView",
    "NotCContiguous",
    "bind_combined_loss",
    "bind_instance_segment",
    "bind_metrics",
    "__version__",
]
