"""Display radiance fields from lensless aperture-array captures.

Modules: :mod:`~drf.tensor_io` (containers, exports, random streams),
:mod:`~drf.fftconv` (linear convolution forward model), :mod:`~drf.optics`
(geometry and synthetic captures), :mod:`~drf.lightfield` (sub-aperture
decomposition, rendering), :mod:`~drf.autodiff` and :mod:`~drf.nn`
(reverse-mode autodiff, coordinate MLPs, Adam), :mod:`~drf.solvers`
(losses, inverse problems, training), :mod:`~drf.metrics` and
:mod:`~drf.cli`.
"""

__version__ = "0.1.0"
