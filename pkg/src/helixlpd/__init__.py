"""Memory-efficient learned reconstruction for helical cone-beam CT.

Subpackages and modules: :mod:`geometry` (helix, detector, turn partition),
:mod:`projector` (Joseph ray transform), :mod:`simulation` (phantoms and
low-dose data), :mod:`nn` (conv blocks, Adam, checkpoints), :mod:`recon`
(FBP, Huber, invertible split primal-dual networks, gluing), :mod:`metrics`
and :mod:`cli`.
"""

import os

# TBB on many distros is too old for numba and only produces a warning; prefer OpenMP.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
