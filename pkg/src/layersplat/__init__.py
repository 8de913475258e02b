"""Layered articulated Gaussian splatting: body and garments as separate, jointly rendered entities."""

import os

# TBB is absent in most installs; fall back quietly to OpenMP/workqueue
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
