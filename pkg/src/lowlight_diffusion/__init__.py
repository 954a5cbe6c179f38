"""Conditional diffusion for low-light image enhancement with structure and uncertainty regularization."""

import os as _os

# Single-threaded BLAS keeps runs bit-reproducible; must precede the numpy import.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
