"""Rotation-equivariant point-cloud canonicalization trained from pairs of
aligned clouds, with a small reverse-mode autodiff engine underneath."""

import os

__version__ = "0.1.0"

# CHOIR_THREADS caps BLAS threads; it has to be set before numpy loads them
_threads = os.environ.get("CHOIR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
