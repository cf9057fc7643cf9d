"""Drift reconstruction from invariant-measure point clouds.

The score of the invariant density is learned by multi-scale denoising score
matching; the drift is then recovered as the minimal-energy field satisfying
the score form of the stationary Fokker-Planck equation.
"""
import os as _os

# Cap BLAS threads before numpy loads so runs are reproducible by default.
_threads = _os.environ.get("IMSM_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
