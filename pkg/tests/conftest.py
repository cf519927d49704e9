"""Pin BLAS to one thread before numpy loads.

The model's matrices are small enough that BLAS thread fan-out costs
more than it saves, and single-threaded kernels keep run times stable.
"""

import os
import sys

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))
