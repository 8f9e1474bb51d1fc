"""Pin BLAS to one thread before numpy loads: single-core timing criteria
and bit-reproducible reductions."""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
