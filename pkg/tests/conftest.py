"""Force single-threaded BLAS before numpy loads: the bit-exactness
contracts (determinism, step equivalence, config reruns) are stated for
single-threaded mode."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
