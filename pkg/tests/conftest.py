import os

# Pin BLAS to one thread before numpy loads anywhere: keeps runs on a single
# core and makes reruns bit-identical.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
