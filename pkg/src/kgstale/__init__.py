"""Outdated-fact detection for knowledge graphs.

Pipeline: translation-based embedding init, multi-head fact attention over
incident facts, contrastive learning on the relation co-occurrence graph,
and a small binary classifier that flags facts as outdated or current.
"""

import os

# BLAS threading breaks the single-core runtime contract and bit-exact reruns.
# Must be set before numpy is first imported, which is why it lives here.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

__version__ = "0.1.0"
