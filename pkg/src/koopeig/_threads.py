"""BLAS thread-pool capping.

The linear algebra in this pipeline is many small solves; BLAS-level
threading only adds synchronization latency (orders of magnitude on small
machines), and parallelism is instead exposed at the Python level
(per-trajectory integration, per-particle cost evaluations).  The cap is
skipped when the user already pinned pool sizes via environment variables.
"""

import os

_controller = None  # keeps the limit alive for the process lifetime

_ENV_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


def limit_blas_threads(n: int = 1):
    global _controller
    if _controller is not None or any(os.environ.get(v) for v in _ENV_VARS):
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        return
    _controller = threadpool_limits(limits=n, user_api="blas")
