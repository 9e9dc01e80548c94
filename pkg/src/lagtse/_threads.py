"""BLAS thread control for the stepping loops.

The per-step matrices here are small (hundreds of rows); multi-threaded
BLAS loses far more to synchronization than it gains, especially on the
couple-of-cores machines sweeps run on, so the hot loops pin BLAS to one
thread.  Parallelism belongs at the run level (sweep workers), not inside
a step.
"""

from contextlib import nullcontext

try:
    from threadpoolctl import threadpool_limits

    def blas_single_thread():
        return threadpool_limits(limits=1, user_api="blas")

except ImportError:  # pragma: no cover - threadpoolctl ships with numpy stacks

    def blas_single_thread():
        return nullcontext()
