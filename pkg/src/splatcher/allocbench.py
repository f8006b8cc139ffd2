"""Array-growth timing: per-worker pools against per-growth system allocation.

Every worker thread grows one int32 index array to ``n`` elements by
doubling.  ``pool`` takes each new block from the worker's pre-reserved
pool; ``system`` takes it from ``aligned_alloc`` and returns the old one
with ``free``, as a vector on the global heap would.

glibc keeps freed large blocks and raises its mmap threshold after the
first big free, so a second identical run in the same process is served
from memory the first run left behind.  :func:`fresh_process_times` runs
each trial in its own interpreter to time the workload from a cold heap.
"""

from __future__ import annotations

import subprocess
import sys
import threading
import time

from .mempool import IndexArrays, Pool, push_sequence, system_pool

KINDS = ("pool", "system")


def make_pools(kind, workers, pool_bytes=64 << 20):
    if kind == "pool":
        return [Pool(pool_bytes, 64, owner=w) for w in range(workers)]
    if kind == "system":
        return [system_pool() for _ in range(workers)]
    raise ValueError(f"kind must be one of {KINDS}")


def timed_growth(pools, n):
    """Wall time for every pool's worker to push ``0..n-1`` concurrently."""
    arrays = [IndexArrays(p, 1) for p in pools]
    barrier = threading.Barrier(len(pools) + 1)

    def work(ia):
        barrier.wait()
        push_sequence(n, *ia.args())

    threads = [threading.Thread(target=work, args=(ia,)) for ia in arrays]
    for t in threads:
        t.start()
    barrier.wait()
    t0 = time.perf_counter()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    for ia in arrays:
        if ia.count(0) != n:
            raise RuntimeError(f"pushed {ia.count(0)} of {n}")
        ia.release()
    return elapsed


def warm_up():
    # load compiled kernels without touching the allocators under test much
    timed_growth([Pool(1 << 16, 64)], 1 << 10)


def fresh_process_times(kind, workers, n, repeats):
    cmd = [sys.executable, "-m", "splatcher.allocbench", kind, str(workers), str(n)]
    return [float(subprocess.run(cmd, check=True, capture_output=True, text=True).stdout)
            for _ in range(repeats)]


def main(argv=None):
    kind, workers, n = (argv or sys.argv[1:])[:3]
    warm_up()
    pools = make_pools(kind, int(workers))
    print(timed_growth(pools, int(n)))


if __name__ == "__main__":
    main()
