"""Restart-level parallelism.

``MIXFIT_THREADS`` sets the worker count (default 1, fully sequential). Workers
are processes because the tape holds the GIL. Results come back in submission
order, so the selected restart does not depend on scheduling.
"""
import os
from concurrent.futures import ProcessPoolExecutor

from .errors import NumericalError


def worker_count():
    try:
        return max(1, int(os.environ.get("MIXFIT_THREADS", "1")))
    except ValueError:
        return 1


_RECOVERABLE = (NumericalError,)


def _call(fn, job):
    try:
        return fn(job)
    except _RECOVERABLE as exc:
        return exc


def map_restarts(fn, jobs):
    """Run ``fn`` over ``jobs``; recoverable failures are returned, not raised."""
    jobs = list(jobs)
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [_call(fn, job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, [fn] * len(jobs), jobs))


def best_restart(results, score=None):
    """Pick the highest-scoring successful ``(params, trace)`` result.

    Returns ``(index, params, trace, scores, errors)``; ``index`` is ``None``
    when every restart failed. Ties keep the earliest restart.
    """
    score = score or (lambda params, trace: trace.final_loglik)
    best = None
    scores, errors = [], []
    for r, res in enumerate(results):
        if isinstance(res, Exception):
            errors.append(res)
            scores.append(float("nan"))
            continue
        s = score(*res)
        scores.append(s)
        if best is None or s > best[0]:
            best = (s, r, res)
    if best is None:
        return None, None, None, scores, errors
    _, r, (params, trace) = best
    return r, params, trace, scores, errors
