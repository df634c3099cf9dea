import numpy as np

from mixfit._parallel import best_restart, map_restarts, worker_count
from mixfit.errors import SingularCovarianceError
from mixfit.mixture import fit_gmm_auto
from mixfit.optimize import FitConfig


def _square_or_fail(k):
    if k == 2:
        raise SingularCovarianceError("boom")
    return k * k


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MIXFIT_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MIXFIT_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MIXFIT_THREADS", "lots")
    assert worker_count() == 1


def test_failures_are_returned_in_order(monkeypatch):
    for threads in ("1", "2"):
        monkeypatch.setenv("MIXFIT_THREADS", threads)
        out = map_restarts(_square_or_fail, range(4))
        assert out[:2] == [0, 1] and out[3] == 9
        assert isinstance(out[2], SingularCovarianceError)


class _Trace:
    def __init__(self, v):
        self.final_loglik = v


def test_best_restart_keeps_earliest_tie():
    results = [("a", _Trace(1.0)), SingularCovarianceError("x"), ("c", _Trace(3.0)), ("d", _Trace(3.0))]
    r, params, _, scores, errors = best_restart(results)
    assert r == 2 and params == "c"
    assert np.isnan(scores[1]) and len(errors) == 1
    assert best_restart([SingularCovarianceError("x")])[0] is None


def test_process_pool_matches_sequential(monkeypatch):
    r = np.random.default_rng(0)
    x = np.vstack([r.normal(-3, 1, (60, 2)), r.normal(3, 1, (60, 2))])
    cfg = FitConfig(learning_rate=1e-2, max_iters=30, restarts=3)
    monkeypatch.setenv("MIXFIT_THREADS", "1")
    a = fit_gmm_auto(x, 2, cfg)
    monkeypatch.setenv("MIXFIT_THREADS", "3")
    b = fit_gmm_auto(x, 2, cfg)
    np.testing.assert_array_equal(a.params.pack(), b.params.pack())
    assert a.restart_logliks == b.restart_logliks
