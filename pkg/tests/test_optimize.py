import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixfit import autodiff as ad
from mixfit.errors import ConfigError, DivergenceError
from mixfit.optimize import (
    FitConfig, FitTrace, LineSearchWarning, Objective, ParamLayout, conjugate_gradient, gradient_ascent,
    line_search_backtrack, newton_cg,
)


def neg_rosenbrock(xs):
    a, b = xs
    return -((1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2)


def concave_quadratic(a, b):
    def f(xs):
        return ad.dot(list(b), xs) - 0.5 * ad.vsum([xs[i] * ad.dot(list(a[i]), xs) for i in range(len(xs))])
    return f


def test_fit_config_validation():
    for bad in ({"learning_rate": 0.0}, {"max_iters": 0}, {"tol": -1.0}, {"restarts": 0}):
        with pytest.raises(ConfigError):
            FitConfig(**bad)


def test_param_layout_roundtrip():
    layout = ParamLayout([("a", (2,)), ("b", (2, 3)), ("c", ())])
    x = np.arange(9.0)
    parts = layout.unpack(x)
    assert parts["b"].shape == (2, 3)
    np.testing.assert_array_equal(layout.pack(**parts), x)
    nested = layout.split(list(x))
    assert nested["b"] == [[2.0, 3.0, 4.0], [5.0, 6.0, 7.0]]
    assert "c" in layout and layout.size == 9
    with pytest.raises(ValueError):
        layout.unpack(np.zeros(3))


def test_trace_records_and_roundtrip():
    trace = FitTrace(extra_columns=("exact_loglik",), clock=lambda: 0.0)
    trace.append(0, -5.0, 1.0, 0.0, exact_loglik=-6.0)
    trace.append(1, -4.0, 0.5, 0.1, exact_loglik=-5.0)
    with pytest.raises(ValueError):
        trace.append(1, -3.0, 0.1, 0.1, exact_loglik=-4.0)
    back = FitTrace.from_records(trace.records())
    assert back.rows == trace.rows
    assert back.columns == trace.columns
    assert trace.iterations == 1 and trace.final_loglik == -4.0
    np.testing.assert_array_equal(trace.column("exact_loglik"), [-6.0, -5.0])


def test_trace_sink_receives_rows():
    seen = []
    trace = FitTrace(sink=lambda cols, row: seen.append(row), clock=lambda: 0.0)
    trace.append(0, 1.0, 0.0, 0.0)
    assert seen == [(0, 1.0, 0.0, 0.0, 0.0)]


def test_conjugate_gradient_solves_spd_system(rng):
    m = rng.normal(size=(6, 6))
    a = m @ m.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    z = conjugate_gradient(lambda v: a @ v, b, 1e-12, 50)
    np.testing.assert_allclose(z, np.linalg.solve(a, b), rtol=1e-9)


def test_conjugate_gradient_negative_curvature_returns_rhs():
    b = np.array([1.0, 2.0])
    z = conjugate_gradient(lambda v: -v, b, 1e-12, 10)
    np.testing.assert_array_equal(z, b)


def test_line_search_satisfies_armijo():
    obj = Objective.from_function(neg_rosenbrock)
    x = np.array([-1.2, 1.0])
    f0, g0 = obj.value_and_grad(x)
    cfg = FitConfig(learning_rate=1.0)
    ls = line_search_backtrack(obj, x, g0, cfg, f0, g0)
    assert not ls.stalled
    assert ls.value >= f0 + 1e-4 * ls.step * g0 @ g0
    assert ls.value == obj.value(x + ls.step * g0)
    assert math.log2(1.0 / ls.step) == int(math.log2(1.0 / ls.step))


def test_line_search_rejects_descent_direction():
    obj = Objective.from_function(neg_rosenbrock)
    x = np.array([-1.2, 1.0])
    f0, g0 = obj.value_and_grad(x)
    with pytest.warns(LineSearchWarning):
        ls = line_search_backtrack(obj, x, -g0, FitConfig(), f0, g0)
    assert ls.stalled and ls.step == 0.0


def test_gradient_ascent_on_concave_quadratic(rng):
    m = rng.normal(size=(4, 4))
    a = m @ m.T + 4 * np.eye(4)
    b = rng.normal(size=4)
    obj = Objective.from_function(concave_quadratic(a, b))
    x, trace = gradient_ascent(obj, np.zeros(4), FitConfig(learning_rate=0.5, max_iters=5000, tol=1e-15))
    np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-5)
    assert np.all(np.diff(trace.loglik) >= 0)


def test_newton_cg_on_rosenbrock():
    obj = Objective.from_function(neg_rosenbrock)
    x, trace = newton_cg(obj, np.array([-1.2, 1.0]), FitConfig(max_iters=200, tol=1e-16))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-6)
    assert np.all(np.diff(trace.loglik) >= 0)
    assert trace.converged


@pytest.mark.parametrize("dim", [1, 5, 20, 50])
def test_newton_cg_one_step_on_concave_quadratic(rng, dim):
    m = rng.normal(size=(dim, dim))
    a = m @ m.T / dim + np.eye(dim)
    b = rng.normal(size=dim)
    obj = Objective.from_function(concave_quadratic(a, b))
    x, trace = newton_cg(obj, np.zeros(dim), FitConfig(max_iters=1, tol=0.0))
    assert trace.iterations == 1
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=0, atol=1e-10)


def test_newton_cg_forcing_sequence_is_inexact(rng):
    m = rng.normal(size=(5, 5))
    a = m @ m.T + np.eye(5)
    b = rng.normal(size=5)
    obj = Objective.from_function(concave_quadratic(a, b))
    x1, _ = newton_cg(obj, np.zeros(5), FitConfig(max_iters=1, tol=0.0, cg_forcing=True))
    assert np.max(np.abs(x1 - np.linalg.solve(a, b))) > 1e-10
    x, _ = newton_cg(obj, np.zeros(5), FitConfig(max_iters=8, tol=0.0, cg_forcing=True))
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-8)


def test_newton_cg_rosenbrock_within_100_iterations():
    obj = Objective.from_function(neg_rosenbrock)
    x, trace = newton_cg(obj, np.array([-1.2, 1.0]), FitConfig(max_iters=100, tol=0.0))
    assert trace.final_loglik >= -1e-8
    assert trace.iterations <= 100


@pytest.mark.parametrize("line_search", [True, False])
def test_gradient_ascent_quadratic_example(line_search):
    # at tol 1e-8 the relative-change rule stops near |x - 3| ~ 1.3e-4, so tighten it
    obj = Objective.from_function(lambda xs: -(xs[0] - 3.0) ** 2)
    cfg = FitConfig(learning_rate=0.1, max_iters=200, tol=1e-12, line_search=line_search)
    x, trace = gradient_ascent(obj, np.zeros(1), cfg)
    assert abs(x[0] - 3.0) <= 1e-4
    assert trace.iterations <= 200


def test_gradient_ascent_rosenbrock_trace_non_decreasing():
    obj = Objective.from_function(neg_rosenbrock)
    _, trace = gradient_ascent(obj, np.array([-1.2, 1.0]), FitConfig(learning_rate=1e-3, max_iters=500))
    assert np.all(np.diff(trace.loglik) >= 0)


def test_fixed_rate_too_large_raises():
    obj = Objective.from_function(lambda xs: -(xs[0] - 3.0) ** 2)
    with pytest.raises(DivergenceError):
        gradient_ascent(obj, np.zeros(1), FitConfig(learning_rate=1.5, max_iters=2000, line_search=False))


def test_line_search_exact_unit_step():
    # f = -|x|^2 / 2 from x: the gradient step of length 1 lands on the maximizer
    obj = Objective.from_function(lambda xs: -0.5 * ad.dot(list(xs), list(xs)))
    x = np.array([1.0, -2.0])
    f0, g0 = obj.value_and_grad(x)
    ls = line_search_backtrack(obj, x, g0, FitConfig(learning_rate=1.0), f0, g0, step0=1.0)
    assert ls.step == 1.0 and ls.value == 0.0


def test_line_search_armijo_on_iris_mfa():
    from mixfit.dataio import load_iris
    from mixfit.mfa import initial_mfa_params, mfa_objective

    x = load_iris().x
    obj = mfa_objective(x, 3, 1, False)
    theta = initial_mfa_params(x, 3, 1, 4, 0, False).pack()
    theta = theta + 0.1 * np.random.default_rng(4).normal(size=theta.size)
    f0, g0 = obj.value_and_grad(theta)
    ls = line_search_backtrack(obj, theta, g0, FitConfig(learning_rate=1.0), f0, g0)
    assert not ls.stalled and ls.step > 0
    assert ls.value - f0 >= 1e-4 * ls.step * float(g0 @ g0)


def test_newton_cg_requires_hvp():
    obj = Objective(lambda x: 0.0, lambda x: (0.0, np.zeros_like(x)))
    with pytest.raises(ConfigError):
        newton_cg(obj, np.zeros(2), FitConfig())


def test_fixed_rate_mode_takes_literal_steps():
    obj = Objective.from_function(lambda xs: -(xs[0] - 3.0) ** 2)
    x, trace = gradient_ascent(obj, np.zeros(1), FitConfig(learning_rate=0.1, max_iters=3, line_search=False, tol=0))
    # x <- x + 0.1 * (-2 (x - 3))
    ref = 0.0
    for _ in range(3):
        ref = ref + 0.1 * (-2 * (ref - 3.0))
    assert x[0] == pytest.approx(ref, rel=1e-15)
    np.testing.assert_array_equal(trace.column("step")[1:], 0.1)
    assert trace.stop_reason == "max_iters"


def test_fixed_rate_divergence_raises_with_best_point():
    obj = Objective.from_function(lambda xs: -ad.exp(xs[0] * xs[0]))
    with pytest.raises(DivergenceError) as err:
        gradient_ascent(obj, np.array([2.0]), FitConfig(learning_rate=10.0, max_iters=50, line_search=False))
    assert err.value.best_x is not None
    assert err.value.trace is not None and len(err.value.trace) >= 1


def test_stall_is_reported():
    # the squared gradient norm underflows, so no ascent direction remains
    obj = Objective.from_function(lambda xs: -(xs[0] ** 2))
    with pytest.warns(LineSearchWarning):
        _, trace = gradient_ascent(obj, np.array([1e-200]), FitConfig(learning_rate=1.0, tol=0.0))
    assert trace.stop_reason == "stalled"
    assert trace.converged


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_line_search_traces_never_decrease(a, b):
    obj = Objective.from_function(neg_rosenbrock)
    _, trace = gradient_ascent(obj, np.array([a, b]), FitConfig(learning_rate=1e-2, max_iters=50))
    assert np.all(np.diff(trace.loglik) >= 0)
