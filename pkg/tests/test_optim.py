import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from sdf_surrogate.optim import AdamState, NonFiniteGradient, adam_step, lbfgs_minimize


def test_adam_zero_grad_keeps_params():
    x = np.array([1.0, -2.0])
    st = AdamState.zeros(2)
    np.testing.assert_array_equal(adam_step(st, x, np.zeros(2), 0.1), x)


def test_adam_first_step_is_lr_times_sign():
    st = AdamState.zeros(3)
    g = np.array([3.0, -1e-3, 50.0])
    x1 = adam_step(st, np.zeros(3), g, 1e-2)
    # m_hat = g, v_hat = g^2 after bias correction
    np.testing.assert_allclose(x1, -1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic_recurrence():
    x = np.array([1.0])
    st = AdamState.zeros(1)
    for _ in range(500):
        x = adam_step(st, x, 2 * x, 1e-1)
    assert abs(x[0]) < 1e-3


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        adam_step(AdamState.zeros(2), np.zeros(2), np.array([1.0, np.nan]), 0.1)


def test_adam_per_entry_learning_rate():
    st = AdamState.zeros(2)
    x = adam_step(st, np.zeros(2), np.ones(2), np.array([1e-3, 1e-1]))
    np.testing.assert_allclose(x, [-1e-3, -1e-1], rtol=1e-6)


def _quadratic(seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    A = Q @ np.diag(rng.uniform(1, 10, 10)) @ Q.T
    return A, rng.normal(size=10)


@pytest.mark.parametrize("seed", range(5))
def test_lbfgs_quadratic_stops_on_loss_difference(seed):
    A, x0 = _quadratic(seed)
    res = lbfgs_minimize(lambda x: (x @ A @ x, 2 * A @ x), x0, tol=1e-12)
    assert res.message == "loss difference below tolerance"
    assert abs(res.history[-1] - res.history[-2]) < 1e-12
    # the loss-difference rule bounds f - f* near 1e-12, hence |g| ~ sqrt(lambda_max * f)
    assert res.fun < 1e-11
    assert np.linalg.norm(2 * A @ res.x) < np.sqrt(4 * 10 * 1e-11)


@pytest.mark.parametrize("seed", range(5))
def test_lbfgs_quadratic_gradient_below_1e_8_without_loss_stop(seed):
    A, x0 = _quadratic(seed)
    res = lbfgs_minimize(lambda x: (x @ A @ x, 2 * A @ x), x0, tol=0.0, max_iter=500)
    assert np.linalg.norm(2 * A @ res.x) < 1e-8


def test_lbfgs_optimal_start_terminates_fast():
    A, _ = _quadratic(0)
    res = lbfgs_minimize(lambda x: (x @ A @ x, 2 * A @ x), np.zeros(10))
    assert res.n_iter <= 2
    np.testing.assert_array_equal(res.x, np.zeros(10))


def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]), tol=0.0, max_iter=200)
    assert res.fun < 1e-10
    assert res.n_iter <= 200


def test_lbfgs_returns_best_seen_and_is_deterministic():
    f = lambda x: (rosen(x), rosen_der(x))
    a = lbfgs_minimize(f, np.array([-1.2, 1.0]), max_iter=15)
    b = lbfgs_minimize(f, np.array([-1.2, 1.0]), max_iter=15)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.fun == min(a.history)


def test_lbfgs_falls_back_when_line_search_fails():
    # gradient points the wrong way: strong Wolfe cannot succeed, backtracking on -g can
    calls = {"n": 0}

    def f(x):
        calls["n"] += 1
        return float(x @ x), 2 * x

    res = lbfgs_minimize(f, np.array([3.0, -4.0]), c2=1e-12, max_iter=50)
    assert res.fun < 1e-6
