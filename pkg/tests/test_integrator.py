import math

import numpy as np
import pytest

from parapack.integrator import (
    Event,
    EventKind,
    EventSpec,
    IntegrationError,
    IntegratorSettings,
    integrate,
    rk_fixed_step,
)


def decay(t, y):
    return -y


def test_settings_validation():
    with pytest.raises(ValueError):
        IntegratorSettings(rtol=0.0)
    with pytest.raises(ValueError):
        IntegratorSettings(atol=-1.0)
    with pytest.raises(ValueError):
        IntegratorSettings(min_step=10.0, max_step=1.0)
    with pytest.raises(ValueError):
        EventSpec(EventKind.TIME_REACHED, math.inf)


def test_exponential_accuracy():
    s = IntegratorSettings(rtol=1e-6, atol=1e-10, output_dt=0.1)
    traj, term = integrate(decay, [1.0], (0.0, 1.0), s)
    assert term.reason == "t_end"
    assert abs(term.y[0] - math.exp(-1.0)) < 10 * s.rtol
    np.testing.assert_allclose(traj.t, np.linspace(0.0, 1.0, 11), atol=1e-12)
    np.testing.assert_allclose(traj.y[:, 0], np.exp(-traj.t), atol=10 * s.rtol)


def test_linear_crossing_event():
    events = [Event(lambda t, y: y[0] - 0.5, direction=-1)]
    _, term = integrate(lambda t, y: np.array([-0.1]), [1.0], (0.0, 20.0), IntegratorSettings(), events)
    assert term.reason == "event" and term.event_index == 0
    assert abs(term.time - 5.0) <= 1e-3
    assert term.y[0] <= 0.5


def test_event_residual_bounded_by_slope():
    # g(t) = cos(t) - 0.3 crosses with slope -sin(t)
    ev = Event(lambda t, y: y[0] - 0.3, direction=-1)
    rhs = lambda t, y: np.array([-y[1], y[0]])  # noqa: E731
    s = IntegratorSettings(rtol=1e-9, atol=1e-12, event_tol=1e-4)
    _, term = integrate(rhs, [1.0, 0.0], (0.0, 3.0), s, [ev])
    t_true = math.acos(0.3)
    assert abs(term.time - t_true) <= s.event_tol
    assert abs(term.y[0] - 0.3) <= s.event_tol * math.sin(t_true) + 1e-8


def test_event_active_at_start():
    ev = Event(lambda t, y: y[0] - 2.0, direction=-1)
    traj, term = integrate(decay, [1.0], (0.0, 1.0), IntegratorSettings(), [ev])
    assert term.reason == "event" and term.time == 0.0 and traj.t.size == 1


def test_earliest_event_wins():
    evs = [Event(lambda t, y: t - 7.0), Event(lambda t, y: t - 3.0)]
    _, term = integrate(lambda t, y: np.zeros(1), [0.0], (0.0, 10.0), IntegratorSettings(), evs)
    assert term.event_index == 1 and abs(term.time - 3.0) <= 1e-3


def test_self_convergence():
    rhs = lambda t, y: np.array([y[1], -math.sin(y[0])])  # noqa: E731
    coarse = IntegratorSettings(rtol=1e-6, atol=1e-9)
    fine = IntegratorSettings(rtol=5e-7, atol=5e-10)
    _, a = integrate(rhs, [1.0, 0.0], (0.0, 20.0), coarse)
    _, b = integrate(rhs, [1.0, 0.0], (0.0, 20.0), fine)
    scale = coarse.atol + coarse.rtol * np.abs(a.y)
    assert np.all(np.abs(a.y - b.y) < 10 * scale * 20)


def test_fixed_step_order_five():
    exact = math.exp(-2.0)
    errs = [abs(rk_fixed_step(decay, [1.0], (0.0, 2.0), h)[0] - exact) for h in (0.4, 0.2, 0.1)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(4.5 < p < 5.7 for p in orders), orders


def test_non_finite_derivative():
    with pytest.raises(IntegrationError):
        integrate(lambda t, y: np.array([np.nan]), [1.0], (0.0, 1.0))
    with pytest.raises(IntegrationError):
        integrate(decay, [np.inf], (0.0, 1.0))


def test_step_underflow():
    s = IntegratorSettings(min_step=1e-3, max_step=1.0)
    # finite-time blow-up at t = 1
    with pytest.raises(IntegrationError):
        integrate(lambda t, y: y**2, [1.0], (0.0, 2.0), s)


def test_t_eval_grid():
    te = np.array([0.0, 0.3, 0.7, 1.0])
    traj, _ = integrate(decay, [1.0], (0.0, 1.0), IntegratorSettings(rtol=1e-9, atol=1e-12), t_eval=te)
    np.testing.assert_allclose(traj.t, te)
    np.testing.assert_allclose(traj.y[:, 0], np.exp(-te), atol=1e-8)
