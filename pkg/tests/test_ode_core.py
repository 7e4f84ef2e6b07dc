import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odeformer import ode_core
from odeformer.errors import NumericalOverflowError, PrecisionFloorError
from odeformer.ode_core import (EULER, RK2, RK4, OdeProblem, RkScheme,
                                empirical_order, integrate, order_table, rk_step)


def identity_field(y, t):
    return y


def test_presets_are_consistent():
    for s in (EULER, RK2, RK4):
        assert s.is_consistent()
        assert np.all(np.triu(s.beta) == 0)
    assert RK4.beta[1, 0] == 0.5 and RK4.beta[2, 1] == 0.5 and RK4.beta[3, 2] == 1.0
    assert np.count_nonzero(RK4.beta) == 3


def test_rejects_implicit_table():
    with pytest.raises(ValueError):
        RkScheme("bad", [0, 1], [[0, 1], [1, 0]], [0.5, 0.5], 2)


def test_euler_step():
    assert rk_step(EULER, identity_field, np.array([1.0]), 0.0, 0.1)[0] == pytest.approx(1.1, abs=1e-15)


def test_rk2_step():
    # F1 = 0.1, F2 = 0.1 * 1.1 = 0.11
    assert rk_step(RK2, identity_field, np.array([1.0]), 0.0, 0.1)[0] == pytest.approx(1.105, abs=1e-15)


def test_rk4_step():
    h = 0.1
    taylor = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    out = rk_step(RK4, identity_field, np.array([1.0]), 0.0, h)[0]
    assert out == pytest.approx(taylor, abs=1e-15)
    assert out == pytest.approx(1.10517083, abs=1e-8)
    assert abs(out - math.exp(0.1)) < 1e-7


def test_step_requires_positive_h():
    with pytest.raises(ValueError):
        rk_step(EULER, identity_field, np.array([1.0]), 0.0, 0.0)


def test_overflow_names_stage():
    def blowup(y, t):
        return y * 1e308

    with pytest.raises(NumericalOverflowError) as info:
        rk_step(RK2, blowup, np.array([10.0]), 0.0, 1.0)
    assert info.value.stage == 0


def test_overflow_in_integrate_names_step():
    prob = OdeProblem(lambda y, t: y * y, np.array([1e100]), 0.0, 1.0)
    with pytest.raises(NumericalOverflowError) as info:
        integrate(EULER, prob, 10)
    assert info.value.step is not None


def test_integrate_euler_growth():
    traj = integrate(EULER, ode_core.growth_problem(), 10)
    expected = 1.0
    for _ in range(10):
        expected *= 1.1
    assert traj.final[0] == pytest.approx(expected, rel=1e-14)
    assert traj.final[0] == pytest.approx(2.59374246, abs=1e-8)
    assert traj.states.shape == (11, 1)
    assert traj.times[0] == 0.0 and traj.states[0, 0] == 1.0


@pytest.mark.parametrize("scheme", [EULER, RK2, RK4])
def test_zero_field_is_constant(scheme):
    prob = OdeProblem(lambda y, t: np.zeros_like(y), np.array([3.5, -2.0]), 0.0, 2.0)
    traj = integrate(scheme, prob, 7)
    assert np.all(traj.states == np.array([3.5, -2.0]))


def test_rk4_decay_accuracy():
    traj = integrate(RK4, ode_core.decay_problem(), 20)
    assert abs(traj.final[0] - math.exp(-1)) < 1e-7


@pytest.mark.parametrize("scheme,lo,hi", [(EULER, 0.9, 1.1), (RK2, 1.9, 2.1), (RK4, 3.7, 4.3)])
@pytest.mark.parametrize("problem", [ode_core.decay_problem, ode_core.cosine_problem])
def test_empirical_order(scheme, lo, hi, problem):
    p = empirical_order(scheme, problem(), [16, 32, 64, 128])
    assert lo <= p <= hi


def test_order_requires_doubling():
    with pytest.raises(ValueError):
        empirical_order(EULER, ode_core.decay_problem(), [16, 30])


def test_precision_floor():
    # RK2 integrates a linear-in-time field exactly.
    prob = OdeProblem(lambda y, t: np.full_like(y, t), np.array([0.0]), 0.0, 1.0,
                      analytic=lambda t: np.array([t * t / 2]))
    with pytest.raises(PrecisionFloorError):
        empirical_order(RK2, prob, [4, 8])


def test_order_csv(tmp_path):
    rows = order_table(RK2, ode_core.decay_problem(), [16, 32, 64])
    path = tmp_path / "orders.csv"
    ode_core.write_order_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "scheme,n_steps,error,estimated_order"
    assert len(lines) == 4
    assert lines[-1].endswith(",")


@pytest.mark.parametrize("scheme", [EULER, RK2, RK4])
def test_explicitness_call_order(scheme):
    """Stage i only sees states built from stages < i."""
    seen = []

    def probe(y, t):
        seen.append(y.copy())
        return np.full_like(y, float(len(seen)))

    rk_step(scheme, probe, np.array([0.0]), 0.0, 1.0)
    assert len(seen) == scheme.stages
    for i, y in enumerate(seen):
        # Stage j returned j + 1, so the input to stage i is a combination of 1..i.
        expected = sum(scheme.beta[i, j] * (j + 1) for j in range(i))
        assert y[0] == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(
    c=st.floats(-100, 100), y=st.floats(-100, 100),
    h=st.floats(1e-3, 10), t=st.floats(-10, 10),
)
def test_constant_field_exact(c, y, h, t):
    for scheme in (EULER, RK2, RK4):
        out = rk_step(scheme, lambda yy, tt: np.full_like(yy, c), np.array([y]), t, h)
        assert out[0] == pytest.approx(y + h * c, rel=1e-12, abs=1e-12)


def test_determinism():
    a = integrate(RK4, ode_core.cosine_problem(3.0), 50).states
    b = integrate(RK4, ode_core.cosine_problem(3.0), 50).states
    assert a.tobytes() == b.tobytes()
