import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqcbf.errors import MissingParam, NonFiniteState, UnknownSystem
from eqcbf.systems import InputSet, bicycle_slip, integrate, known_systems, make_named_system, rollout


def test_single_integrator_constant_input_is_exact():
    si = make_named_system("single_integrator", dict(u_max=1.0))
    traj = integrate(si, [0.0, 0.0], np.tile([1.0, 0.0], (10, 1)), dt=0.1)
    np.testing.assert_allclose(traj.states[-1], [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(traj.times, 0.1 * np.arange(11))


def test_bicycle_straight_line(bicycle):
    traj = integrate(bicycle, [0.0, 0.0, 0.0], np.tile([1.0, 0.0], (10, 1)), dt=0.1)
    np.testing.assert_allclose(traj.states[-1], [1.0, 0.0, 0.0], atol=1e-12)


def test_pendulum_upright_equilibrium():
    pend = make_named_system("pendulum", dict(g_over_l=1.0, u_max=1.0))
    traj = integrate(pend, [np.pi, 0.0], np.zeros((20, 1)), dt=0.1)
    np.testing.assert_allclose(traj.states[-1], [np.pi, 0.0], atol=1e-12)


def test_bicycle_less_agile_config(bicycle):
    lo, hi = bicycle.input_set.bounding_box
    np.testing.assert_allclose(lo, [0.5, -np.pi / 9])
    np.testing.assert_allclose(hi, [1.0, np.pi / 9])
    assert bicycle.periodic == {2: (-np.pi, 2 * np.pi)}


def test_linear_example_system():
    lin = make_named_system("linear", dict(A=[[1, 2], [3, -4]], B=[-1, 3], u_max=1.0))
    np.testing.assert_allclose(lin([1.0, 1.0], [1.0]), [3 - 1, -1 + 3])


def test_pendulum_without_disturbance():
    pend = make_named_system("pendulum", dict(g_over_l=1.0, d_max=0.0, u_max=1.0))
    assert pend.disturbance is None
    np.testing.assert_allclose(pend([0.5, 0.2], [0.0]), [0.2, -np.sin(0.5)])


def test_bicycle_polar_matches_cartesian(bicycle):
    polar = make_named_system("bicycle_polar", dict(L=1.0, v_min=0.5, v_max=1.0))
    x = np.array([2.0, 1.0, 0.3])
    u = np.array([0.8, 0.2])
    r, phi = np.hypot(x[0], x[1]), np.arctan2(x[1], x[0])
    chi = np.array([r, phi, x[2] - phi])
    xd = bicycle(x, u)
    # chain rule from Cartesian rates to polar rates
    rd = (x[0] * xd[0] + x[1] * xd[1]) / r
    phid = (x[0] * xd[1] - x[1] * xd[0]) / r**2
    np.testing.assert_allclose(polar(chi, u), [rd, phid, xd[2] - phid], atol=1e-12)


def test_unknown_and_missing():
    with pytest.raises(UnknownSystem):
        make_named_system("hovercraft")
    with pytest.raises(MissingParam):
        make_named_system("bicycle", dict(L=1.0))
    assert "bicycle_polar" in known_systems()


def test_non_finite_state_detected():
    blow = make_named_system("linear", dict(A=[[200.0]], B=[1.0], u_max=1.0))
    with pytest.raises(NonFiniteState):
        integrate(blow, [1.0], np.zeros((200, 1)), dt=1.0)
    with pytest.raises(NonFiniteState):
        integrate(blow, [np.nan], np.zeros((1, 1)), dt=1.0)


def test_input_outside_set_rejected(bicycle):
    with pytest.raises(ValueError):
        integrate(bicycle, [0, 0, 0], [[2.0, 0.0]], dt=0.1)


def test_rk4_fourth_order_on_pendulum():
    pend = make_named_system("pendulum", dict(g_over_l=1.0, u_max=1.0))
    x0 = np.array([1.0, 0.0])
    ref = _final(pend, x0, 1.0, 400)
    e1 = np.linalg.norm(_final(pend, x0, 1.0, 10) - ref)
    e2 = np.linalg.norm(_final(pend, x0, 1.0, 20) - ref)
    assert 12.0 < e1 / e2 < 20.0


def _final(system, x0, t, n):
    _, states = rollout(system, x0, np.zeros((1, 1)), dt=t, substeps=n)
    return states[-1]


def test_bicycle_heading_wraps(bicycle):
    zmax = bicycle.params["zeta_max"]
    rate = np.cos(bicycle_slip(zmax)) * np.tan(zmax)
    period = 2 * np.pi / rate
    n = 400
    _, states = rollout(bicycle, [0, 0, 0.4], np.tile([1.0, zmax], (n, 1)), dt=period / n, substeps=2)
    assert np.all(states[:, 2] >= -np.pi) and np.all(states[:, 2] < np.pi)
    assert abs(states[-1, 2] - 0.4) < 1e-6
    np.testing.assert_allclose(states[-1, :2], [0, 0], atol=1e-6)


def test_ball_set_queries(rng):
    U = InputSet.ball([0.0, 0.0], 2.0)
    u = U.sample(rng, 500)
    assert np.all(U.contains(u))
    np.testing.assert_allclose(U.project([3.0, 4.0]), [1.2, 1.6])
    assert len(U.vertices()) == 4
    np.testing.assert_allclose(np.linalg.norm(U.boundary_samples(rng, 50), axis=1), 2.0)


def test_box_with_min_abs_projection():
    U = InputSet.box([-1.0], [1.0], min_abs=[0.2])
    assert U.project([0.05])[0] == pytest.approx(0.2)
    assert U.project([-0.05])[0] == pytest.approx(-0.2)
    assert not U.contains([0.1])


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_box_projection_idempotent(u):
    U = InputSet.box([-1.0, 0.0, -2.0], [1.0, 0.5, 3.0])
    p = U.project(u)
    assert np.all(U.contains(p))
    np.testing.assert_array_equal(U.project(p), p)
    inside = U.contains(u)
    if inside:
        np.testing.assert_allclose(p, u, atol=1e-9)
