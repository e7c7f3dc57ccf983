import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqcbf.constraints import make_constraint
from eqcbf.errors import BadParam, EmptyRegion, NoUnitEigenvalue, UnknownTransform
from eqcbf.systems import make_named_system
from eqcbf.transforms import (ParamSet, check_equivariance, check_local, check_roundtrip, check_symmetry,
                              equivariance_residuals, known_transforms, linear_commutation_residual,
                              linear_symmetric_constraints, make_named_transform, mirror_matrix_form,
                              mirror_position, numeric_jacobian, rot, state_difference, wrap_angle)

P_EX = np.array([[-1.0, 2.0], [3.0, 1.0]])

NAMED_CASES = {
    "translate": {},
    "rotate_about_point": dict(cx=1.0, cy=-0.5),
    "polar_shift": {},
    "mirror": dict(xp=[0.5, 1.0]),
    "linear": dict(P=P_EX, fixed={0: 1.0}),
    "ellipse_boundary_shift": dict(a=2.0, b=1.0),
    "corner_pivot": dict(p0=[1.0, 1.0], n1=[1.0, 0.0]),
    "polyline_boundary_shift": dict(vertices=[[0, 0], [2, 0], [2, 1], [0, 1]]),
}


def _domain(d):
    lo = -4 * np.ones(d.state_dim)
    hi = 4 * np.ones(d.state_dim)
    if d.name == "polar_shift":
        lo[0], hi[0] = 0.5, 4.0
    return lo, hi


def test_every_named_transform_is_covered():
    assert set(NAMED_CASES) == set(known_transforms())


@pytest.mark.parametrize("name", sorted(NAMED_CASES))
def test_roundtrip(name):
    d = make_named_transform(name, NAMED_CASES[name])
    assert check_roundtrip(d, n_samples=1000, domain=_domain(d)) <= 1e-9


@pytest.mark.parametrize("name", sorted(NAMED_CASES))
def test_closed_form_jacobian_matches_differences(name, rng):
    d = make_named_transform(name, NAMED_CASES[name])
    lo, hi = _domain(d)
    x = rng.uniform(lo, hi, size=(100, d.state_dim))
    p = d.param_set.sample(rng, 100)
    J = d.jacobian(x, p)
    Jn = numeric_jacobian(lambda z: d.apply_raw(z, d._p(p)), x)
    assert np.max(np.abs(J - Jn)) <= 1e-5 * max(1.0, np.max(np.abs(J)))
    assert np.min(np.abs(np.linalg.det(J))) > 1e-12


def test_bicycle_translation_zero_residual(bicycle):
    D1 = make_named_transform("translate", {})
    rep = check_equivariance(bicycle, D1)
    assert rep.max_residual < 1e-12 and rep.passed and rep.strong


def test_pendulum_negation_strong():
    pend = make_named_system("pendulum", dict(g_over_l=1.0, u_max=1.0))
    D = make_named_transform("linear", dict(Dp=-np.eye(2), Du=-np.eye(1)))
    rep = check_equivariance(pend, D)
    assert rep.passed and rep.strong


def test_single_integrator_rotation_needs_rotated_input():
    si = make_named_system("single_integrator", dict(u_norm_max=1.0))
    bare = make_named_transform("linear", dict(kind="rotation"))
    res = equivariance_residuals(si, bare, np.zeros((1, 2)), np.array([[1.0, 0.0]]), np.array([[np.pi / 2]]))
    assert res[0] == pytest.approx(np.sqrt(2.0))
    assert not check_equivariance(si, bare).passed
    full = make_named_transform("linear", dict(kind="rotation", Du="rotation"))
    rep = check_equivariance(si, full)
    assert rep.passed and rep.strong


def test_box_input_breaks_strong_rotation():
    si = make_named_system("single_integrator", dict(u_max=1.0))
    D = make_named_transform("linear", dict(kind="rotation", Du="rotation"))
    assert not check_equivariance(si, D).strong


def test_bicycle_mirror_with_steering_flip(bicycle):
    rep = check_equivariance(bicycle, make_named_transform("mirror", dict(xp=[1.0, -2.0])))
    assert rep.passed and rep.strong


def test_polar_shift_on_polar_bicycle():
    polar = make_named_system("bicycle_polar", dict(L=1.0, v_min=0.5, v_max=1.0))
    rep = check_equivariance(polar, make_named_transform("polar_shift"), domain=([0.5, -np.pi, -np.pi], [8, np.pi, np.pi]))
    assert rep.passed


def test_rotational_linear_system():
    A = np.array([[-1.0, -2.0], [2.0, -1.0]])
    lin = make_named_system("linear", dict(A=A, B=np.eye(2), u_norm_max=3.0))
    D = make_named_transform("linear", dict(kind="rotation", Du="rotation"))
    rep = check_equivariance(lin, D)
    assert rep.passed and rep.strong


@pytest.mark.parametrize("Dp,Du", [
    (np.eye(2), None),
    (P_EX @ np.diag([1.0, 2.0]) @ np.linalg.inv(P_EX), None),
    (np.array([[0.0, 1.0], [1.0, 0.0]]), None),
    (np.diag([2.0, 1.0]), np.eye(1) * 2.0),
])
def test_linear_verdict_matches_commutation(Dp, Du):
    A = np.array([[1.0, 2.0], [3.0, -4.0]])
    B = np.array([-1.0, 3.0])
    lin = make_named_system("linear", dict(A=A, B=B, u_max=1.0))
    params = dict(Dp=Dp) if Du is None else dict(Dp=Dp, Du=Du)
    rep = check_equivariance(lin, make_named_transform("linear", params))
    closed = linear_commutation_residual(A, B, Dp, Du) <= 1e-9
    assert rep.passed == closed


def test_circle_rotation_symmetry():
    h = make_constraint("circle", dict(cx=1.0, cy=2.0, r=0.7))
    D = make_named_transform("rotate_about_point", dict(cx=1.0, cy=2.0))
    assert check_symmetry(h, D, state_dim=3).max_residual < 1e-12


def test_half_plane_translation_along_wall():
    h = make_constraint("half_plane", dict(n=[1.0, 1.0], x_plane=[1.0, 0.0]))
    along = make_named_transform("translate", dict(normal=[1.0, 1.0]))
    assert check_symmetry(h, along).passed
    free = make_named_transform("translate", {})
    assert not check_symmetry(h, free).passed


@pytest.mark.parametrize("p2", [0.5, 2.0])
def test_linear_example_symmetry(p2):
    h = make_constraint("linear", dict(w=[-1.0, 2.0], C=0.3))
    D = make_named_transform("linear", dict(P=P_EX, values=[[1.0, p2]]))
    assert check_symmetry(h, D).passed


def test_left_eigenvector_constraint():
    Dp = P_EX @ np.diag([1.0, 0.5]) @ np.linalg.inv(P_EX)
    h = linear_symmetric_constraints(Dp, C=1.0)
    w = np.asarray(h.params["w"])
    assert abs(w[0] * 2.0 + w[1] * 1.0) < 1e-9  # parallel to [-1, 2]
    D = make_named_transform("linear", dict(Dp=Dp))
    assert check_symmetry(h, D).passed
    with pytest.raises(NoUnitEigenvalue):
        linear_symmetric_constraints(rot(np.pi / 4))
    assert len(linear_symmetric_constraints(np.eye(2), coefficients=[1, 1]).params["left_eigenvectors"]) == 2
    with pytest.raises(BadParam):
        linear_symmetric_constraints(np.eye(2), coefficients=[1])


def test_segment_wall_local_but_not_global(rng):
    h = make_constraint("segment", dict(p0=[-5.0, 0.0], p1=[5.0, 0.0]))
    D = make_named_transform("translate", dict(normal=[0.0, 1.0], bound=1.0))

    def strip(x):
        return (np.abs(x[..., 0]) <= 3.5) & (np.abs(x[..., 1]) <= 2.0)

    dom = ([-8, -3, -np.pi], [8, 3, np.pi])
    assert check_local(h, D, strip, domain=dom).passed
    assert not check_symmetry(h, make_named_transform("translate", dict(normal=[0.0, 1.0], bound=6.0)), domain=dom).passed
    rep = check_local(h, D, strip, domain=dom)
    assert 0 < rep.survival_fraction < 1
    with pytest.raises(EmptyRegion):
        check_local(h, D, lambda x: x[..., 0] > 100.0, domain=dom)


def test_local_with_whole_domain_matches_global(bicycle):
    D = make_named_transform("translate", {})
    a = check_local(bicycle, D, lambda x: np.ones(len(x), bool))
    b = check_equivariance(bicycle, D)
    assert a.passed == b.passed and a.max_residual == b.max_residual


def test_mirror_formula():
    D = make_named_transform("mirror", dict(rho=0.0))
    np.testing.assert_allclose(D.apply([1.0, 2.0, 0.3]), [-1.0, 2.0, np.pi - 0.3])


def test_mirror_algebraic_forms():
    # the matrix form is a rotation by pi + 2 rho; it meets the reflection
    # only on the line through xp along e1
    rng = np.random.default_rng(1)
    xp = np.array([0.5, -1.0])
    rho = 0.3
    pos = rng.uniform(-3, 3, size=(50, 2))
    assert np.max(np.abs(mirror_position(pos, rho, xp) - mirror_matrix_form(pos, rho, xp))) > 0.1
    line = xp + np.outer(rng.uniform(-3, 3, 20), [1.0, 0.0])
    np.testing.assert_allclose(mirror_position(line, rho, xp), mirror_matrix_form(line, rho, xp), atol=1e-12)
    assert np.linalg.det(np.eye(2) - 2 * np.cos(rho) * rot(rho)) == pytest.approx(1.0)


def test_circle_boundary_shift_is_rotation(rng):
    r = 1.7
    shift = make_named_transform("ellipse_boundary_shift", dict(a=r, b=r))
    rotate = make_named_transform("rotate_about_point", dict(lo=-2 * np.pi, hi=2 * np.pi))
    x = rng.uniform([-4, -4, -np.pi], [4, 4, np.pi], size=(100, 3))
    s = rng.uniform(0, 2 * np.pi, size=(100, 1))
    d = state_difference(shift.apply(x, s), rotate.apply(x, -s), {2: (-np.pi, 2 * np.pi)})
    assert np.max(np.abs(d)) < 1e-9


def test_ellipse_shift_maps_normal_rays(rng):
    a, b = 2.0, 1.0
    shift = make_named_transform("ellipse_boundary_shift", dict(a=a, b=b))
    curve = shift.curve
    for s in rng.uniform(0, 2 * np.pi, size=10):
        phi = float(curve.normal_angle(s))
        n = np.array([np.cos(phi), np.sin(phi)])
        # the outward normal is along the gradient (x / a^2, y / b^2)
        g = curve.point(s) / np.array([a * a, b * b])
        assert n @ (g / np.linalg.norm(g)) == pytest.approx(1.0)
        x = np.concatenate([curve.point(s) + 0.8 * n, [phi]])
        y = shift.apply(x, [s])
        np.testing.assert_allclose(y, [a + 0.8, 0.0, 0.0], atol=1e-9)


def test_unknown_transform():
    with pytest.raises(UnknownTransform):
        make_named_transform("shear")
    with pytest.raises(BadParam):
        make_named_transform("linear", {})
    with pytest.raises(BadParam):
        make_named_transform("linear", dict(kind="rotation", Du="reflection"))


def test_param_sets(rng):
    sub = ParamSet.subspace([1.0, 1.0])
    assert np.all(sub.contains(sub.sample(rng, 100)))
    assert not sub.contains([1.0, 0.0])[0]
    disc = ParamSet.discrete([[1.0], [2.0]])
    assert set(disc.sample(rng, 50)[:, 0]) <= {1.0, 2.0}
    with pytest.raises(BadParam):
        ParamSet.interval(1.0, 0.0)


@settings(deadline=None, max_examples=50)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_rotation_composition(r1, r2, x):
    D = make_named_transform("rotate_about_point", dict(cx=0.3, cy=-1.0, lo=-2 * np.pi, hi=2 * np.pi))
    x = np.asarray(x)
    a = D.apply(D.apply(x, [r2]), [r1])
    b = D.apply(x, [r1 + r2])
    assert np.max(np.abs(state_difference(a, b, D.periodic))) < 1e-9


@settings(deadline=None, max_examples=50)
@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi <= w < np.pi
    assert abs(np.sin(w) - np.sin(a)) < 1e-9 and abs(np.cos(w) - np.cos(a)) < 1e-9
