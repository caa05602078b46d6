import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_vectors
from raysurrogate.geometry import (
    AngleAction,
    GeometryError,
    Surface,
    angle_between,
    angles_from_dir,
    angles_from_dirs,
    angular_distance,
    dir_from_angles,
    dirs_from_angles,
    in_bounds,
    intersect,
    reflect,
)


@pytest.mark.parametrize("phi,theta,expected", [
    (0.0, math.pi / 2, (1, 0, 0)),
    (1.234, 0.0, (0, 0, 1)),
    (math.pi / 2, math.pi / 2, (0, 1, 0)),
])
def test_dir_from_angles_convention(phi, theta, expected):
    np.testing.assert_allclose(dir_from_angles(AngleAction(phi, theta)), expected, atol=1e-15)


def test_angles_from_dir_pole_and_equator():
    a = angles_from_dir([0, 0, 1])
    assert (a.phi, a.theta) == (0.0, 0.0)
    b = angles_from_dir([1, 0, 0])
    assert b.phi == 0.0 and b.theta == pytest.approx(math.pi / 2, abs=1e-15)


def test_round_trip_1000_random_vectors():
    for v in unit_vectors(1000):
        np.testing.assert_allclose(dir_from_angles(angles_from_dir(v)), v, atol=1e-9)


def test_batched_conversions_match_scalar():
    v = unit_vectors(200, seed=3)
    ang = angles_from_dirs(v)
    for row, vec in zip(ang, v):
        a = angles_from_dir(vec)
        assert row[0] == pytest.approx(a.phi, abs=1e-12) and row[1] == pytest.approx(a.theta, abs=1e-12)
    np.testing.assert_allclose(dirs_from_angles(ang), v, atol=1e-12)


def test_phi_wrapped_and_theta_checked():
    assert AngleAction(-math.pi / 2, 1.0).phi == pytest.approx(1.5 * math.pi)
    assert AngleAction(2 * math.pi, 1.0).phi == 0.0
    with pytest.raises(GeometryError):
        AngleAction(0.0, 4.0)
    with pytest.raises(GeometryError):
        AngleAction(float("nan"), 1.0)
    with pytest.raises(GeometryError):
        angles_from_dir([2.0, 0.0, 0.0])


def test_angular_distance_examples():
    a = AngleAction(0.0, math.pi / 2)
    assert angular_distance(a, a) == 0.0
    assert angular_distance(a, AngleAction(math.pi, math.pi / 2)) == pytest.approx(math.pi)
    assert angular_distance(a, AngleAction(math.pi / 2, math.pi / 2)) == pytest.approx(math.pi / 2)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, math.pi), st.floats(0, 2 * math.pi), st.floats(0, math.pi))
def test_angular_distance_is_a_metric_on_the_sphere(p1, t1, p2, t2):
    a, b = AngleAction(p1, t1), AngleAction(p2, t2)
    d = angular_distance(a, b)
    assert 0.0 <= d <= math.pi + 1e-12
    assert d == pytest.approx(angular_distance(b, a), abs=1e-12)
    # independent oracle: arccos of the dot product, away from its ill-conditioned ends
    c = float(np.dot(dir_from_angles(a), dir_from_angles(b)))
    if abs(c) < 0.999:
        assert d == pytest.approx(math.acos(c), abs=1e-9)


def wall_x10():
    return Surface(0, 10.0, (0.0, 0.0), (10.0, 3.0))


def test_intersect_examples():
    p, t = intersect([5, 5, 1.5], [1, 0, 0], wall_x10())
    np.testing.assert_allclose(p, [10, 5, 1.5])
    assert t == pytest.approx(5.0)
    assert intersect([5, 5, 1.5], [0, 1, 0], wall_x10()) is None
    assert intersect([10, 5, 1.5], [-1, 0, 0], wall_x10()) is None
    assert intersect([10, 5, 1.5], [1, 0, 0], wall_x10()) is None  # on the surface: distance guard
    assert intersect([5, 5, 1.5], [1, 0, 0.5 / math.sqrt(1.25) * 2], wall_x10()) is None  # misses the rectangle


def test_reflect_examples():
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(reflect([s, 0, -s], [0, 0, 1]), [s, 0, s], atol=1e-15)
    np.testing.assert_allclose(reflect([0, 0, -1], [0, 0, 1]), [0, 0, 1])


def test_reflect_preserves_tangential_component():
    rng = np.random.default_rng(1)
    for v in unit_vectors(100, seed=2):
        n = np.zeros(3)
        n[rng.integers(0, 3)] = 1.0
        r = reflect(v, n)
        np.testing.assert_allclose(r - np.dot(r, n) * n, v - np.dot(v, n) * n, atol=1e-15)
        assert np.dot(r, n) == pytest.approx(-np.dot(v, n))
        assert np.linalg.norm(r) == pytest.approx(1.0)


def test_in_bounds_is_closed(box):
    assert in_bounds(box, [5, 5, 1.5])
    assert in_bounds(box, [0, 0, 0]) and in_bounds(box, [10, 10, 3])
    for k in range(3):
        p = np.array([5.0, 5.0, 1.5])
        p[k] = -1e-3
        assert not in_bounds(box, p)
        p[k] = box.bounds_max[k] + 1e-3
        assert not in_bounds(box, p)


def test_angle_between_stable_for_near_parallel():
    u = np.array([1.0, 0.0, 0.0])
    v = np.array([1.0, 1e-9, 0.0])
    assert angle_between(u, v / np.linalg.norm(v)) == pytest.approx(1e-9, rel=1e-6)
