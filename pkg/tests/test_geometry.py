import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advfield.geometry import (OrientedBox, Ray, RigidTransform, bearing,
                               box_contains, box_contains_many, iou_3d,
                               project_onto_ray, rot_z, wrap_2pi, wrap_pi)

unit_interval = st.floats(-1.0, 1.0)


def random_ray(rng):
    d = rng.normal(size=3)
    return Ray(rng.normal(size=3), d / np.linalg.norm(d))


class TestRay:
    def test_direction_must_be_unit(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))

    def test_through_builds_unit_direction(self):
        ray = Ray.through([0, 0, 0], [0, 3, 4])
        assert np.allclose(ray.direction, [0, 0.6, 0.8])

    def test_through_rejects_coincident_points(self):
        with pytest.raises(ValueError):
            Ray.through([1, 2, 3], [1, 2, 3])


class TestProjection:
    def test_orthogonal_vector_projects_to_zero(self):
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        assert np.allclose(project_onto_ray([0, 2, 3], ray), 0.0)

    def test_vector_on_ray_is_fixed_point(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(project_onto_ray([0, 0, 1], ray), [0, 0, 1])

    def test_hand_dot_product_case(self):
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        assert np.allclose(project_onto_ray([1, 1, 0], ray), [1, 0, 0])

    def test_idempotent_and_contractive(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            ray = random_ray(rng)
            v = rng.normal(size=3) * rng.uniform(0, 5)
            p = project_onto_ray(v, ray)
            assert np.allclose(project_onto_ray(p, ray), p, atol=1e-12)
            assert np.linalg.norm(p) <= np.linalg.norm(v) + 1e-12

    @given(st.lists(unit_interval, min_size=3, max_size=3),
           st.floats(0.0, 2 * math.pi))
    def test_projection_colinear_with_direction(self, v, angle):
        d = np.array([math.cos(angle), math.sin(angle), 0.0])
        ray = Ray(np.zeros(3), d)
        p = project_onto_ray(np.array(v), ray)
        assert np.linalg.norm(np.cross(p, d)) < 1e-9


class TestOrientedBox:
    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            OrientedBox(np.zeros(3), 0.0, 1.0, 1.0, 0.0)

    def test_yaw_wrapped_to_half_open_interval(self):
        box = OrientedBox(np.zeros(3), 1, 1, 1, math.pi)
        assert -math.pi <= box.yaw < math.pi

    def test_contains_center(self):
        box = OrientedBox([1, 2, 3], 1.0, 2.0, 3.0, 0.7)
        assert box_contains(box, [1, 2, 3])

    def test_corner_epsilon_outside(self):
        box = OrientedBox(np.zeros(3), 2.0, 2.0, 2.0, 0.0)
        assert box_contains(box, [1.0, 1.0, 1.0])
        assert not box_contains(box, [1.0 + 1e-9, 1.0, 1.0])

    def test_membership_matches_rotation_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            box = OrientedBox(rng.normal(size=3), *rng.uniform(0.5, 3.0, 3),
                              rng.uniform(-math.pi, math.pi))
            p = rng.normal(scale=2.0, size=3)
            # oracle: explicit inverse rotation then axis-aligned comparison
            c, s = math.cos(-box.yaw), math.sin(-box.yaw)
            rel = p - box.center
            local = np.array([c * rel[0] - s * rel[1],
                              s * rel[0] + c * rel[1], rel[2]])
            expected = (abs(local[0]) <= box.length / 2
                        and abs(local[1]) <= box.width / 2
                        and abs(local[2]) <= box.height / 2)
            assert box_contains(box, p) == expected

    def test_vectorized_membership_agrees(self):
        rng = np.random.default_rng(4)
        box = OrientedBox([0, 1, 0], 1.5, 1.0, 3.0, 0.4)
        pts = rng.normal(scale=1.5, size=(500, 3))
        mask = box_contains_many(box, pts)
        assert mask.tolist() == [box_contains(box, p) for p in pts]


class TestIou3d:
    def test_identical_boxes(self):
        box = OrientedBox([1, 2, 0.5], 1.8, 1.6, 4.6, 0.3)
        assert iou_3d(box, box) == 1.0

    def test_disjoint_boxes(self):
        a = OrientedBox(np.zeros(3), 1, 1, 1, 0.0)
        b = OrientedBox([10, 0, 0], 1, 1, 1, 0.4)
        assert iou_3d(a, b) == 0.0

    def test_unit_cubes_half_offset(self):
        a = OrientedBox(np.zeros(3), 1, 1, 1, 0.0)
        b = OrientedBox([0.5, 0, 0], 1, 1, 1, 0.0)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_equal_yaw_exact_after_rotation(self):
        a = OrientedBox(np.zeros(3), 1, 1, 1, 0.9)
        offset = rot_z(0.9) @ np.array([0.5, 0.0, 0.0])
        b = OrientedBox(offset, 1, 1, 1, 0.9)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_monte_carlo_fallback_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            a = OrientedBox(rng.normal(scale=0.5, size=3), *rng.uniform(0.8, 2.5, 3),
                            rng.uniform(-math.pi, math.pi))
            b = OrientedBox(rng.normal(scale=0.5, size=3), *rng.uniform(0.8, 2.5, 3),
                            rng.uniform(-math.pi, math.pi))
            assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=0.01)

    def test_monte_carlo_tracks_exact_for_tiny_yaw_gap(self):
        a = OrientedBox(np.zeros(3), 1, 1, 1, 0.0)
        b = OrientedBox([0.5, 0, 0], 1, 1, 1, 1e-6)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=0.01)


class TestBearing:
    def test_plus_x_axis(self):
        assert bearing([1.0, 0.0, 5.0], [0, 0, 0]) == 0.0

    def test_plus_y_axis(self):
        assert bearing([0.0, 1.0, -2.0], [0, 0, 0]) == pytest.approx(math.pi / 2)

    def test_third_quadrant_hand_check(self):
        assert bearing([-1.0, -1.0, 0.3], [0, 0, 0]) == pytest.approx(5 * math.pi / 4)

    def test_degenerate_vertical(self):
        with pytest.raises(ValueError):
            bearing([0.0, 1e-12, 4.0], [0, 0, 0])

    def test_rotation_shifts_bearing(self):
        rng = np.random.default_rng(6)
        sensor = np.array([0.5, -0.2, 1.7])
        for _ in range(300):
            p = sensor + rng.normal(size=3) * [5, 5, 1] + [3, 0, 0]
            if math.hypot(*(p - sensor)[:2]) < 1e-6:
                continue
            delta = rng.uniform(0, 2 * math.pi)
            rotated = rot_z(delta) @ (p - sensor) + sensor
            got = bearing(rotated, sensor)
            expected = wrap_2pi(bearing(p, sensor) + delta)
            assert math.isclose(got, expected, abs_tol=1e-9) or \
                math.isclose(abs(got - expected), 2 * math.pi, abs_tol=1e-9)


class TestRigidTransform:
    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            t = RigidTransform(rng.uniform(-math.pi, math.pi), rng.normal(size=3))
            both = t.compose(t.inverse())
            pts = rng.normal(size=(10, 3))
            assert np.allclose(both.apply(pts), pts, atol=1e-12)

    def test_composition_associative(self):
        rng = np.random.default_rng(9)
        a, b, c = (RigidTransform(rng.uniform(-3, 3), rng.normal(size=3))
                   for _ in range(3))
        pts = rng.normal(size=(20, 3))
        left = a.compose(b).compose(c).apply(pts)
        right = a.compose(b.compose(c)).apply(pts)
        assert np.allclose(left, right, atol=1e-10)


def test_wrap_helpers():
    assert wrap_pi(math.pi) == pytest.approx(-math.pi)
    assert wrap_2pi(-0.1) == pytest.approx(2 * math.pi - 0.1)
    assert float(wrap_2pi(2 * math.pi)) in (0.0, pytest.approx(0.0))
