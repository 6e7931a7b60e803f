import math

import numpy as np
import pytest

from advfield.cloudio import PointCloud
from advfield.field import (build_lattice, clamp_field, deform, init_random,
                            lattice_counts, make_bank, plan_deformation,
                            shift_jacobian, anchor, anchored_vectors)
from advfield.geometry import OrientedBox, rot_z

CAR_DIMS = (1.8, 1.6, 4.6)
SENSOR = np.array([0.0, 0.0, 1.7])


def box_cloud(rng, box, n=200, margin=0.95):
    """Random points inside a box plus some background points outside."""
    local = (rng.random((n, 3)) - 0.5) * margin
    local *= [box.length, box.width, box.height]
    inside = box.to_world(local)
    outside = rng.normal(size=(50, 3)) * 20 + [30, 30, 1]
    xyz = np.vstack([inside, outside])
    return PointCloud(xyz, rng.uniform(0.1, 0.9, len(xyz)),
                      np.ones(len(xyz), np.int32), np.ones(len(xyz), np.int32))


class TestLattice:
    def test_car_lattice_count(self):
        assert build_lattice(CAR_DIMS, 0.2).size == 1656

    def test_single_cell(self):
        fld = build_lattice((1.0, 1.0, 1.0), 1.0)
        assert fld.size == 1
        assert np.allclose(fld.roots[0], 0.0)

    def test_person_lattice_matches_counting_oracle(self):
        # oracle: per-axis floor(extent / step) with exact decimal arithmetic
        from fractions import Fraction

        dims = (0.54, 1.7, 0.66)
        step = Fraction(5, 100)
        expected = 1
        for extent in dims:
            expected *= int(Fraction(str(extent)) / step)
        assert expected == 4420
        assert build_lattice(dims, 0.05).size == expected

    def test_counts_per_axis(self):
        assert lattice_counts(CAR_DIMS, 0.2) == (23, 9, 8)

    def test_step_larger_than_extent_rejected(self):
        with pytest.raises(ValueError):
            build_lattice((1.0, 0.4, 2.0), 0.5)

    def test_roots_centered(self):
        fld = build_lattice(CAR_DIMS, 0.2)
        assert np.allclose(fld.roots.mean(axis=0), 0.0, atol=1e-12)
        assert fld.roots[:, 0].max() <= 4.6 / 2
        assert fld.roots[:, 1].max() <= 1.8 / 2
        assert fld.roots[:, 2].max() <= 1.6 / 2


class TestInitRandom:
    def test_deterministic(self):
        a = build_lattice(CAR_DIMS, 0.2)
        b = build_lattice(CAR_DIMS, 0.2)
        init_random(a, 42)
        init_random(b, 42)
        assert np.array_equal(a.vectors, b.vectors)

    def test_bounded_by_one_centimeter(self):
        fld = build_lattice(CAR_DIMS, 0.2)
        init_random(fld, 3)
        assert np.abs(fld.vectors).max() <= 0.01

    def test_different_seeds_differ_almost_everywhere(self):
        a = build_lattice(CAR_DIMS, 0.2)
        b = build_lattice(CAR_DIMS, 0.2)
        init_random(a, 1)
        init_random(b, 2)
        frac_diff = np.mean(a.vectors != b.vectors)
        assert frac_diff >= 0.99


class TestAnchor:
    def test_reference_box_is_identity(self):
        fld = build_lattice(CAR_DIMS, 0.2)
        box = OrientedBox(np.zeros(3), *CAR_DIMS, 0.0)
        assert np.allclose(anchor(fld, box), fld.roots, atol=1e-12)

    def test_per_axis_scaling(self):
        fld = build_lattice(CAR_DIMS, 0.2)
        box = OrientedBox(np.zeros(3), 1.8, 1.6, 9.2, 0.0)  # doubled length
        roots = anchor(fld, box)
        assert np.allclose(roots[:, 0], fld.roots[:, 0] * 2, atol=1e-12)
        assert np.allclose(roots[:, 1:], fld.roots[:, 1:], atol=1e-12)

    def test_quarter_turn_maps_length_to_y(self):
        fld = build_lattice(CAR_DIMS, 0.2)
        box = OrientedBox(np.zeros(3), *CAR_DIMS, math.pi / 2)
        roots = anchor(fld, box)
        oracle = fld.roots @ rot_z(math.pi / 2).T
        assert np.allclose(roots, oracle, atol=1e-12)

    def test_vectors_rotate_but_do_not_scale(self):
        fld = build_lattice(CAR_DIMS, 0.2)
        init_random(fld, 0)
        world = anchored_vectors(fld, math.pi / 2)
        norms = np.linalg.norm(world, axis=1)
        assert np.allclose(norms, np.linalg.norm(fld.vectors[:, :3], axis=1))
        assert np.allclose(world[:, 0], -fld.vectors[:, 1])


class TestPlan:
    def test_weights_split_between_equidistant_roots(self):
        fld = build_lattice((1.0, 1.0, 2.0), 1.0)  # two roots along x
        box = OrientedBox([10.0, 0.0, 0.5], 1.0, 1.0, 2.0, 0.0)
        cloud = PointCloud(np.array([[10.0, 0.0, 0.5]]), [0.5], [1], [1])
        plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
        assert np.allclose(plan.weights, [[0.5, 0.5]])

    def test_point_on_root_takes_full_weight(self):
        fld = build_lattice((1.0, 1.0, 2.0), 1.0)
        box = OrientedBox([10.0, 0.0, 0.5], 1.0, 1.0, 2.0, 0.0)
        root_world = anchor(fld, box)[0]
        cloud = PointCloud(root_world.reshape(1, 3), [0.5], [1], [1])
        plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
        assert plan.weights[0, 0] == 1.0
        assert plan.weights[0, 1] == 0.0

    def test_knn_matches_brute_force(self):
        rng = np.random.default_rng(11)
        box = OrientedBox([12.0, -4.0, 0.8], *CAR_DIMS, 0.6)
        cloud = box_cloud(rng, box, n=450)
        fld = build_lattice(CAR_DIMS, 0.2)
        plan = plan_deformation(cloud, box, fld, SENSOR, k=3)
        roots = anchor(fld, box)
        for row, idx in enumerate(plan.point_idx):
            d = np.linalg.norm(cloud.xyz[idx] - roots, axis=1)
            expected = np.argsort(d, kind="stable")[:3]
            assert np.array_equal(plan.neighbor_idx[row], expected)

    def test_sensor_coincident_point_rejected(self):
        fld = build_lattice((1.0, 1.0, 1.0), 0.5)
        box = OrientedBox(SENSOR, 1.0, 1.0, 1.0, 0.0)
        cloud = PointCloud(SENSOR.reshape(1, 3), [0.5], [1], [1])
        with pytest.raises(ValueError, match="sensor"):
            plan_deformation(cloud, box, fld, SENSOR, k=1)

    def test_weight_normalization_randomized(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            box = OrientedBox(rng.normal(size=3) * 5 + [15, 0, 1],
                              *rng.uniform(0.8, 4.0, 3),
                              rng.uniform(-math.pi, math.pi))
            cloud = box_cloud(rng, box, n=80)
            fld = build_lattice((box.width, box.height, box.length), 0.4)
            plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
            assert np.all(plan.weights >= 0)
            assert np.allclose(plan.weights.sum(axis=1), 1.0, atol=1e-12)


class TestDeform:
    def _setup(self, seed=13, yaw=0.4):
        rng = np.random.default_rng(seed)
        box = OrientedBox([14.0, 5.0, 0.8], *CAR_DIMS, yaw)
        cloud = box_cloud(rng, box)
        fld = build_lattice(CAR_DIMS, 0.2)
        init_random(fld, seed)
        clamp_field(fld, 0.3, 0.3)
        plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
        return cloud, box, fld, plan

    def test_zero_field_is_identity(self):
        cloud, _, fld, plan = self._setup()
        fld.vectors[:] = 0.0
        out = deform(cloud, plan, fld)
        assert np.array_equal(out.xyz, cloud.xyz)
        assert np.array_equal(out.intensity, cloud.intensity)
        assert np.array_equal(out.semantic, cloud.semantic)

    def test_single_colinear_vector_slides_point(self):
        fld = build_lattice((1.0, 1.0, 1.0), 1.0)
        box = OrientedBox([10.0, 0.0, 1.7], 1.0, 1.0, 1.0, 0.0)
        cloud = PointCloud(box.center.reshape(1, 3), [0.5], [1], [1])
        plan = plan_deformation(cloud, box, fld, SENSOR, k=1)
        ray = plan.rays[0]
        fld.vectors[0, :3] = 0.25 * ray
        out = deform(cloud, plan, fld)
        assert np.allclose(out.xyz[0], cloud.xyz[0] + 0.25 * ray, atol=1e-12)

    def test_points_move_only_along_their_rays(self):
        cloud, _, fld, plan = self._setup()
        out = deform(cloud, plan, fld)
        moved = out.xyz[plan.point_idx] - cloud.xyz[plan.point_idx]
        cross = np.cross(moved, plan.rays)
        assert np.abs(cross).max() < 1e-9

    def test_displacement_bounded_by_clamp(self):
        rng = np.random.default_rng(14)
        for trial in range(20):
            box = OrientedBox([12, -3, 0.8], *CAR_DIMS, rng.uniform(-3, 3))
            cloud = box_cloud(rng, box, n=150)
            fld = build_lattice(CAR_DIMS, 0.2)
            fld.vectors[:] = rng.normal(scale=1.0, size=fld.vectors.shape)
            eps = rng.uniform(0.05, 0.4)
            clamp_field(fld, eps, 0.3)
            plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
            out = deform(cloud, plan, fld)
            shift = np.linalg.norm(out.xyz - cloud.xyz, axis=1)
            assert shift.max() <= math.sqrt(3) * eps + 1e-12

    def test_intensity_bounds_and_clip(self):
        rng = np.random.default_rng(15)
        cloud, _, fld, plan = self._setup(seed=16)
        fld.vectors[:, 3] = rng.normal(scale=2.0, size=fld.size)
        psi = 0.25
        clamp_field(fld, 0.3, psi)
        out = deform(cloud, plan, fld)
        assert out.intensity.min() >= 0.0 and out.intensity.max() <= 1.0
        # pre-clip shift is a convex combination of clamped components
        raw_shift = out.intensity[plan.point_idx] - cloud.intensity[plan.point_idx]
        assert np.abs(raw_shift).max() <= psi + 1e-12

    def test_unaffected_points_untouched(self):
        cloud, _, fld, plan = self._setup()
        out = deform(cloud, plan, fld)
        untouched = np.setdiff1d(np.arange(cloud.n), plan.point_idx)
        assert np.array_equal(out.xyz[untouched], cloud.xyz[untouched])
        assert np.array_equal(out.intensity[untouched], cloud.intensity[untouched])

    def test_deterministic(self):
        cloud, _, fld, plan = self._setup(seed=21)
        out1 = deform(cloud, plan, fld)
        out2 = deform(cloud, plan, fld)
        assert np.array_equal(out1.xyz, out2.xyz)
        assert np.array_equal(out1.intensity, out2.intensity)


class TestClamp:
    def test_component_clip(self):
        fld = build_lattice((1, 1, 1), 0.5)
        fld.vectors[0] = [0.5, -0.6, 0.1, 0.9]
        clamp_field(fld, 0.3, 0.3)
        assert fld.vectors[0].tolist() == [0.3, -0.3, 0.1, 0.3]

    def test_feasible_field_unchanged(self):
        fld = build_lattice((1, 1, 1), 0.5)
        init_random(fld, 0)
        before = fld.vectors.copy()
        clamp_field(fld, 0.3, 0.3)
        assert np.array_equal(fld.vectors, before)

    def test_idempotent(self):
        rng = np.random.default_rng(17)
        fld = build_lattice((1, 1, 1), 0.5)
        fld.vectors[:] = rng.normal(scale=1.0, size=fld.vectors.shape)
        clamp_field(fld, 0.2, 0.1)
        once = fld.vectors.copy()
        clamp_field(fld, 0.2, 0.1)
        assert np.array_equal(fld.vectors, once)

    def test_rejects_nonpositive_bounds(self):
        fld = build_lattice((1, 1, 1), 0.5)
        with pytest.raises(ValueError):
            clamp_field(fld, 0.0, 0.1)


class TestShiftJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(18)
        box = OrientedBox([10.0, 2.0, 0.8], *CAR_DIMS, 0.7)
        cloud = box_cloud(rng, box, n=40)
        fld = build_lattice(CAR_DIMS, 0.4)
        init_random(fld, 19)
        plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
        jac = shift_jacobian(plan)
        dpos = rng.normal(size=(plan.n_affected, 3))
        dtau = rng.normal(size=plan.n_affected)
        clip = jac.tau_clip_active(cloud, fld)
        grad = jac.vector_gradient(dpos, dtau, fld.size, clip_active=clip)

        def objective(f):
            out = deform(cloud, plan, f)
            return float((dpos * out.xyz[plan.point_idx]).sum()
                         + (dtau * out.intensity[plan.point_idx]).sum())

        h = 1e-6
        used = np.unique(plan.neighbor_idx)
        checked = 0
        for j in rng.choice(used, min(12, len(used)), replace=False):
            for c in range(4):
                f1, f2 = fld.copy(), fld.copy()
                f1.vectors[j, c] += h
                f2.vectors[j, c] -= h
                fd = (objective(f1) - objective(f2)) / (2 * h)
                rel = abs(fd - grad[j, c]) / max(abs(fd), abs(grad[j, c]), 1e-9)
                assert rel <= 1e-6, (j, c, fd, grad[j, c])
                checked += 1
        assert checked >= 40

    def test_zero_for_non_neighbor_roots(self):
        rng = np.random.default_rng(20)
        box = OrientedBox([10.0, 0.0, 0.8], *CAR_DIMS, 0.0)
        cloud = box_cloud(rng, box, n=10)
        fld = build_lattice(CAR_DIMS, 0.2)
        plan = plan_deformation(cloud, box, fld, SENSOR, k=2)
        jac = shift_jacobian(plan)
        grad = jac.vector_gradient(np.ones((plan.n_affected, 3)),
                                   np.ones(plan.n_affected), fld.size)
        non_neighbors = np.setdiff1d(np.arange(fld.size),
                                     np.unique(plan.neighbor_idx))
        assert np.all(grad[non_neighbors] == 0.0)

    def test_unit_ray_block(self):
        fld = build_lattice((1.0, 1.0, 1.0), 1.0)
        box = OrientedBox([10.0, 0.0, 1.7], 1.0, 1.0, 1.0, 0.0)
        cloud = PointCloud(np.array([[10.5, 0.0, 1.7]]), [0.5], [1], [1])
        plan = plan_deformation(cloud, box, fld, SENSOR, k=1)
        jac = shift_jacobian(plan)
        block = jac.displacement_block(0, int(plan.neighbor_idx[0, 0]))
        e1 = np.array([1.0, 0.0, 0.0])
        assert np.allclose(block, np.outer(e1, e1), atol=1e-12)


def test_make_bank_shapes_and_slots():
    bank = make_bank(1, "car", CAR_DIMS, 0.2, groups=12, variants=6, seed=0)
    assert len(bank.fields) == 72
    assert {(f.group, f.variant) for f in bank.fields} == {
        (g, n) for g in range(1, 13) for n in range(1, 7)}
    total = sum(f.size for f in bank.fields)
    assert total == 119_232
