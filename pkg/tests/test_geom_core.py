"""
Tests for the geometry core: boxes, frames, voxelization, cameras and
back-projection.

Run:
    python -m pytest tests/test_geom_core.py -v
"""

import numpy as np
import pytest

from scenefix.errors import ContractViolation, EmptyGeometry
from scenefix.geom_core import (
    AABB,
    EPS_MIN_SIDE,
    Camera,
    CubeFrame,
    OccGrid,
    PointCloud,
    aabb_iou,
    backproject_depth,
    compute_aabb,
    cubify,
    denormalize_points,
    expand_bound,
    grid_iou,
    grid_to_pointcloud,
    normalize_points,
    surface_voxel_mask,
    tight_box_of_grid,
    union_box,
    voxelize,
)


def unit_frame(resolution=4) -> CubeFrame:
    return CubeFrame(AABB([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]), resolution)


# ─────────────────────────────────────────────────────────────
# Types
# ─────────────────────────────────────────────────────────────


class TestPointCloud:
    def test_rejects_non_finite(self):
        with pytest.raises(ContractViolation):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_rejects_color_count_mismatch(self):
        with pytest.raises(ContractViolation):
            PointCloud(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_rejects_colors_outside_unit_range(self):
        with pytest.raises(ContractViolation):
            PointCloud(np.zeros((1, 3)), [[0.0, 1.5, 0.0]])

    def test_points_are_read_only(self):
        pc = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            pc.points[0, 0] = 1.0

    def test_concat_keeps_colors_only_when_all_have_them(self):
        a = PointCloud(np.zeros((2, 3)), np.zeros((2, 3)))
        b = PointCloud(np.ones((1, 3)))
        assert len(PointCloud.concat([a, b])) == 3
        assert PointCloud.concat([a, b]).colors is None
        assert PointCloud.concat([a, a]).colors.shape == (4, 3)

    def test_concat_of_nothing_is_empty(self):
        assert PointCloud.concat([]).is_empty


class TestAABB:
    def test_rejects_inverted_corners(self):
        with pytest.raises(ContractViolation):
            AABB([1.0, 0.0, 0.0], [0.0, 1.0, 1.0])

    def test_touching_boxes_do_not_overlap(self):
        a = AABB([0, 0, 0], [1, 1, 1])
        b = AABB([1, 0, 0], [2, 1, 1])
        assert not a.overlaps(b)
        assert a.overlaps(AABB([0.5, 0.5, 0.5], [2, 2, 2]))

    def test_contains_is_inclusive(self):
        outer = AABB([0, 0, 0], [2, 2, 2])
        assert outer.contains(AABB([0, 0, 0], [2, 2, 2]))
        assert outer.contains(AABB([0.5, 0.5, 0.5], [1, 1, 1]))
        assert not outer.contains(AABB([0.5, 0.5, 0.5], [2.1, 1, 1]))

    def test_scaled_keeps_center(self):
        box = AABB([0, 0, 0], [2, 4, 6]).scaled(0.5)
        np.testing.assert_allclose(box.center, [1, 2, 3])
        np.testing.assert_allclose(box.extent, [1, 2, 3])

    def test_list_round_trip(self):
        box = AABB([0.1, -0.2, 0.0], [0.3, 0.4, 0.5])
        assert AABB.from_list(box.to_list()) == box

    def test_union_of_zero_boxes_raises(self):
        with pytest.raises(EmptyGeometry):
            union_box([])


class TestCubeFrame:
    def test_rejects_non_cube(self):
        with pytest.raises(ContractViolation):
            CubeFrame(AABB([0, 0, 0], [1, 1, 2]), 4)

    def test_rejects_tiny_resolution(self):
        with pytest.raises(ContractViolation):
            CubeFrame(AABB([0, 0, 0], [1, 1, 1]), 1)

    def test_around_uses_max_side(self):
        box = AABB([0, 0, 0], [1, 2, 0.5])
        frame = CubeFrame.around(box, 8)
        assert frame.side == pytest.approx(2.0)
        np.testing.assert_allclose(frame.center, box.center)
        assert frame.world_box.contains(box)

    def test_voxel_centers(self):
        frame = unit_frame(4)
        np.testing.assert_allclose(frame.voxel_centers([[0, 0, 0], [3, 3, 3]]),
                                   [[0.125] * 3, [0.875] * 3])


# ─────────────────────────────────────────────────────────────
# Voxelization
# ─────────────────────────────────────────────────────────────


class TestVoxelize:
    def test_max_face_lands_in_last_cell(self):
        grid = voxelize(PointCloud([[1.0, 1.0, 1.0]]), unit_frame(4))
        assert grid.binary()[3, 3, 3]
        assert grid.binary().sum() == 1

    def test_cells_are_half_open(self):
        grid = voxelize(PointCloud([[0.25, 0.0, 0.0]]), unit_frame(4))
        assert grid.binary()[1, 0, 0]

    def test_points_outside_are_dropped_and_counted(self):
        pc = PointCloud([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [-0.1, 0.0, 0.0]])
        grid = voxelize(pc, unit_frame(4))
        assert grid.dropped_points == 2
        assert grid.binary().sum() == 1

    def test_empty_cloud_gives_empty_grid(self):
        grid = voxelize(PointCloud.empty(), unit_frame(4))
        assert not grid.binary().any()

    def test_normalize_maps_frame_onto_unit_cube(self):
        frame = CubeFrame(AABB([2, 2, 2], [4, 4, 4]), 8)
        pc = PointCloud([[2, 2, 2], [4, 4, 4], [3, 3, 3]])
        n = normalize_points(pc, frame).points
        np.testing.assert_allclose(n, [[-0.5] * 3, [0.5] * 3, [0.0] * 3])
        np.testing.assert_allclose(denormalize_points(PointCloud(n), frame).points, pc.points)

    def test_grid_rejects_values_outside_unit_range(self):
        with pytest.raises(ContractViolation):
            OccGrid(unit_frame(2), np.full((2, 2, 2), 1.5))

    def test_grid_rejects_wrong_shape(self):
        with pytest.raises(ContractViolation):
            OccGrid(unit_frame(2), np.zeros((2, 2, 3)))


class TestGridReadouts:
    def test_tight_box_of_single_voxel_is_its_cell(self):
        occ = np.zeros((4, 4, 4), dtype=np.float32)
        occ[1, 2, 3] = 1.0
        box = tight_box_of_grid(OccGrid(unit_frame(4), occ))
        np.testing.assert_allclose(box.min_corner, [0.25, 0.5, 0.75])
        np.testing.assert_allclose(box.max_corner, [0.5, 0.75, 1.0])

    def test_tight_box_of_empty_grid_raises(self):
        with pytest.raises(EmptyGeometry):
            tight_box_of_grid(OccGrid(unit_frame(4), np.zeros((4, 4, 4))))

    def test_tight_box_respects_threshold(self):
        occ = np.zeros((4, 4, 4), dtype=np.float32)
        occ[0, 0, 0] = 0.5
        occ[3, 3, 3] = 0.9
        box = tight_box_of_grid(OccGrid(unit_frame(4), occ))
        np.testing.assert_allclose(box.min_corner, [0.75] * 3)

    def test_grid_to_pointcloud_carries_colors(self):
        occ = np.zeros((2, 2, 2), dtype=np.float32)
        occ[1, 0, 1] = 1.0
        rgb = np.zeros((2, 2, 2, 3), dtype=np.float32)
        rgb[1, 0, 1] = [0.2, 0.4, 0.6]
        pc = grid_to_pointcloud(OccGrid(unit_frame(2), occ, rgb))
        np.testing.assert_allclose(pc.points, [[0.75, 0.25, 0.75]])
        np.testing.assert_allclose(pc.colors, [[0.2, 0.4, 0.6]], atol=1e-6)

    def test_surface_voxels_of_solid_cube(self):
        occ = np.zeros((5, 5, 5), dtype=bool)
        occ[1:4, 1:4, 1:4] = True
        surface = surface_voxel_mask(occ)
        assert surface.sum() == 26
        assert not surface[2, 2, 2]

    def test_grid_iou(self):
        a = np.zeros((2, 2, 2), dtype=np.float32)
        b = np.zeros((2, 2, 2), dtype=np.float32)
        a[0, 0, :] = 1.0
        b[0, 0, 0] = 1.0
        frame = unit_frame(2)
        assert grid_iou(OccGrid(frame, a), OccGrid(frame, b)) == pytest.approx(0.5)
        assert grid_iou(OccGrid(frame, b * 0), OccGrid(frame, b * 0)) == 0.0


# ─────────────────────────────────────────────────────────────
# Boxes
# ─────────────────────────────────────────────────────────────


class TestBoxOps:
    def test_iou_identical_disjoint_and_partial(self):
        a = AABB([0, 0, 0], [1, 1, 1])
        assert aabb_iou(a, a) == pytest.approx(1.0)
        assert aabb_iou(a, AABB([2, 2, 2], [3, 3, 3])) == 0.0
        assert aabb_iou(a, AABB([0.5, 0, 0], [1.5, 1, 1])) == pytest.approx(1 / 3)

    def test_iou_of_flat_boxes_is_zero(self):
        flat = AABB([0, 0, 0], [1, 1, 0])
        assert aabb_iou(flat, flat) == 0.0

    def test_cubify(self):
        cube = cubify(AABB([0, 0, 0], [2, 1, 1]))
        np.testing.assert_allclose(cube.extent, [2, 2, 2])
        np.testing.assert_allclose(cube.center, [1, 0.5, 0.5])

    def test_expand_bound_side_and_center(self):
        b_vis = AABB([0, 0, 0], [0.2, 0.1, 0.05])
        b_exp = expand_bound(b_vis, 4.0)
        np.testing.assert_allclose(b_exp.extent, [0.8, 0.8, 0.8])
        np.testing.assert_allclose(b_exp.center, b_vis.center)
        assert b_exp.contains(b_vis)

    def test_expand_bound_of_a_point(self):
        b_exp = expand_bound(AABB([1, 1, 1], [1, 1, 1]), 4.0)
        np.testing.assert_allclose(b_exp.extent, [4 * EPS_MIN_SIDE] * 3)

    def test_expand_bound_rejects_non_positive_factor(self):
        with pytest.raises(ContractViolation):
            expand_bound(AABB([0, 0, 0], [1, 1, 1]), 0.0)

    def test_compute_aabb_of_empty_cloud_raises(self):
        with pytest.raises(EmptyGeometry):
            compute_aabb(PointCloud.empty())


# ─────────────────────────────────────────────────────────────
# Cameras
# ─────────────────────────────────────────────────────────────


class TestCamera:
    def test_look_at_projects_target_to_principal_point(self):
        cam = Camera.look_at([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 32, 24)
        u, v, z = cam.project(np.zeros((1, 3)))
        assert u[0] == pytest.approx(16.0)
        assert v[0] == pytest.approx(12.0)
        assert z[0] == pytest.approx(np.sqrt(3.0))

    def test_look_at_straight_down_is_valid(self):
        cam = Camera.look_at([0.0, 0.0, 2.0], [0.0, 0.0, 0.0], 16, 16)
        rot = cam.world_to_cam[:3, :3]
        np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-9)

    def test_rejects_non_orthonormal_rotation(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(ContractViolation):
            Camera(np.array([[10, 0, 8], [0, 10, 8], [0, 0, 1.0]]), m, 16, 16)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ContractViolation):
            Camera(np.array([[10, 0, 8], [0, 10, 8], [0, 1.0, 1.0]]), np.eye(4), 16, 16)

    def test_pixel_rays_have_unit_camera_depth(self):
        cam = Camera.look_at([1.0, -1.0, 1.5], [0.0, 0.0, 0.0], 8, 6)
        origin, dirs = cam.pixel_rays()
        depth_of_unit_step = cam.to_camera(origin + dirs.reshape(-1, 3))[:, 2]
        np.testing.assert_allclose(depth_of_unit_step, 1.0, atol=1e-9)


class TestBackproject:
    def test_points_reproject_to_pixel_centers(self):
        cam = Camera.look_at([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 12, 10)
        depth = np.full((10, 12), 1.5, dtype=np.float32)
        mask = np.zeros((10, 12), dtype=bool)
        mask[2, 3] = mask[7, 9] = True
        pc = backproject_depth(depth, mask, cam)
        u, v, z = cam.project(pc.points)
        np.testing.assert_allclose(u, [3.5, 9.5], atol=1e-9)
        np.testing.assert_allclose(v, [2.5, 7.5], atol=1e-9)
        np.testing.assert_allclose(z, 1.5, atol=1e-9)

    def test_empty_mask_gives_empty_cloud(self):
        cam = Camera.look_at([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 4, 4)
        pc = backproject_depth(np.ones((4, 4)), np.zeros((4, 4), dtype=bool), cam)
        assert pc.is_empty

    def test_shape_mismatch_raises(self):
        cam = Camera.look_at([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 4, 4)
        with pytest.raises(ContractViolation):
            backproject_depth(np.ones((4, 5)), np.ones((4, 5), dtype=bool), cam)

    def test_zero_depth_under_mask_raises(self):
        cam = Camera.look_at([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 4, 4)
        with pytest.raises(ContractViolation):
            backproject_depth(np.zeros((4, 4)), np.ones((4, 4), dtype=bool), cam)
