"""
Tests for view decomposition: the depth-estimator surrogate, depth mixing,
fragment extraction and visibility ratios.

Run:
    python -m pytest tests/test_view_decomp.py -v
"""

import numpy as np
import pytest

from scenefix.errors import ContractViolation, EmptyGeometry
from scenefix.geom_core import AABB, Camera, CubeFrame, OccGrid
from scenefix.rasterizer import render
from scenefix.scene_forge import InstanceRecord, Primitive, sample_surface
from scenefix.seeding import child_rng
from scenefix.view_decomp import (
    ESTIMATOR_PROFILES,
    MIN_FRAGMENT_PIXELS,
    DepthMix,
    best_view,
    extract_fragment,
    grid_visibility_ratio,
    mix_depth,
    perturb_depth,
    visibility_ratio,
)
from tests.conftest import SMALL_MIN_PIXELS, largest_in_view, with_sliver

# ─────────────────────────────────────────────────────────────
# Depth estimator surrogate
# ─────────────────────────────────────────────────────────────


class TestPerturbDepth:
    def test_zero_severity_is_identity(self, small_scene):
        d = small_scene.depths[0]
        out = perturb_depth(d, np.random.default_rng(0), 0.0)
        np.testing.assert_array_equal(out, d)
        assert out.dtype == d.dtype

    def test_background_stays_empty(self, small_scene):
        d = small_scene.depths[0].copy()
        d[:4, :4] = 0.0
        out = perturb_depth(d, np.random.default_rng(1), 0.5)
        assert np.all(out[d == 0] == 0)
        assert np.all(out[d > 0] > 0)

    def test_same_stream_same_field(self, small_scene):
        d = small_scene.depths[0]
        a = perturb_depth(d, child_rng(3, "est"), 0.1)
        b = perturb_depth(d, child_rng(3, "est"), 0.1)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, d)

    def test_rejects_negative_severity(self):
        with pytest.raises(ContractViolation):
            perturb_depth(np.ones((4, 4)), np.random.default_rng(0), -0.1)

    def test_rejects_unknown_profile(self):
        with pytest.raises(ContractViolation):
            perturb_depth(np.ones((4, 4)), np.random.default_rng(0), 0.1, profile="oracle")

    @pytest.mark.parametrize("profile", list(ESTIMATOR_PROFILES))
    def test_every_profile_keeps_depth_positive(self, small_scene, profile):
        d = small_scene.depths[1]
        out = perturb_depth(d, np.random.default_rng(4), 1.0, profile)
        assert np.all(out[d > 0] > 0)

    def test_pixel_noise_is_additive(self):
        d = np.ones((64, 64), dtype=np.float32)
        d[:, 32:] = 4.0
        est = perturb_depth(d, np.random.default_rng(6), 0.1, profile="noise").astype(np.float64)
        # neighbor differences cancel the smooth warp and keep the per-pixel noise
        near = np.diff(est[:, :32] - d[:, :32], axis=1).std()
        far = np.diff(est[:, 32:] - d[:, 32:], axis=1).std()
        assert far / near == pytest.approx(1.0, abs=0.2)
        # the noise is scaled by the median foreground depth (2.5 here)
        expected = 0.1 * ESTIMATOR_PROFILES["noise"][1] * 2.5 * np.sqrt(2.0)
        assert near == pytest.approx(expected, rel=0.1)

    def test_relative_error_at_default_severity(self, small_scene):
        errors = []
        for k in range(40):
            d = small_scene.depths[k % small_scene.n_views]
            fg = d > 0
            est = perturb_depth(d, child_rng(5, "mare", k), 0.1)
            errors.append(np.abs(est[fg].astype(np.float64) - d[fg]) / d[fg])
        mare = float(np.concatenate(errors).mean())
        assert 0.02 <= mare <= 0.15


class TestMixDepth:
    def test_endpoints_are_exact(self):
        rng = np.random.default_rng(0)
        d_gt = rng.uniform(0.5, 2.0, (6, 5)).astype(np.float32)
        d_est = rng.uniform(0.5, 2.0, (6, 5)).astype(np.float32)
        np.testing.assert_array_equal(mix_depth(d_gt, d_est, 0.0), d_gt)
        np.testing.assert_array_equal(mix_depth(d_gt, d_est, 1.0), d_est)

    def test_midpoint(self):
        out = mix_depth(np.full((2, 2), 1.0), np.full((2, 2), 3.0), 0.25)
        np.testing.assert_allclose(out, 1.5)

    def test_rejects_alpha_out_of_range(self):
        with pytest.raises(ContractViolation):
            mix_depth(np.ones((2, 2)), np.ones((2, 2)), 1.5)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            mix_depth(np.ones((2, 2)), np.ones((2, 3)), 0.5)

    def test_depth_mix_property(self):
        mix = DepthMix(np.full((2, 2), 2.0), np.full((2, 2), 4.0), 0.5)
        np.testing.assert_allclose(mix.d, 3.0)


# ─────────────────────────────────────────────────────────────
# Fragments
# ─────────────────────────────────────────────────────────────


class TestExtractFragment:
    def test_ground_truth_points_lie_on_the_instance(self, small_scene):
        iid = small_scene.instance_ids[0]
        view = best_view(small_scene, iid)
        frag = extract_fragment(small_scene, view, iid, 0.0, np.random.default_rng(0),
                                min_pixels=SMALL_MIN_PIXELS)
        np.testing.assert_array_equal(frag.mask, small_scene.instids[view] == iid)
        assert len(frag.points) == frag.pixel_count
        dist = small_scene.instance(iid).surface_distance(frag.points.points)
        assert dist.max() < 1e-4

    def test_shared_estimate_is_used(self, small_scene):
        iid = small_scene.instance_ids[0]
        view = best_view(small_scene, iid)
        d_est = small_scene.depths[view] * 1.1
        frag = extract_fragment(small_scene, view, iid, 1.0, None, d_est=d_est,
                                min_pixels=SMALL_MIN_PIXELS)
        np.testing.assert_array_equal(frag.depth, d_est)

    def test_best_view_has_most_pixels(self, small_scene):
        for iid in small_scene.instance_ids:
            counts = [int((ids == iid).sum()) for ids in small_scene.instids]
            assert counts[best_view(small_scene, iid)] == max(counts)

    def test_invisible_instance(self, small_scene):
        with pytest.raises(EmptyGeometry):
            extract_fragment(small_scene, 0, 999, 0.0, np.random.default_rng(0))

    def test_view_out_of_range(self, small_scene):
        with pytest.raises(ContractViolation):
            extract_fragment(small_scene, small_scene.n_views, 1, 0.0, np.random.default_rng(0))

    @pytest.mark.parametrize("keep", [1, MIN_FRAGMENT_PIXELS - 1])
    def test_sliver_below_threshold_is_not_visible(self, small_scene, keep):
        iid = largest_in_view(small_scene, 0)
        assert int((small_scene.instids[0] == iid).sum()) >= MIN_FRAGMENT_PIXELS
        sliver = with_sliver(small_scene, 0, iid, keep)
        assert int((sliver.instids[0] == iid).sum()) == keep
        with pytest.raises(EmptyGeometry, match="below the visibility threshold"):
            extract_fragment(sliver, 0, iid, 1.0, np.random.default_rng(0))

    def test_threshold_is_inclusive(self, small_scene):
        iid = largest_in_view(small_scene, 0)
        sliver = with_sliver(small_scene, 0, iid, MIN_FRAGMENT_PIXELS)
        frag = extract_fragment(sliver, 0, iid, 0.0, np.random.default_rng(0))
        assert frag.pixel_count == MIN_FRAGMENT_PIXELS
        assert len(frag.points) == MIN_FRAGMENT_PIXELS

    def test_threshold_can_be_lowered(self, small_scene):
        iid = largest_in_view(small_scene, 0)
        sliver = with_sliver(small_scene, 0, iid, 1)
        frag = extract_fragment(sliver, 0, iid, 0.0, np.random.default_rng(0), min_pixels=1)
        assert frag.pixel_count == 1

    def test_rejects_non_positive_threshold(self, small_scene):
        iid = largest_in_view(small_scene, 0)
        with pytest.raises(ContractViolation):
            extract_fragment(small_scene, 0, iid, 0.0, np.random.default_rng(0), min_pixels=0)


# ─────────────────────────────────────────────────────────────
# Visibility
# ─────────────────────────────────────────────────────────────


def _single_voxel_setup():
    cam = Camera.look_at([0.0, -0.01, 2.0], [0.0, 0.0, 0.0], 16, 16)
    frame = CubeFrame(AABB([-0.05, -0.05, -0.05], [0.05, 0.05, 0.05]), 2)
    occ = np.zeros((2, 2, 2), dtype=np.float32)
    occ[0, 0, 0] = 1.0
    return cam, OccGrid(frame, occ)


def _lone_sphere():
    rng = np.random.default_rng(2)
    sphere = Primitive("sphere", (0.15,), (0.5, 0.5, 0.5))
    surface = sample_surface(sphere, 1.0, 0.0, np.zeros(3), 4096, rng)
    inst = InstanceRecord(1, sphere, 1.0, 0.0, np.zeros(3), surface)
    cam = Camera.look_at([1.0, 0.8, 0.9], [0.0, 0.0, 0.15], 64, 64)
    return inst, cam, render((), (inst,), cam).depth


def _with_square_occluder(depth, camera, center_uv, half_side, z):
    """``depth`` with a fronto-parallel square of half side ``half_side`` at camera depth ``z`` in front."""
    reach = camera.intrinsics[0, 0] * half_side / z
    vs, us = np.mgrid[0:camera.height, 0:camera.width] + 0.5
    inside = (np.abs(us - center_uv[0]) <= reach) & (np.abs(vs - center_uv[1]) <= reach)
    return np.where(inside, z, depth).astype(depth.dtype)


class TestVisibility:
    def test_unoccluded_voxel_is_visible(self):
        cam, grid = _single_voxel_setup()
        assert grid_visibility_ratio(grid, cam, np.zeros((16, 16))) == 1.0

    def test_occluded_voxel_is_hidden(self):
        cam, grid = _single_voxel_setup()
        assert grid_visibility_ratio(grid, cam, np.full((16, 16), 0.5)) == 0.0

    def test_empty_grid(self):
        cam, grid = _single_voxel_setup()
        empty = OccGrid(grid.frame, np.zeros((2, 2, 2)))
        assert grid_visibility_ratio(empty, cam, np.zeros((16, 16))) == 0.0

    def test_lone_sphere_shows_a_large_share(self):
        inst, cam, depth = _lone_sphere()
        ratio = visibility_ratio(inst, cam, depth, resolution=16)
        assert 0.3 <= ratio <= 0.8

    def test_approaching_occluder_never_reveals_more(self):
        inst, cam, depth = _lone_sphere()
        u, v, _ = cam.project(inst.gt_box.center[None, :])
        nearest = float(cam.project(inst.gt_surface.points)[2].min())
        ratios = [visibility_ratio(inst, cam, depth, resolution=16)]
        # the square stays in front of the whole instance
        for share in (0.95, 0.8, 0.65, 0.5, 0.35):
            occluded = _with_square_occluder(depth, cam, (u[0], v[0]), 0.05, share * nearest)
            ratios.append(visibility_ratio(inst, cam, occluded, resolution=16))
        assert all(b <= a for a, b in zip(ratios, ratios[1:])), ratios
        assert ratios[-1] < ratios[0]

    def test_scene_visibility_in_unit_range(self, small_scene):
        for inst in small_scene.instances:
            for cam, depth in zip(small_scene.cameras, small_scene.depths):
                assert 0.0 <= visibility_ratio(inst, cam, depth, resolution=8) <= 1.0
