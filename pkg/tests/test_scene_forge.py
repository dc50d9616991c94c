"""
Tests for procedural scene forging: solids, placement, rendering and
occlusion statistics.

Run:
    python -m pytest tests/test_scene_forge.py -v
"""

from collections import deque

import numpy as np
import pytest

from scenefix.errors import ContractViolation, ForgeFailure
from scenefix.geom_core import AABB, Camera
from scenefix.rasterizer import local_to_world, render, render_instance_mask
from scenefix.scene_forge import (
    PRIMITIVE_KINDS,
    Primitive,
    Rejected,
    count_components,
    forge_scene,
    occlusion_stats,
    rasterize,
    sample_primitive,
    scene_id_for_seed,
    try_place,
    view_occlusion_table,
    world_box_of,
)
from scenefix.seeding import child_rng
from scenefix.solids import Box, Cylinder, Plane, Sphere
from tests.conftest import small_forge_config

# ─────────────────────────────────────────────────────────────
# Helpers
# ─────────────────────────────────────────────────────────────


def flood_fill_components(mask: np.ndarray) -> int:
    """Brute-force 8-connected component count."""
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    count = 0
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            count += 1
            todo = deque([(y, x)])
            seen[y, x] = True
            while todo:
                cy, cx = todo.popleft()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            todo.append((ny, nx))
    return count


def one_primitive_of_each_kind():
    rng = child_rng(7, "kinds")
    found = {}
    while len(found) < len(PRIMITIVE_KINDS):
        p = sample_primitive(rng)
        found.setdefault(p.kind, p)
    return [found[k] for k in PRIMITIVE_KINDS]


# ─────────────────────────────────────────────────────────────
# Solids
# ─────────────────────────────────────────────────────────────


class TestSolids:
    def test_box_hit_distance_and_normal(self):
        t, n = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)).intersect(
            np.array([[-3.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
        assert t[0] == pytest.approx(2.0)
        np.testing.assert_allclose(n[0], [-1.0, 0.0, 0.0])

    def test_box_miss_is_inf(self):
        t, _ = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)).intersect(
            np.array([[-3.0, 5.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
        assert np.isinf(t[0])

    def test_sphere_and_cylinder_hits(self):
        o = np.array([[0.0, 0.0, 5.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        t_s, n_s = Sphere((0.0, 0.0, 0.0), 1.0).intersect(o, d)
        t_c, n_c = Cylinder((0.0, 0.0, 0.0), 0.5, 1.0).intersect(o, d)
        assert t_s[0] == pytest.approx(4.0)
        np.testing.assert_allclose(n_s[0], [0.0, 0.0, 1.0])
        assert t_c[0] == pytest.approx(4.0)
        np.testing.assert_allclose(n_c[0], [0.0, 0.0, 1.0])

    def test_plane_is_one_sided(self):
        floor = Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), 1.0, 1.0, "floor")
        t_front, _ = floor.intersect(np.array([[0.0, 0.0, 2.0]]), np.array([[0.0, 0.0, -1.0]]))
        t_back, _ = floor.intersect(np.array([[0.0, 0.0, -2.0]]), np.array([[0.0, 0.0, 1.0]]))
        assert t_front[0] == pytest.approx(2.0)
        assert np.isinf(t_back[0])

    def test_plane_is_bounded(self):
        floor = Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), 1.0, 1.0, "floor")
        t, _ = floor.intersect(np.array([[3.0, 0.0, 2.0]]), np.array([[0.0, 0.0, -1.0]]))
        assert np.isinf(t[0])

    @pytest.mark.parametrize("solid", [
        Box((0.1, 0.2, 0.3), (0.2, 0.1, 0.3)),
        Cylinder((0.0, 0.0, 0.5), 0.3, 0.5),
        Sphere((0.0, 0.0, 0.2), 0.2),
    ])
    def test_surface_samples_lie_on_the_surface(self, solid):
        pts = solid.sample_surface(500, np.random.default_rng(0))
        np.testing.assert_allclose(solid.surface_distance(pts), 0.0, atol=1e-9)
        lo, hi = solid.bounds()
        assert np.all(pts >= lo - 1e-12) and np.all(pts <= hi + 1e-12)


# ─────────────────────────────────────────────────────────────
# Primitives and placement
# ─────────────────────────────────────────────────────────────


class TestPrimitive:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ContractViolation):
            Primitive("torus", (0.1,), (0.5, 0.5, 0.5))

    def test_rejects_wrong_parameter_count(self):
        with pytest.raises(ContractViolation):
            Primitive("box", (0.1, 0.2), (0.5, 0.5, 0.5))

    def test_rejects_non_positive_parameters(self):
        with pytest.raises(ContractViolation):
            Primitive("sphere", (-0.1,), (0.5, 0.5, 0.5))

    @pytest.mark.parametrize("primitive", one_primitive_of_each_kind(), ids=PRIMITIVE_KINDS)
    def test_parts_rest_on_the_floor(self, primitive):
        lows = [part.bounds()[0][2] for part in primitive.parts()]
        assert min(lows) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("primitive", one_primitive_of_each_kind(), ids=PRIMITIVE_KINDS)
    def test_world_box_bounds_every_part(self, primitive):
        rng = np.random.default_rng(3)
        box = world_box_of(primitive, 1.3, 0.7, (0.2, -0.1, 0.0))
        for part in primitive.parts():
            pts = local_to_world(part.sample_surface(200, rng), 1.3, 0.7, (0.2, -0.1, 0.0))
            assert box.contains_points(pts, tol=1e-9).all()


class TestTryPlace:
    def test_placements_never_overlap_and_stay_in_arena(self):
        arena = AABB([-0.8, -0.8, 0.0], [0.8, 0.8, 1.5])
        rng = child_rng(11, "place")
        boxes = []
        for _ in range(15):
            result = try_place(sample_primitive(rng), boxes, arena, rng, 50)
            if isinstance(result, Rejected):
                continue
            assert arena.contains(result.world_box)
            assert not any(result.world_box.overlaps(b) for b in boxes)
            boxes.append(result.world_box)
        assert boxes

    def test_tiny_arena_rejects_after_max_attempts(self):
        arena = AABB([0.0, 0.0, 0.0], [0.01, 0.01, 2.0])
        result = try_place(Primitive("box", (0.2, 0.2, 0.2), (0.5, 0.5, 0.5)), [], arena,
                           np.random.default_rng(0), 7)
        assert result == Rejected(7)

    def test_zero_volume_arena_is_a_contract_violation(self):
        with pytest.raises(ContractViolation):
            try_place(Primitive("box", (0.2, 0.2, 0.2), (0.5, 0.5, 0.5)), [],
                      AABB([0, 0, 0], [1, 1, 0]), np.random.default_rng(0))


# ─────────────────────────────────────────────────────────────
# Forging
# ─────────────────────────────────────────────────────────────


class TestForgeScene:
    def test_deterministic(self, forge_config, small_scene):
        again = forge_scene(forge_config, small_scene.seed)
        assert again.instance_ids == small_scene.instance_ids
        for a, b in zip(again.depths, small_scene.depths):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(again.instids, small_scene.instids):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(again.rgbs, small_scene.rgbs):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(again.instances, small_scene.instances):
            np.testing.assert_array_equal(a.gt_surface.points, b.gt_surface.points)

    def test_scene_id_follows_seed(self, small_scene):
        assert small_scene.scene_id == scene_id_for_seed(small_scene.seed)

    def test_instance_ids_and_counts(self, forge_config, small_scene):
        ids = small_scene.instance_ids
        assert ids == sorted(set(ids))
        assert min(ids) >= 1
        assert forge_config.min_instances <= len(ids) <= forge_config.n_candidates
        for inst in small_scene.instances:
            assert len(inst.gt_surface) == forge_config.surface_samples

    def test_instances_do_not_overlap(self, small_scene):
        boxes = [inst.world_box for inst in small_scene.instances]
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert not a.overlaps(b)

    def test_gt_box_is_tight_on_the_surface(self, small_scene):
        for inst in small_scene.instances:
            np.testing.assert_array_equal(inst.gt_box.min_corner, inst.gt_surface.points.min(axis=0))
            assert inst.world_box.contains(inst.gt_box, tol=1e-6)

    def test_rasters_are_consistent(self, forge_config, small_scene):
        known = set(small_scene.instance_ids) | {0}
        for depth, ids in zip(small_scene.depths, small_scene.instids):
            assert depth.shape == (forge_config.height, forge_config.width)
            assert depth.dtype == np.float32 and ids.dtype == np.uint16
            assert set(np.unique(ids).tolist()) <= known
            assert np.all(depth[ids > 0] > 0)

    def test_every_kept_instance_is_seen(self, forge_config, small_scene):
        for inst in small_scene.instances:
            best = max(int((ids == inst.instance_id).sum()) for ids in small_scene.instids)
            assert best >= forge_config.min_pixels

    def test_rasterize_matches_stored_views(self, small_scene):
        for v, cam in enumerate(small_scene.cameras):
            depth, ids = rasterize(small_scene, cam)
            np.testing.assert_array_equal(depth, small_scene.depths[v])
            np.testing.assert_array_equal(ids, small_scene.instids[v])

    def test_surface_points_lie_on_their_instance(self, small_scene):
        for inst in small_scene.instances:
            assert inst.surface_distance(inst.gt_surface.points).max() < 1e-5

    def test_too_few_candidates_fails(self):
        with pytest.raises(ForgeFailure) as exc:
            forge_scene(small_forge_config(n_candidates=2, min_instances=5), seed=1)
        assert exc.value.required == 5

    def test_without_rgb(self):
        cfg = small_forge_config(render_rgb=False, width=16, height=16, n_cameras=1,
                                 min_instances=1, min_pixels=1)
        for seed in range(1, 20):
            try:
                sample = forge_scene(cfg, seed)
            except ForgeFailure:
                continue
            assert sample.rgbs is None
            return
        pytest.fail("no seed forged a scene")


# ─────────────────────────────────────────────────────────────
# Rendering and occlusion
# ─────────────────────────────────────────────────────────────


class TestRender:
    def test_lone_box_from_above(self):
        class Lone:
            instance_id = 3
            parts = (Box((0.0, 0.0, 0.1), (0.1, 0.1, 0.1)),)
            scale = 1.0
            z_rotation = 0.0
            translation = np.zeros(3)
            world_box = AABB([-0.1, -0.1, 0.0], [0.1, 0.1, 0.2])
            base_color = (0.5, 0.5, 0.5)

        cam = Camera.look_at([0.0, 0.01, 1.2], [0.0, 0.0, 0.0], 16, 16, 40.0)
        result = render((), (Lone(),), cam, shade=True)
        center = result.instid[8, 8]
        assert center == 3
        assert result.depth[8, 8] == pytest.approx(1.0, abs=2e-3)
        assert result.instid[0, 0] == 0 and result.depth[0, 0] == 0.0
        assert result.rgb.min() >= 0.0 and result.rgb.max() <= 1.0

    def test_visible_pixels_never_exceed_projection(self, small_scene):
        table = view_occlusion_table(small_scene)
        assert (table["visible_pixels"] <= table["projected_pixels"]).all()
        assert table["visible_fraction"].between(0.0, 1.0).all()
        for inst in small_scene.instances:
            mask = render_instance_mask(inst, small_scene.cameras[0])
            visible = small_scene.instids[0] == inst.instance_id
            assert not (visible & ~mask).any()


class TestOcclusionStats:
    def test_component_count_matches_flood_fill(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            mask = rng.random((20, 20)) < 0.3
            assert count_components(mask) == flood_fill_components(mask)

    def test_diagonal_pixels_are_connected(self):
        mask = np.eye(4, dtype=bool)
        assert count_components(mask) == 1

    def test_scene_masks_match_flood_fill(self, small_scene):
        table = view_occlusion_table(small_scene)
        for row in table.itertuples(index=False):
            visible = small_scene.instids[row.view] == row.instance_id
            assert row.components == flood_fill_components(visible)

    def test_best_view_per_instance(self, small_scene):
        stats = occlusion_stats(small_scene)
        assert list(stats["instance_id"]) == small_scene.instance_ids
        for row in stats.itertuples(index=False):
            counts = [int((ids == row.instance_id).sum()) for ids in small_scene.instids]
            assert row.visible_pixels == max(counts)
            assert row.best_view == counts.index(max(counts))
