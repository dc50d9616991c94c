"""
Tests for the on-disk scene format, split files and inventory rows.

Run:
    python -m pytest tests/test_dataset_io.py -v
"""

import json

import numpy as np
import pytest

from config import SPLIT_BUCKETS, SPLIT_MODULUS
from scenefix.dataset_io import (
    MANIFEST_NAME,
    decode_ppm,
    encode_ppm,
    forge_to_disk,
    inventory_row,
    iter_split,
    list_scene_ids,
    read_sample,
    split_for_seed,
    split_scene_ids,
    write_sample,
    write_splits,
)
from scenefix.errors import DatasetLoadError, ForgeFailure
from tests.conftest import small_forge_config


@pytest.fixture
def written(tmp_path, small_scene):
    write_sample(small_scene, tmp_path)
    return tmp_path, small_scene


def _edit_manifest(scene_dir, fn):
    path = scene_dir / MANIFEST_NAME
    data = json.loads(path.read_text())
    fn(data)
    path.write_text(json.dumps(data))


# ─────────────────────────────────────────────────────────────
# Scene directories
# ─────────────────────────────────────────────────────────────


class TestSceneRoundTrip:
    def test_read_back_matches(self, written):
        root, scene = written
        back = read_sample(root, scene.scene_id)
        assert back.scene_id == scene.scene_id and back.seed == scene.seed
        assert back.instance_ids == scene.instance_ids
        for a, b in zip(back.depths, scene.depths):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(back.instids, scene.instids):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(back.rgbs, scene.rgbs):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(back.instances, scene.instances):
            np.testing.assert_array_equal(a.gt_surface.points, b.gt_surface.points)
            assert a.gt_box == b.gt_box
            assert a.primitive == b.primitive
        for a, b in zip(back.cameras, scene.cameras):
            np.testing.assert_array_equal(a.intrinsics, b.intrinsics)
            np.testing.assert_array_equal(a.world_to_cam, b.world_to_cam)
        assert [p.to_dict() for p in back.planes] == [p.to_dict() for p in scene.planes]

    def test_layout(self, written):
        root, scene = written
        names = {p.name for p in (root / scene.scene_id).iterdir()}
        assert MANIFEST_NAME in names
        for v in range(scene.n_views):
            assert {f"view_{v}_depth.f32", f"view_{v}_instid.u16", f"view_{v}_rgb.ppm"} <= names
        for iid in scene.instance_ids:
            assert f"inst_{iid}_surface.f32" in names

    def test_list_scene_ids(self, written):
        root, scene = written
        (root / "not_a_scene").mkdir()
        assert list_scene_ids(root) == [scene.scene_id]
        assert list_scene_ids(root / "missing") == []


class TestSceneLoadErrors:
    def test_flipped_byte_fails_checksum(self, written):
        root, scene = written
        path = root / scene.scene_id / "view_0_depth.f32"
        data = bytearray(path.read_bytes())
        data[5] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(DatasetLoadError, match="checksum") as exc:
            read_sample(root, scene.scene_id)
        assert exc.value.path == path

    def test_truncated_file_reports_size(self, written):
        root, scene = written
        path = root / scene.scene_id / f"inst_{scene.instance_ids[0]}_surface.f32"
        path.write_bytes(path.read_bytes()[:-12])
        with pytest.raises(DatasetLoadError, match="bytes"):
            read_sample(root, scene.scene_id)

    def test_missing_binary(self, written):
        root, scene = written
        (root / scene.scene_id / "view_1_instid.u16").unlink()
        with pytest.raises(DatasetLoadError, match="not found"):
            read_sample(root, scene.scene_id)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetLoadError, match="not found"):
            read_sample(tmp_path, "scene_000001")

    def test_unknown_manifest_key(self, written):
        root, scene = written
        _edit_manifest(root / scene.scene_id, lambda m: m.update(extra_field=1))
        with pytest.raises(DatasetLoadError, match="schema violation"):
            read_sample(root, scene.scene_id)

    def test_wrong_schema_version(self, written):
        root, scene = written
        _edit_manifest(root / scene.scene_id, lambda m: m.update(schema_version=99))
        with pytest.raises(DatasetLoadError, match="schema_version"):
            read_sample(root, scene.scene_id)

    def test_directory_must_match_scene_id(self, written):
        root, scene = written
        (root / scene.scene_id).rename(root / "scene_999999")
        with pytest.raises(DatasetLoadError, match="scene_id"):
            read_sample(root, "scene_999999")

    def test_tampered_gt_box(self, written):
        root, scene = written

        def shift(m):
            m["instances"][0]["gt_box"][0][0] -= 0.5

        _edit_manifest(root / scene.scene_id, shift)
        with pytest.raises(DatasetLoadError, match="gt_box"):
            read_sample(root, scene.scene_id)


class TestPpm:
    def test_round_trip(self):
        img = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        np.testing.assert_array_equal(decode_ppm(encode_ppm(img), "x.ppm"), img)

    def test_rejects_other_formats(self):
        with pytest.raises(DatasetLoadError):
            decode_ppm(b"P3\n1 1\n255\n000", "x.ppm")

    def test_rejects_short_payload(self):
        with pytest.raises(DatasetLoadError):
            decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00", "x.ppm")


# ─────────────────────────────────────────────────────────────
# Splits and inventory
# ─────────────────────────────────────────────────────────────


class TestSplits:
    def test_split_by_seed_modulus(self):
        assert split_for_seed(10, SPLIT_MODULUS, SPLIT_BUCKETS) == "train"
        assert split_for_seed(17, SPLIT_MODULUS, SPLIT_BUCKETS) == "train"
        assert split_for_seed(18, SPLIT_MODULUS, SPLIT_BUCKETS) == "val"
        assert split_for_seed(29, SPLIT_MODULUS, SPLIT_BUCKETS) == "test"

    def test_write_and_stream(self, tmp_path):
        seeds = {f"scene_{s:06d}": s for s in (9, 1, 8, 2)}
        write_splits(tmp_path, seeds, SPLIT_MODULUS, SPLIT_BUCKETS)
        assert list(iter_split(tmp_path, "train")) == ["scene_000001", "scene_000002"]
        assert split_scene_ids(tmp_path, "val") == ["scene_000008"]
        assert split_scene_ids(tmp_path, "test") == ["scene_000009"]

    def test_missing_split_file(self, tmp_path):
        with pytest.raises(DatasetLoadError):
            split_scene_ids(tmp_path, "train")

    def test_no_split_lists_every_scene(self, written):
        root, scene = written
        assert split_scene_ids(root, None) == [scene.scene_id]


class TestInventory:
    def test_row(self, small_scene):
        row = inventory_row(small_scene)
        assert row["scene_id"] == small_scene.scene_id
        assert row["instances"] == len(small_scene.instances)
        assert row["walls"] == small_scene.n_walls
        for v, ids in enumerate(small_scene.instids):
            assert row[f"visible_view_{v}"] == len(set(np.unique(ids).tolist()) - {0})
        assert 0.0 <= row["mean_visible_fraction"] <= 1.0
        assert row["masks_gt4_components"] <= row["masks_gt1_components"]

    def test_forge_to_disk(self, tmp_path, forge_config, small_scene):
        row = forge_to_disk(forge_config, small_scene.seed, tmp_path)
        assert row == inventory_row(small_scene)
        back = read_sample(tmp_path, small_scene.scene_id)
        assert back.instance_ids == small_scene.instance_ids

    def test_forge_to_disk_propagates_failures(self, tmp_path):
        with pytest.raises(ForgeFailure):
            forge_to_disk(small_forge_config(n_candidates=1, min_instances=4), 1, tmp_path)
        assert list_scene_ids(tmp_path) == []
