import json
import time

import numpy as np
import pytest
import torch

from gco import palette
from gco.errors import GcoError, SchemaMismatchError, UnreadableRegionError
from gco.ms_acm import FACE_FIELDS
from gco.synth_data import (MANIFEST_NAME, GeneratedSource, SampleDataset, classify_face_attributes,
                            generate_dataset, generate_sample, load_manifest, num_workers, render_pose_map,
                            sample_seeds)


def test_same_seed_same_record():
    a, b = generate_sample(42), generate_sample(42)
    for key in ("image", "garment", "mask", "pose", "face"):
        assert np.array_equal(getattr(a, key), getattr(b, key))
    assert a.attrs == b.attrs and a.keypoints == b.keypoints and a.prompts == b.prompts


def test_shapes_and_ranges(records):
    r = records[0]
    assert r.image.shape == r.garment.shape == r.pose.shape == (3, 64, 64)
    assert r.mask.shape == (64, 64)
    assert r.face.shape == (3, 32, 32)
    assert r.image.dtype == np.float32
    assert set(np.unique(r.mask)) <= {0.0, 1.0}
    assert r.mask.sum() > 0


def test_garment_is_image_times_mask(records):
    for r in records:
        assert np.array_equal(r.garment, r.image * r.mask[None])


def test_red_lip_override():
    r = generate_sample(7, overrides={"lip_color": "red"})
    cx, cy = r.keypoints["head"]
    expected = np.asarray(palette.to_u8(palette.LIP_COLORS["red"]), np.float32) / 255.0
    for dy in palette.LIP_ROWS:
        for dx in range(palette.LIP_SPAN[0], palette.LIP_SPAN[1] + 1):
            assert np.array_equal(r.image[:, cy + dy, cx + dx], expected)
    assert r.attrs.lip_color == "red"


def test_override_keeps_layout():
    base = generate_sample(11)
    other = generate_sample(11, overrides={"hair_color": "blond" if base.attrs.hair_color != "blond" else "red"})
    assert other.keypoints == base.keypoints
    assert np.array_equal(other.mask, base.mask)


def test_pose_map_draws_on_black(records):
    pose = render_pose_map(records[0].keypoints)
    assert pose.shape == (3, 64, 64)
    assert (pose.sum(axis=0) == 0).mean() > 0.5
    assert np.array_equal(pose, records[0].pose)


class TestClassifier:
    def test_reads_clean_renders(self, records):
        for r in records:
            got = classify_face_attributes(r.image, r.face_bbox)
            assert got == {k: getattr(r.attrs, k) for k in FACE_FIELDS}

    def test_self_consistency_sweep(self):
        for s in sample_seeds(60, 99):
            r = generate_sample(s)
            assert classify_face_attributes(r.image, r.face_bbox) == {k: getattr(r.attrs, k) for k in FACE_FIELDS}

    @pytest.mark.parametrize("factor", [0.95, 1.05])
    def test_brightness_shift(self, records, factor):
        for r in records:
            shifted = np.clip(r.image * factor, 0.0, 1.0)
            assert classify_face_attributes(shifted, r.face_bbox) == classify_face_attributes(r.image, r.face_bbox)

    def test_accepts_tensors(self, records):
        r = records[1]
        assert classify_face_attributes(torch.from_numpy(r.image), r.face_bbox)["skin_tone"] == r.attrs.skin_tone

    def test_uniform_gray_is_unreadable(self):
        with pytest.raises(UnreadableRegionError, match="unreadable region"):
            classify_face_attributes(np.full((3, 64, 64), 0.5, np.float32), (20, 20, 39, 39))

    def test_tiny_box_is_unreadable(self, records):
        with pytest.raises(UnreadableRegionError):
            classify_face_attributes(records[0].image, (10, 10, 15, 15))


class TestDataset:
    def test_manifest(self, tmp_path):
        manifest = generate_dataset(5, 3, tmp_path / "toy", workers=2)
        lines = manifest.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 5
        entry = json.loads(lines[0])
        assert entry["image"] == "images/00000.png"
        assert (tmp_path / "toy" / entry["face"]).exists()

    def test_rebuild_is_identical(self, tmp_path):
        a = generate_dataset(4, 8, tmp_path / "a")
        b = generate_dataset(4, 8, tmp_path / "b", workers=1)
        assert a.read_bytes() == b.read_bytes()

    def test_load_matches_generation(self, tmp_path):
        generate_dataset(3, 5, tmp_path)
        loaded = load_manifest(tmp_path)
        fresh = list(GeneratedSource(3, 5))
        assert [r.sample_id for r in loaded] == [r.sample_id for r in fresh]
        for a, b in zip(loaded, fresh):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)
            assert np.array_equal(a.face, b.face)
            assert a.attrs == b.attrs and a.face_bbox == b.face_bbox

    def test_limit(self, tmp_path):
        generate_dataset(4, 0, tmp_path)
        assert len(load_manifest(tmp_path / MANIFEST_NAME, limit=2)) == 2

    def test_schema_mismatch(self, tmp_path):
        manifest = generate_dataset(1, 0, tmp_path)
        entry = json.loads(manifest.read_text(encoding="utf-8"))
        entry["schema"] = 99
        manifest.write_text(json.dumps(entry) + "\n", encoding="utf-8")
        with pytest.raises(SchemaMismatchError):
            load_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(GcoError, match="manifest not found"):
            load_manifest(tmp_path)

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(GcoError):
            generate_dataset(0, 0, tmp_path)

    def test_torch_dataset(self, records):
        ds = SampleDataset(records)
        item = ds[0]
        assert item["image"].shape == (3, 64, 64) and item["mask"].shape == (64, 64)
        assert ds.stacked("face").shape == (len(records), 3, 32, 32)


def test_seeds_are_spawned_deterministically():
    assert sample_seeds(5, 0) == sample_seeds(5, 0)
    assert sample_seeds(5, 0) != sample_seeds(5, 1)
    assert len(set(sample_seeds(100, 0))) == 100


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("GCO_NUM_THREADS", "2")
    assert num_workers(8) == 2
    monkeypatch.delenv("GCO_NUM_THREADS")
    assert num_workers(3) == 3


@pytest.mark.slow
def test_classifier_on_a_thousand_samples():
    for s in sample_seeds(1000, 2024):
        r = generate_sample(s)
        assert classify_face_attributes(r.image, r.face_bbox) == {k: getattr(r.attrs, k) for k in FACE_FIELDS}


@pytest.mark.slow
def test_toy_corpus_builds_quickly(tmp_path, monkeypatch):
    monkeypatch.setenv("GCO_NUM_THREADS", "1")
    start = time.perf_counter()
    generate_dataset(500, 0, tmp_path)
    assert time.perf_counter() - start < 60.0
