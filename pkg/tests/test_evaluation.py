from dataclasses import replace

import numpy as np
import pytest

from gco.config_manager import ConfigManager
from gco.diffusion_core import build_linear_schedule
from gco.evaluation import (ABLATIONS, FULL, ablation_table, ablation_variant, attribute_sweep, build_request, evaluate,
                            face_conditioning_effect, format_table, full_is_best, held_out_records,
                            train_for_ablation)
from gco.image_utils import to_numpy
from gco.ms_acm import FACE_FIELDS, TextEncoderConfig, describe_face, describe_showcase, prompts_for
from gco.outpaint_stage import ADAPTER, FUSED, AdapterConfig, OutpaintOptions, build_outpainter, generate_showcase
from gco.synth_data import sample_seeds

SCHED = build_linear_schedule(20)
TEXT = TextEncoderConfig(context_dim=16, layers=1, heads=2, max_len=32)
SMALL_ADAPTER = AdapterConfig(face_dim=16, face_layers=1, face_heads=2, face_ff=32, face_patch=8)


@pytest.fixture(scope="module")
def sampling():
    return ConfigManager().with_overrides(sampling={"n_steps": 2}).validate().sampling


def untrained(outpaint_backbone, options=None, kind=FUSED):
    ckpt = build_outpainter(kind, outpaint_backbone, text_config=TEXT, adapter_config=SMALL_ADAPTER)
    ckpt.options = options or OutpaintOptions()
    return ckpt


def test_held_out_records_are_disjoint_from_training():
    assert not set(sample_seeds(500, 0)) & set(sample_seeds(50, 100000))
    a, b = held_out_records(3, 100000), held_out_records(3, 100000)
    assert [r.sample_id for r in a] == ["eval00000", "eval00001", "eval00002"]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_unpaired_request_takes_face_attributes(records, sampling):
    req = build_request(records[0], sampling, 3, face_record=records[1])
    assert np.array_equal(req.face, records[1].face)
    assert np.array_equal(req.garment, records[0].garment)
    assert req.prompts.fine == describe_face(records[1].attrs)
    assert req.prompts.coarse == describe_showcase(records[0].attrs)
    assert req.seed == 3 and req.n_steps == 2


def test_request_without_face_or_pose(records, sampling):
    req = build_request(records[0], sampling, 0, with_face=False, with_pose=False)
    assert req.face is None and req.pose is None


def test_evaluate_paired(tmp_path, outpaint_backbone, codec, records, sampling):
    grid = tmp_path / "grid.png"
    summary = evaluate(untrained(outpaint_backbone), codec, SCHED, records[:2], sampling, grid_path=grid)
    means = summary.means()
    assert len(summary.scores) == 2
    assert means["clo_ssim"] == pytest.approx(1.0)
    assert "rf_perceptual" in means
    assert 0.0 <= means["attribute_accuracy"] <= 1.0
    assert grid.exists()


def test_evaluate_unpaired_has_no_image_distance(outpaint_backbone, codec, records, sampling):
    summary = evaluate(untrained(outpaint_backbone), codec, SCHED, records[:2], sampling, unpaired=True)
    assert "rf_perceptual" not in summary.means()
    assert summary.to_dict()["setting"] == "unpaired"


def test_face_effect_pairs_runs(outpaint_backbone, codec, records, sampling):
    report = face_conditioning_effect(untrained(outpaint_backbone), codec, SCHED, records[:2], sampling)
    assert len(report.with_face) == len(report.without_face) == 2
    assert np.isfinite(report.mean_difference)


class TestAblations:
    def test_variants(self):
        base = OutpaintOptions()
        assert ablation_variant(FULL, base) == (base, FUSED)
        assert ablation_variant("no-pose", base)[0].use_pose is False
        assert ablation_variant("no-coarse", base)[0].use_coarse is False
        assert ablation_variant("no-fine", base)[0].use_fine is False
        assert ablation_variant("adapter", base) == (base, ADAPTER)
        with pytest.raises(ValueError):
            ablation_variant("no-text", base)

    def test_table_starts_with_full(self, outpaint_backbone, codec, records, sampling):
        trained = []

        def train_fn(options, kind):
            trained.append((options, kind))
            return untrained(outpaint_backbone, options, kind)

        rows = ablation_table(["no-fine", "adapter"], train_fn, OutpaintOptions(), codec, SCHED,
                              records[:1], sampling)
        assert [r["variant"] for r in rows] == [FULL, "no-fine", "adapter"]
        assert [k for _, k in trained] == [FUSED, FUSED, ADAPTER]
        assert "no-fine" in format_table(rows)

    def test_full_is_best(self):
        rows = [
            {"variant": FULL, "attribute_accuracy": 0.9, "face_rf_perceptual": 0.1, "rf_perceptual": 0.2},
            {"variant": "no-pose", "attribute_accuracy": 0.8, "face_rf_perceptual": 0.2, "rf_perceptual": 0.3},
        ]
        assert full_is_best(rows)
        rows[1]["face_rf_perceptual"] = 0.05
        assert not full_is_best(rows)

    def test_table_format(self):
        text = format_table([{"variant": FULL, "attribute_accuracy": 1.0, "clo_ssim": 0.5}])
        header, row = text.splitlines()
        assert "attribute_accuracy" in header
        assert "1.0000" in row and "nan" in row


@pytest.mark.slow
class TestTrainedToyModel:
    def test_attribute_sweep_beats_chance(self, toy, toy_outpainter):
        cfg, _, codec, sched = toy
        results = attribute_sweep(toy_outpainter, codec, sched, cfg.sampling, 100, cfg.evaluation.seed)
        assert set(results) == set(FACE_FIELDS)
        for name, row in results.items():
            assert row["accuracy"] >= 0.6, name

    def test_face_condition_brings_face_closer(self, toy, toy_outpainter):
        cfg, _, codec, sched = toy
        records = held_out_records(cfg.evaluation.n_face_pairs, cfg.evaluation.seed)
        report = face_conditioning_effect(toy_outpainter, codec, sched, records, cfg.sampling)
        assert report.mean_difference < 0

    def test_hair_colour_moves_face_not_garment(self, toy, toy_outpainter):
        cfg, _, codec, sched = toy
        record = held_out_records(1, cfg.evaluation.seed)[0]
        base = build_request(record, cfg.sampling, 0, with_face=False)
        images = []
        for colour in ("black", "red"):
            req = replace(base, prompts=prompts_for(record.attrs.with_overrides(hair_color=colour)))
            images.append(to_numpy(generate_showcase(req, toy_outpainter, codec, sched)))
        garment = record.mask > 0.5
        assert np.array_equal(images[0][:, garment], images[1][:, garment])
        x0, y0, x1, y1 = (max(0, v) for v in record.face_bbox)
        assert np.abs(images[0][:, y0:y1, x0:x1] - images[1][:, y0:y1, x0:x1]).mean() > 0.01

    def test_full_model_wins_every_ablation(self, toy):
        cfg, dataset, codec, sched = toy
        records = held_out_records(cfg.evaluation.n_face_pairs, cfg.evaluation.seed)
        rows = ablation_table(ABLATIONS, train_for_ablation(cfg, dataset, codec, sched), cfg.options, codec, sched,
                              records, cfg.sampling)
        assert full_is_best(rows), format_table(rows)
