from dataclasses import replace

import numpy as np
import pytest

from gco.errors import LayoutError, ShapeError
from gco.metrics_eval import (EfficiencyReport, aggregate_adherence, attribute_adherence, clo_ssim,
                              efficiency_audit, face_rf_perceptual, rf_perceptual, ssim)
from gco.ms_acm import FACE_FIELDS, TextEncoderConfig
from gco.outpaint_stage import AdapterConfig, build_adapter_baseline, build_fused_outpainter


def noisy(img, sigma, seed=0):
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0, sigma, img.shape), 0, 1).astype(np.float32)


class TestSsim:
    def test_identity(self, records):
        assert ssim(records[0].image, records[0].image) == pytest.approx(1.0)

    def test_inverted_image_is_anticorrelated(self):
        img = np.random.default_rng(0).random((3, 64, 64))
        assert ssim(img, 1.0 - img) < 0.0

    def test_full_region_equals_global(self, records):
        a, b = records[0].image, records[1].image
        assert ssim(a, b, region_mask=np.ones((64, 64))) == pytest.approx(ssim(a, b))

    def test_region_ignores_outside(self, records):
        r = records[0]
        other = r.image.copy()
        other[:, :, :8] = 0.0
        mask = np.zeros((64, 64))
        mask[20:40, 30:50] = 1
        assert ssim(r.image, other, region_mask=mask) == pytest.approx(1.0)

    def test_empty_region(self, records):
        with pytest.raises(ShapeError, match="empty"):
            ssim(records[0].image, records[0].image, region_mask=np.zeros((64, 64)))

    def test_shape_mismatch(self, records):
        with pytest.raises(ShapeError):
            ssim(records[0].image, records[0].face)

    def test_clo_ssim_on_ground_truth(self, records):
        for r in records:
            assert clo_ssim(r.image, r.garment, r.mask) == pytest.approx(1.0)


class TestPerceptual:
    def test_identity(self, records):
        assert rf_perceptual(records[0].image, records[0].image) == 0.0

    def test_symmetric(self, records):
        a, b = records[0].image, records[1].image
        assert rf_perceptual(a, b) == pytest.approx(rf_perceptual(b, a))

    def test_grows_with_noise(self, records):
        img = records[0].image
        d = [rf_perceptual(img, noisy(img, s)) for s in (0.05, 0.1, 0.2)]
        assert 0 < d[0] < d[1] < d[2]

    def test_region(self, records):
        img = records[0].image
        mask = np.zeros((64, 64))
        mask[:32] = 1
        other = img.copy()
        other[:, 48:] = 0.5
        assert rf_perceptual(img, other, region_mask=mask) < rf_perceptual(img, other)

    def test_face_crop_of_ground_truth(self, records):
        r = records[0]
        assert face_rf_perceptual(r.image, r.face, r.face_bbox) < face_rf_perceptual(r.image, records[1].face,
                                                                                    r.face_bbox)


class TestAdherence:
    def test_ground_truth_is_perfect(self, records):
        reports = [attribute_adherence(r.image, r.face_bbox, r.attrs) for r in records]
        assert all(rep.accuracy == 1.0 and not rep.unreadable for rep in reports)
        agg = aggregate_adherence(reports)
        assert agg["overall"] == 1.0 and agg["unreadable"] == 0.0

    def test_wrong_request_is_counted(self, records):
        r = records[0]
        other = "red" if r.attrs.lip_color == "natural" else "natural"
        rep = attribute_adherence(r.image, r.face_bbox, r.attrs.with_overrides(lip_color=other))
        assert rep.matches["lip_color"] is False
        assert rep.accuracy == pytest.approx((len(FACE_FIELDS) - 1) / len(FACE_FIELDS))

    def test_flat_gray_is_unreadable(self, records):
        r = records[0]
        gray = np.full_like(r.image, 0.5)
        rep = attribute_adherence(gray, r.face_bbox, r.attrs)
        assert rep.unreadable and rep.predicted is None
        assert rep.accuracy == 0.0

    def test_aggregate(self, records):
        r = records[0]
        good = attribute_adherence(r.image, r.face_bbox, r.attrs)
        bad = attribute_adherence(np.full_like(r.image, 0.5), r.face_bbox, r.attrs)
        agg = aggregate_adherence([good, bad])
        assert agg["overall"] == 0.5 and agg["unreadable"] == 0.5
        assert aggregate_adherence([])["overall"] == 0.0


class TestAudit:
    text = TextEncoderConfig(context_dim=16, layers=1, heads=2, max_len=32)

    def test_small_audit(self, outpaint_backbone):
        fused = build_fused_outpainter(outpaint_backbone, text_config=self.text)
        adapter = build_adapter_baseline(outpaint_backbone, text_config=self.text)
        report = efficiency_audit(fused, adapter, batch_size=1, steps=2)
        assert report.fused_delta == report.expected_fused_delta == 98 * 16 * 9
        assert report.delta_ratio >= 100
        assert report.fused_step_ms > 0 and report.adapter_step_ms > 0
        assert EfficiencyReport.from_json(report.to_json()) == report

    def test_kinds_must_differ(self, outpaint_backbone):
        fused = build_fused_outpainter(outpaint_backbone, text_config=self.text)
        with pytest.raises(LayoutError):
            efficiency_audit(fused, fused, steps=1)

    def test_backbones_must_match(self, outpaint_backbone):
        fused = build_fused_outpainter(outpaint_backbone, text_config=self.text)
        small = AdapterConfig(face_dim=16, face_layers=1, face_heads=2, face_ff=32, face_patch=8)
        adapter = build_adapter_baseline(replace(outpaint_backbone, base_width=8), small, text_config=self.text)
        with pytest.raises(LayoutError, match="different backbones"):
            efficiency_audit(fused, adapter, steps=1)

    @pytest.mark.slow
    def test_fused_step_is_faster_on_toy_config(self, toy):
        cfg, _, codec, _ = toy
        fused = build_fused_outpainter(cfg.outpaint_model, text_config=cfg.text_encoder)
        adapter = build_adapter_baseline(cfg.outpaint_model, cfg.adapter, text_config=cfg.text_encoder)
        report = efficiency_audit(fused, adapter, (16, 16), codec.factor, batch_size=8, steps=100)
        assert report.delta_ratio >= 100
        assert report.fused_step_ms < report.adapter_step_ms
