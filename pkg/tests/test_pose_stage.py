import numpy as np
import pytest

from gco.denoiser_net import DenoiserConfig, init_denoiser
from gco.diffusion_core import build_linear_schedule
from gco.errors import CheckpointMismatchError, GcoError, LayoutError
from gco.pose_stage import (box_iou, check_pose_config, garment_box, pose_fit_report, pose_layout, sample_poses,
                            torso_box, train_pose_predictor)
from gco.synth_data import GeneratedSource
from gco.training import TrainConfig

SCHED = build_linear_schedule(20)


def pose_config(**kwargs):
    return DenoiserConfig(**{"in_channels": 96, "out_channels": 48, "base_width": 8, "depth": 1,
                             "attention_levels": (), "num_heads": 2, "norm_groups": 4, **kwargs})


@pytest.fixture(scope="module")
def tiny_pose(records, codec):
    return train_pose_predictor(records, pose_config(), SCHED,
                                TrainConfig(steps=3, batch_size=2, log_every=0), codec)


def test_layout_names_channels():
    assert pose_layout(48) == ["noised pose latent [48]", "garment latent [48]"]


def test_config_must_match_codec():
    with pytest.raises(LayoutError):
        check_pose_config(pose_config(in_channels=48), 48)
    with pytest.raises(LayoutError):
        check_pose_config(pose_config(context_dim=8, attention_levels=(0,)), 48)


def test_training_records_metadata(tiny_pose):
    meta = tiny_pose.metadata
    assert meta["stage"] == "pose"
    assert meta["step"] == 3 and len(meta["loss_history"]) == 3
    assert meta["channel_layout"] == pose_layout(48)
    assert all(np.isfinite(meta["loss_history"]))


def test_seeded_training_repeats(records, codec, tiny_pose):
    again = train_pose_predictor(records, pose_config(), SCHED,
                                 TrainConfig(steps=3, batch_size=2, log_every=0), codec)
    assert again.metadata["loss_history"] == tiny_pose.metadata["loss_history"]


def test_empty_dataset(codec):
    with pytest.raises(GcoError):
        train_pose_predictor([], pose_config(), SCHED, TrainConfig(steps=1), codec)


class TestSampling:
    def test_diverse_samples(self, tiny_pose, records, codec):
        poses = sample_poses(tiny_pose, records[0].garment, 2, seed=0, n_steps=4, codec=codec, sched=SCHED)
        assert len(poses) == 2
        assert poses[0].image.shape == (3, 64, 64)
        assert np.abs(poses[0].image - poses[1].image).mean() > 0

    def test_same_seed_same_sample(self, tiny_pose, records, codec):
        a = sample_poses(tiny_pose, records[0].garment, 1, seed=9, n_steps=4, codec=codec, sched=SCHED)
        b = sample_poses(tiny_pose, records[0].garment, 1, seed=9, n_steps=4, codec=codec, sched=SCHED)
        assert np.array_equal(a[0].image, b[0].image)

    def test_rejects_foreign_checkpoint(self, records, codec):
        ckpt = init_denoiser(pose_config())
        with pytest.raises(CheckpointMismatchError, match="noised pose latent"):
            sample_poses(ckpt, records[0].garment, 1, seed=0, n_steps=2, codec=codec, sched=SCHED)


class TestFit:
    def test_box_iou(self):
        assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
        assert box_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(50 / 150)
        assert box_iou((0, 0, 4, 4), (10, 10, 12, 12)) == 0.0
        assert box_iou(None, (0, 0, 1, 1)) == 0.0

    def test_torso_box_on_ground_truth(self, records):
        for r in records:
            box = torso_box(r.pose)
            assert box is not None
            x0, y0, x1, y1 = box
            assert x0 < x1 and y0 < y1

    def test_blank_pose_has_no_torso(self):
        assert torso_box(np.zeros((3, 64, 64), np.float32)) is None

    def test_garment_box_strips_sleeves(self, records):
        r = records[0]
        body = garment_box(r.mask)
        full = garment_box(r.mask, strip_sleeves=False)
        assert body[0] >= full[0] and body[2] <= full[2]

    def test_ground_truth_poses_fit(self):
        recs = list(GeneratedSource(50, 77))
        report = pose_fit_report([r.pose for r in recs], [r.mask for r in recs], threshold=0.3)
        assert report.matched_rate >= 0.8
        assert report.shuffled_rate < report.matched_rate
        assert len(report.matched_ious) == 50

    def test_needs_pairs(self, records):
        with pytest.raises(GcoError):
            pose_fit_report([records[0].pose], [records[0].mask])


@pytest.mark.slow
def test_pose_predictor_acceptance(codec):
    """Toy-scale training: loss halves and sampled poses fit their garments."""
    train = list(GeneratedSource(500, 0))
    ckpt = train_pose_predictor(train, DenoiserConfig(96, 48), build_linear_schedule(200),
                                TrainConfig(steps=2000), codec)
    history = ckpt.metadata["loss_history"]
    assert history[-1] < 0.5 * np.mean(history[:50])

    held_out = list(GeneratedSource(50, 100002))
    sched = build_linear_schedule(200)
    poses = [sample_poses(ckpt, r.garment, 1, seed=i, n_steps=50, codec=codec, sched=sched)[0].image
             for i, r in enumerate(held_out)]
    report = pose_fit_report(poses, [r.mask for r in held_out], threshold=0.3)
    assert report.matched_rate >= 0.8
    assert report.shuffled_rate < 0.2


@pytest.mark.slow
def test_single_pair_is_memorised(records, codec):
    ckpt = train_pose_predictor(records[:1], pose_config(base_width=16), build_linear_schedule(50),
                                TrainConfig(steps=1500, batch_size=4, lr=1e-3, log_every=0), codec)
    history = ckpt.metadata["loss_history"]
    assert np.mean(history[-50:]) < 0.25 * np.mean(history[:50])
