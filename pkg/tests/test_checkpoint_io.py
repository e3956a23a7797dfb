import json
import struct

import pytest
import torch

from gco.checkpoint_io import (MAGIC, OUTPAINT, CheckpointArchive, load_checkpoint, load_codec,
                               load_outpaint_checkpoint, load_pose_checkpoint, save_checkpoint, save_codec,
                               save_outpaint_checkpoint, save_pose_checkpoint)
from gco.denoiser_net import init_denoiser
from gco.errors import CheckpointError, CheckpointMismatchError, HashMismatchError, SchemaMismatchError
from gco.latent_codec import CodecConfig, CodecMode, decode, encode, train_autoencoder
from gco.ms_acm import TextEncoderConfig
from gco.outpaint_stage import ADAPTER, AdapterConfig, OutpaintOptions, build_outpainter, outpaint_layout

TEXT = TextEncoderConfig(context_dim=16, layers=1, heads=2, max_len=32)


def assert_same_state(a: torch.nn.Module, b: torch.nn.Module):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for key in sa:
        assert torch.equal(sa[key], sb[key]), key


def test_pose_roundtrip(tmp_path, micro_config):
    ckpt = init_denoiser(micro_config, seed=3)
    ckpt.metadata.update({"stage": "pose", "step": 12, "loss_history": [0.5, 0.25]})
    path = save_pose_checkpoint(ckpt, tmp_path / "pose.ckpt")
    loaded = load_pose_checkpoint(path)
    assert loaded.config == micro_config
    assert loaded.metadata == ckpt.metadata
    assert_same_state(loaded.model, ckpt.model)


@pytest.mark.parametrize("kind", ["fused", ADAPTER])
def test_outpaint_roundtrip(tmp_path, outpaint_backbone, kind):
    adapter = AdapterConfig(face_dim=16, face_layers=1, face_heads=2, face_ff=32, face_patch=8)
    ckpt = build_outpainter(kind, outpaint_backbone, seed=1, text_config=TEXT, adapter_config=adapter)
    ckpt.options = OutpaintOptions(face_drop=0.5, use_fine=False)
    loaded = load_outpaint_checkpoint(save_outpaint_checkpoint(ckpt, tmp_path / f"{kind}.ckpt"))
    assert loaded.kind == kind
    assert loaded.options == ckpt.options
    assert loaded.backbone_config == ckpt.backbone_config
    assert_same_state(loaded.model, ckpt.model)
    assert_same_state(loaded.text_encoder, ckpt.text_encoder)


def test_learned_codec_roundtrip(tmp_path):
    images = [torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    codec, _ = train_autoencoder(images, CodecConfig(CodecMode.LEARNED_AE, 2, 8), steps=2, batch_size=2, width=8)
    loaded = load_codec(save_codec(codec, tmp_path / "codec.ckpt", {"step": 2}))
    assert loaded.config == codec.config
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(decode(encode(x, loaded), loaded), decode(encode(x, codec), codec))


def test_patch_codec_roundtrip(tmp_path, codec):
    loaded = load_codec(save_codec(codec, tmp_path / "codec.ckpt"))
    assert loaded.config == codec.config and loaded.autoencoder is None


def test_flipped_payload_byte(tmp_path, micro_config):
    path = save_pose_checkpoint(init_denoiser(micro_config), tmp_path / "pose.ckpt")
    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(HashMismatchError, match="hash mismatch"):
        load_pose_checkpoint(path)


def test_schema_mismatch(tmp_path):
    path = save_checkpoint(CheckpointArchive("pose", {}, schema=2), tmp_path / "old.ckpt")
    with pytest.raises(SchemaMismatchError):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello world")
    with pytest.raises(CheckpointError, match="not a gco checkpoint"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_header_without_payload_hash(tmp_path):
    header = json.dumps({"schema": 1, "kind": "pose", "config": {}, "metadata": {}, "tensors": []}).encode()
    path = tmp_path / "bare.ckpt"
    path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header)
    with pytest.raises(CheckpointError, match="missing payload_sha256"):
        load_checkpoint(path)


def test_header_starts_with_magic(tmp_path, micro_config):
    path = save_pose_checkpoint(init_denoiser(micro_config), tmp_path / "pose.ckpt")
    assert path.read_bytes().startswith(MAGIC)


def test_pose_file_as_outpainter(tmp_path, micro_config):
    path = save_pose_checkpoint(init_denoiser(micro_config), tmp_path / "pose.ckpt")
    with pytest.raises(CheckpointMismatchError) as e:
        load_outpaint_checkpoint(path)
    assert e.value.expected_layout == outpaint_layout(4)
    assert "region flag [1]" in str(e.value)


def test_expected_kind(tmp_path, micro_config):
    path = save_pose_checkpoint(init_denoiser(micro_config), tmp_path / "pose.ckpt")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, expected_kind=OUTPAINT)
