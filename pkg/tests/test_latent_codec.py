import pytest
import torch

from gco.errors import ConfigError, GcoError, ShapeError
from gco.latent_codec import (CodecConfig, CodecMode, LatentCodec, LatentSpace, decode, encode, latent_mask,
                              train_autoencoder)


def test_patch_identity_f1_is_identity():
    codec = LatentCodec(CodecConfig.patch_identity(1))
    img = torch.rand(3, 8, 8)
    z = encode(img, codec)
    assert torch.equal(z.data, img)


def test_patch_identity_roundtrip_f2():
    codec = LatentCodec(CodecConfig.patch_identity(2))
    img = torch.rand(3, 4, 4)
    z = encode(img, codec)
    assert z.shape == (12, 2, 2)
    assert torch.equal(decode(z, codec), img)


def test_roundtrip_on_corpus_image(codec, records):
    img = torch.from_numpy(records[0].image)
    z = encode(img, codec, LatentSpace.POSE)
    assert z.space is LatentSpace.POSE
    assert z.shape == codec.latent_shape(64, 64) == (48, 16, 16)
    assert torch.equal(decode(z, codec), img)


def test_batched_roundtrip(codec):
    imgs = torch.rand(5, 3, 16, 16)
    assert torch.equal(decode(encode(imgs, codec), codec), imgs)


def test_zero_latent_decodes_to_black(codec):
    assert torch.count_nonzero(decode(torch.zeros(48, 4, 4), codec)) == 0


def test_indivisible_size(codec):
    with pytest.raises(ShapeError):
        encode(torch.rand(3, 10, 8), codec)


def test_wrong_latent_channels(codec):
    with pytest.raises(ShapeError):
        decode(torch.zeros(12, 4, 4), codec)


def test_patch_identity_channel_rule():
    with pytest.raises(ConfigError) as e:
        CodecConfig(CodecMode.PATCH_IDENTITY, 4, 16)
    assert e.value.field == "codec.latent_channels"


def test_learned_codec_needs_weights():
    with pytest.raises(GcoError):
        LatentCodec(CodecConfig(CodecMode.LEARNED_AE, 4, 8))


def test_latent_mask_matches_pixels(codec):
    mask = torch.zeros(16, 16)
    mask[3:9, 5:14] = 1.0
    m = latent_mask(mask, codec)
    img = torch.rand(3, 16, 16)
    masked = encode(img * mask, codec).data
    assert m.dtype == torch.bool
    assert torch.equal(torch.where(m, encode(img, codec).data, torch.zeros(())), masked)


class TestAutoencoder:
    config = CodecConfig(CodecMode.LEARNED_AE, 2, 8)

    def images(self, n=8):
        g = torch.Generator().manual_seed(0)
        return [torch.rand(3, 8, 8, generator=g) for _ in range(n)]

    def test_decode_is_clamped(self):
        codec, _ = train_autoencoder(self.images(), self.config, steps=2, batch_size=4, width=8)
        out = decode(encode(torch.rand(2, 3, 8, 8), codec), codec)
        assert out.shape == (2, 3, 8, 8)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_seeded_training_repeats(self):
        a, ha = train_autoencoder(self.images(), self.config, steps=5, batch_size=4, width=8, seed=3)
        b, hb = train_autoencoder(self.images(), self.config, steps=5, batch_size=4, width=8, seed=3)
        assert ha == hb
        for pa, pb in zip(a.autoencoder.parameters(), b.autoencoder.parameters()):
            assert torch.equal(pa, pb)

    def test_identical_images_are_memorised(self):
        img = torch.full((3, 8, 8), 0.3)
        _, history = train_autoencoder([img] * 4, self.config, steps=300, batch_size=4, lr=1e-2, width=8)
        assert history[-1] < 5e-3
        assert history[-1] < history[0]

    def test_empty_dataset(self):
        with pytest.raises(GcoError):
            train_autoencoder([], self.config)

    def test_needs_learned_mode(self):
        with pytest.raises(ConfigError):
            train_autoencoder(self.images(), CodecConfig.patch_identity(2))
