import itertools

import numpy as np
import pytest
import torch

from gco.errors import AttributeValueError, ShapeError, UnreadableRegionError
from gco.ms_acm import (EMPTY_PROMPT, FACE_FIELDS, FACE_VOCAB, PAD_ID, UNK_ID, VOCABULARY, AttributeRecord,
                        TextEncoderConfig, apply_prompt_dropout, describe_face, describe_showcase, detect_face_bbox,
                        detokenize, encode_text, enhance_face, init_text_encoder, prompts_for, restore_face,
                        square_crop_box, stitch_prompts, tokenize)


class TestAttributeRecord:
    def test_defaults_are_valid(self):
        assert AttributeRecord().to_dict()["hair_color"] == "black"

    def test_out_of_vocabulary(self):
        with pytest.raises(AttributeValueError):
            AttributeRecord(hair_color="green")

    def test_unknown_field(self):
        with pytest.raises(AttributeValueError):
            AttributeRecord.from_dict({"hat": "yes"})

    def test_overrides(self):
        rec = AttributeRecord().with_overrides(lip_color="red")
        assert rec.lip_color == "red" and rec.hair_color == "black"


class TestPrompts:
    def test_showcase_template(self):
        attrs = AttributeRecord(sleeve="long", garment_kind="top", background="plain")
        assert describe_showcase(attrs) == "a model wearing a long-sleeve top on a plain background"

    def test_showcase_differs_in_one_token(self):
        a = describe_showcase(AttributeRecord(sleeve="long")).split()
        b = describe_showcase(AttributeRecord(sleeve="short")).split()
        assert len(a) == len(b)
        assert sum(x != y for x, y in zip(a, b)) == 1

    def test_face_template(self):
        attrs = AttributeRecord(hair_style="straight", hair_color="black", eyebrow="thin",
                                lip_color="red", skin_tone="light")
        assert describe_face(attrs) == "straight black hair, thin eyebrows, red lips, light skin"

    def test_face_descriptions_are_injective(self):
        texts = {describe_face(AttributeRecord(**dict(zip(FACE_FIELDS, values))))
                 for values in itertools.product(*FACE_VOCAB.values())}
        assert len(texts) == 4 * 3 * 2 * 2 * 3 == 144

    def test_deterministic(self):
        assert prompts_for(AttributeRecord()) == prompts_for(AttributeRecord())

    def test_stitch(self):
        assert stitch_prompts("a model", "straight black hair").stitched == "a model, straight black hair"
        assert stitch_prompts("a model", EMPTY_PROMPT).stitched == "a model"
        assert stitch_prompts(EMPTY_PROMPT, EMPTY_PROMPT).stitched == EMPTY_PROMPT

    def test_dropout_extremes(self):
        pair = prompts_for(AttributeRecord())
        rng = np.random.default_rng(0)
        assert apply_prompt_dropout(pair, rng, 0.0, 0.0) == pair.stitched
        assert apply_prompt_dropout(pair, rng, 1.0, 0.0) == pair.coarse
        assert apply_prompt_dropout(pair, rng, 0.0, 1.0) == EMPTY_PROMPT
        assert apply_prompt_dropout(pair, rng, 0.0, 0.0, keep_coarse=False) == pair.fine

    def test_dropout_rates(self):
        pair = prompts_for(AttributeRecord())
        rng = np.random.default_rng(1)
        out = [apply_prompt_dropout(pair, rng, 0.1, 0.1) for _ in range(5000)]
        assert out.count(EMPTY_PROMPT) / len(out) == pytest.approx(0.1, abs=0.02)
        assert out.count(pair.coarse) / len(out) == pytest.approx(0.09, abs=0.02)


class TestTokenizer:
    def test_roundtrip_on_template_prompts(self):
        text = prompts_for(AttributeRecord(hair_style="wavy", sleeve="short")).stitched
        ids = tokenize(text)
        assert UNK_ID not in ids
        assert detokenize(ids) == text

    def test_unknown_word(self):
        assert tokenize("purple hair") == [UNK_ID, VOCABULARY.index("hair")]

    def test_empty(self):
        assert tokenize(EMPTY_PROMPT) == []


class TestTextEncoder:
    config = TextEncoderConfig(context_dim=16, layers=1, heads=2, max_len=32)

    def test_empty_prompt_is_all_padding(self):
        enc = init_text_encoder(self.config)
        emb = encode_text(EMPTY_PROMPT, enc)
        assert bool(emb.pad_mask.all())
        assert torch.all(emb.tokens == PAD_ID)
        assert emb.embeddings.shape == (32, 16)
        assert bool(torch.isfinite(emb.embeddings).all())

    def test_identical_prompts(self):
        enc = init_text_encoder(self.config, seed=3)
        text = prompts_for(AttributeRecord()).stitched
        assert torch.equal(encode_text(text, enc).embeddings, encode_text(text, enc).embeddings)

    def test_one_word_changes_embedding(self):
        enc = init_text_encoder(self.config, seed=3)
        a = encode_text(describe_face(AttributeRecord(hair_color="black")), enc).embeddings
        b = encode_text(describe_face(AttributeRecord(hair_color="red")), enc).embeddings
        assert float((a - b).norm()) > 0

    def test_truncation_is_flagged(self):
        enc = init_text_encoder(TextEncoderConfig(context_dim=16, layers=1, heads=2, max_len=4))
        emb = encode_text("a model wearing a long-sleeve top", enc)
        assert emb.truncated
        assert emb.tokens.shape == (4,)

    def test_batch_matches_single(self):
        enc = init_text_encoder(self.config, seed=4)
        prompts = [EMPTY_PROMPT, prompts_for(AttributeRecord()).stitched]
        batch = enc.encode_batch(prompts)
        single = encode_text(prompts[1], enc)
        torch.testing.assert_close(batch.embeddings[1].detach(), single.embeddings)


class TestFaceEnhancer:
    def test_whole_image_bbox(self):
        img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
        out = enhance_face(img, (0, 0, 32, 32), size=32)
        np.testing.assert_array_equal(out, restore_face(img, 32))

    def test_uniform_region(self):
        img = np.full((3, 64, 64), 0.4, np.float32)
        out = enhance_face(img, (10, 10, 25, 25))
        np.testing.assert_allclose(out, 0.4, atol=1e-5)

    @pytest.mark.parametrize("bbox", [(0, 0, 40, 10), (5, 20, 12, 60), (50, 50, 64, 64)])
    def test_output_size(self, bbox):
        img = np.random.default_rng(1).random((3, 64, 64)).astype(np.float32)
        assert enhance_face(img, bbox).shape == (3, 32, 32)

    def test_square_box_stays_inside(self):
        x0, y0, x1, y1 = square_crop_box((50, 0, 64, 6), 64, 64)
        assert x1 - x0 == y1 - y0 == 14
        assert x1 <= 64 and y0 >= 0

    def test_degenerate_box(self):
        with pytest.raises(ShapeError):
            square_crop_box((5, 5, 5, 9), 64, 64)

    def test_detects_corpus_face(self, records):
        for r in records:
            assert detect_face_bbox(r.image) == tuple(r.face_bbox)

    def test_no_face(self):
        with pytest.raises(UnreadableRegionError):
            detect_face_bbox(np.zeros((3, 64, 64), np.float32))
