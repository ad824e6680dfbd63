import re

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.text_encoder import (
    HFTextBackbone,
    StandinTextBackbone,
    StandinTokenizer,
    build_joint_sequence,
    clean_text,
    encode_text,
    pad_batch,
)


def clean_reference(raw):
    """Char-by-char reference: blank URL tokens, keep alphanumerics, squeeze spaces."""
    words = []
    for chunk in raw.split():
        low = chunk.lower()
        start = min((i for i in (low.find("http://"), low.find("https://"), low.find("www."), low.find("ftp://"))
                     if i >= 0), default=-1)
        if start >= 0:
            chunk = chunk[:start]
        words.append("".join(c if c.isalnum() else " " for c in chunk))
    return " ".join(" ".join(words).split())


class TestClean:
    def test_url_and_punct(self):
        assert clean_text("Check http://x.com this!!") == "Check this"

    def test_empty(self):
        assert clean_text("") == ""

    def test_mixed_whitespace(self):
        raw = "a  b\tc https://t.co/Ab1 d"
        assert clean_text(raw) == "a b c d" == clean_reference(raw)

    def test_hashtags_and_mentions_survive_as_words(self):
        assert clean_text("#Shabbat @user_1 shalom") == "Shabbat user 1 shalom"

    def test_keeps_digits_and_unicode_letters(self):
        assert clean_text("année 2020: ok") == "année 2020 ok"

    @given(st.text())
    def test_idempotent(self, s):
        once = clean_text(s)
        assert clean_text(once) == once

    @given(st.text(alphabet=st.characters(codec="ascii")))
    def test_matches_reference(self, s):
        assert clean_text(s) == clean_reference(s)

    @given(st.text())
    def test_charset(self, s):
        out = clean_text(s)
        assert all(c.isalnum() or c == " " for c in out)
        assert "  " not in out and out == out.strip()


class TestJointSequence:
    tok = StandinTokenizer()

    def test_example_layout(self):
        seq = build_joint_sequence("some people have jew parasites embedded in their brains", "liberals")
        assert seq.tokens[0] == "[CLS]"
        assert list(seq.tokens[slice(*seq.post_span)]) == "some people have jew parasites embedded in their brains".split()
        assert list(seq.tokens[slice(*seq.ocr_span)]) == ["liberals"]
        assert seq.tokens[seq.post_span[1]] == "[SEP]"
        assert seq.ocr_span[0] > seq.post_span[1]

    def test_empty_minimal_frame(self):
        seq = build_joint_sequence("", "")
        assert len(seq) == self.tok.num_special_tokens == 3
        assert seq.tokens == ("[CLS]", "[SEP]", "[SEP]")

    def test_truncates_post_first(self):
        post = " ".join(f"p{i}" for i in range(600))
        ocr = " ".join(f"o{i}" for i in range(100))
        seq = build_joint_sequence(post, ocr, 512)
        # 512 - 3 specials - 100 ocr = 409 post tokens
        assert len(seq) == 512
        assert seq.ocr_span[1] - seq.ocr_span[0] == 100
        assert seq.post_span[1] - seq.post_span[0] == 409
        assert list(seq.tokens[slice(*seq.post_span)]) == post.split()[:409]

    def test_ocr_first_option(self):
        post = " ".join(f"p{i}" for i in range(600))
        ocr = " ".join(f"o{i}" for i in range(100))
        seq = build_joint_sequence(post, ocr, 512, truncation="ocr_first")
        assert seq.post_span[1] - seq.post_span[0] == 509
        assert seq.ocr_span[0] == seq.ocr_span[1]

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            build_joint_sequence("a", "b", truncation="middle")

    @settings(max_examples=60, deadline=None)
    @given(st.text(max_size=400), st.text(max_size=400), st.integers(3, 64))
    def test_length_bound(self, post, ocr, max_len):
        seq = build_joint_sequence(clean_text(post), clean_text(ocr), max_len)
        assert len(seq) <= max_len
        assert seq.token_ids[0] == self.tok.cls_token_id

    @given(st.text(alphabet="abcdef ", min_size=1, max_size=20), st.text(alphabet="ghij ", min_size=1, max_size=20))
    def test_swap_changes_sequence(self, a, b):
        s1 = build_joint_sequence(a, b)
        s2 = build_joint_sequence(b, a)
        if s1.post_ids != s1.ocr_ids:
            assert s1.token_ids != s2.token_ids


@pytest.fixture(scope="module")
def standin():
    return StandinTextBackbone(seed=0).eval()


class TestEncodeStandin:
    def test_shapes(self, standin):
        rep = encode_text(build_joint_sequence("hello there", "ocr words"), standin)
        assert rep.final.shape == (768,) and rep.intermediate.shape == (768,)
        assert standin.intermediate_layer == 1

    def test_deterministic(self, standin):
        seq = build_joint_sequence("hello there", "ocr words")
        a, b = encode_text(seq, standin), encode_text(seq, standin)
        assert torch.equal(a.final, b.final) and torch.equal(a.intermediate, b.intermediate)

    def test_seeded_construction(self):
        seq = build_joint_sequence("x y", "z")
        a = encode_text(seq, StandinTextBackbone(seed=5))
        b = encode_text(seq, StandinTextBackbone(seed=5))
        assert torch.equal(a.final, b.final)

    def test_identity_like_is_embedding_mean(self):
        bb = StandinTextBackbone.identity_like(vocab_size=16, hidden_size=4)
        ids = torch.tensor([[1, 7]])
        rep = bb(ids, torch.ones_like(ids, dtype=torch.bool))
        emb = bb.tok_emb.weight.detach().numpy()
        expected = (emb[1] + emb[7]) / 2
        np.testing.assert_allclose(rep["final"][0].detach().numpy(), expected, atol=1e-6)

    def test_padding_does_not_change_cls(self, standin):
        s1 = build_joint_sequence("short", "")
        s2 = build_joint_sequence("a much longer post text here", "and ocr")
        ids, mask = pad_batch([s1, s2])
        batched = standin(ids, mask)["final"][0]
        alone = encode_text(s1, standin).final
        torch.testing.assert_close(batched, alone, atol=1e-5, rtol=1e-5)

    def test_out_of_vocab(self, standin):
        seq = build_joint_sequence("a", "b")
        bad = type(seq)(
            token_ids=(1, 99999, 2, 2), tokens=("[CLS]", "?", "[SEP]", "[SEP]"), post_span=(1, 2),
            ocr_span=(3, 3), cls_token_id=1, sep_token_id=2,
        )
        with pytest.raises(ValueError, match="vocabulary"):
            encode_text(bad, standin)

    @settings(max_examples=25, deadline=None)
    @given(st.text(max_size=200), st.text(max_size=100))
    def test_finite(self, standin, post, ocr):
        rep = encode_text(build_joint_sequence(clean_text(post), clean_text(ocr), 64), standin)
        assert torch.isfinite(rep.final).all() and torch.isfinite(rep.intermediate).all()


def test_hf_adapter_with_local_bert(tmp_path):
    """Wraps a randomly initialised BERT with a local vocab; no downloads."""
    from transformers import BertConfig, BertModel, BertTokenizer

    words = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "some", "people", "liberals", "jew", "have"]
    (tmp_path / "vocab.txt").write_text("\n".join(words) + "\n")
    tok = BertTokenizer(str(tmp_path / "vocab.txt"))
    cfg = BertConfig(vocab_size=len(words), hidden_size=768, num_hidden_layers=4, num_attention_heads=12,
                     intermediate_size=64, max_position_embeddings=64, attn_implementation="eager")
    torch.manual_seed(0)
    bb = HFTextBackbone("local-bert", model=BertModel(cfg, add_pooling_layer=False), tokenizer=tok).eval()
    seq = build_joint_sequence("some people", "liberals", 32, bb.tokenizer)
    assert seq.tokens == ("[CLS]", "some", "people", "[SEP]", "liberals", "[SEP]")
    rep = encode_text(seq, bb)
    assert rep.final.shape == (768,) and rep.intermediate.shape == (768,)
    assert bb.intermediate_layer == 2
    ids, mask = pad_batch([seq])
    out = bb.model(input_ids=ids, attention_mask=mask.long(), output_hidden_states=True)
    torch.testing.assert_close(rep.intermediate, out.hidden_states[2][0, 0])
