"""Text + OCR encoder: cleaning, joint [CLS] post [SEP] ocr layout, transformer backbones."""

from __future__ import annotations

import math
import os
import re
import zlib
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

URL_RE = re.compile(r"(?:https?://|ftp://|www\.)\S+", re.IGNORECASE)
WS_RE = re.compile(r"\s+")

TEXT_DIM = 768
MAX_LEN = 512

HF_CHECKPOINTS = {"bert-base": "bert-base-uncased", "roberta-base": "roberta-base"}


def clean_text(raw: str) -> str:
    """Drop URLs and every character that is not a letter or digit."""
    text = URL_RE.sub(" ", raw)
    text = "".join(c if c.isalnum() else " " for c in text)
    return WS_RE.sub(" ", text).strip()


class JointTokenizer:
    """Minimal tokenizer surface used to assemble the joint sequence."""

    cls_token_id: int
    sep_token_id: int
    pad_token_id: int
    vocab_size: int

    def tokenize(self, text: str) -> list[str]:
        raise NotImplementedError

    def convert_tokens_to_ids(self, tokens: Sequence[str]) -> list[int]:
        raise NotImplementedError

    def convert_ids_to_tokens(self, ids: Sequence[int]) -> list[str]:
        raise NotImplementedError

    def build_layout(self, a_ids: list[int], b_ids: list[int]) -> list[int]:
        raise NotImplementedError

    @property
    def num_special_tokens(self) -> int:
        return len(self.build_layout([], []))


class StandinTokenizer(JointTokenizer):
    """Whitespace tokenizer hashing lowercased words into a fixed vocabulary.

    Layout follows the BERT convention: ``[CLS] a [SEP] b [SEP]``.
    """

    SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")

    def __init__(self, vocab_size: int = 8192):
        if vocab_size <= len(self.SPECIALS):
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size
        self.pad_token_id, self.cls_token_id, self.sep_token_id, self.unk_token_id = range(4)
        self._reverse: dict[int, str] = dict(enumerate(self.SPECIALS))

    def tokenize(self, text: str) -> list[str]:
        return text.lower().split()

    def token_id(self, token: str) -> int:
        if token in self.SPECIALS:
            return self.SPECIALS.index(token)
        return len(self.SPECIALS) + zlib.crc32(token.encode("utf-8")) % (self.vocab_size - len(self.SPECIALS))

    def convert_tokens_to_ids(self, tokens):
        ids = []
        for tok in tokens:
            i = self.token_id(tok)
            self._reverse.setdefault(i, tok)
            ids.append(i)
        return ids

    def convert_ids_to_tokens(self, ids):
        return [self._reverse.get(i, f"<{i}>") for i in ids]

    def build_layout(self, a_ids, b_ids):
        return [self.cls_token_id, *a_ids, self.sep_token_id, *b_ids, self.sep_token_id]


class HFTokenizerAdapter(JointTokenizer):
    def __init__(self, tokenizer):
        self.tok = tokenizer
        self.cls_token_id = tokenizer.cls_token_id
        self.sep_token_id = tokenizer.sep_token_id
        self.pad_token_id = tokenizer.pad_token_id
        self.vocab_size = len(tokenizer)

    def tokenize(self, text):
        return self.tok.tokenize(text)

    def convert_tokens_to_ids(self, tokens):
        return list(self.tok.convert_tokens_to_ids(list(tokens)))

    def convert_ids_to_tokens(self, ids):
        return list(self.tok.convert_ids_to_tokens(list(ids)))

    def build_layout(self, a_ids, b_ids):
        if hasattr(self.tok, "build_inputs_with_special_tokens"):
            return list(self.tok.build_inputs_with_special_tokens(list(a_ids), list(b_ids)))
        return [t for slot in self._template() for t in
                (a_ids if slot == "a" else b_ids if slot == "b" else [slot])]

    def _template(self) -> list:
        # run one placeholder token per segment through the fast tokenizer's post-processor
        backend = self.tok.backend_tokenizer
        unk = self.tok.unk_token
        enc = backend.post_processor.process(
            backend.encode([unk], is_pretokenized=True, add_special_tokens=False),
            backend.encode([unk], is_pretokenized=True, add_special_tokens=False),
            True,
        )
        slots = iter("ab")
        return [next(slots) if not special else i for i, special in zip(enc.ids, enc.special_tokens_mask)]


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    tokens: tuple[str, ...]
    post_span: tuple[int, int]
    ocr_span: tuple[int, int]
    cls_token_id: int
    sep_token_id: int
    max_len: int = MAX_LEN

    def __post_init__(self):
        ids = self.token_ids
        if len(ids) > self.max_len:
            raise ValueError(f"sequence length {len(ids)} exceeds max_len {self.max_len}")
        if not ids or ids[0] != self.cls_token_id:
            raise ValueError("sequence must begin with the classification token")
        between = ids[self.post_span[1] : self.ocr_span[0]]
        if not between or any(t != self.sep_token_id for t in between):
            raise ValueError("post and OCR segments must be divided by the separator")
        if len(self.tokens) != len(ids):
            raise ValueError("token strings misaligned with ids")

    def __len__(self):
        return len(self.token_ids)

    @property
    def post_ids(self) -> tuple[int, ...]:
        return self.token_ids[slice(*self.post_span)]

    @property
    def ocr_ids(self) -> tuple[int, ...]:
        return self.token_ids[slice(*self.ocr_span)]


def build_joint_sequence(
    post_text: str,
    ocr_text: str,
    max_len: int = MAX_LEN,
    tokenizer: JointTokenizer | None = None,
    truncation: str = "post_first",
) -> TokenSequence:
    """Lay out ``[CLS] post [SEP] ocr`` with the tokenizer's special-token convention.

    ``truncation="post_first"`` shortens the post segment before touching OCR;
    ``"ocr_first"`` does the opposite.
    """
    tokenizer = tokenizer or StandinTokenizer()
    a_tok = tokenizer.tokenize(post_text)
    b_tok = tokenizer.tokenize(ocr_text)
    a = tokenizer.convert_tokens_to_ids(a_tok)
    b = tokenizer.convert_tokens_to_ids(b_tok)
    budget = max_len - tokenizer.num_special_tokens
    if budget < 0:
        raise ValueError(f"max_len {max_len} cannot hold the special tokens")
    if truncation == "post_first":
        b = b[:budget]
        a = a[: budget - len(b)]
    elif truncation == "ocr_first":
        a = a[:budget]
        b = b[: budget - len(a)]
    else:
        raise ValueError(f"unknown truncation policy {truncation!r}")

    # locate segments via sentinels so any special-token convention works
    probe = tokenizer.build_layout([-1], [-2])
    a_at, b_at = probe.index(-1), probe.index(-2)
    ids = tokenizer.build_layout(a, b)
    post_span = (a_at, a_at + len(a))
    ocr_start = b_at - 1 + len(a)
    ocr_span = (ocr_start, ocr_start + len(b))
    tokens = tokenizer.convert_ids_to_tokens(ids)
    tokens[slice(*post_span)] = a_tok[: len(a)]
    tokens[slice(*ocr_span)] = b_tok[: len(b)]
    return TokenSequence(
        token_ids=tuple(ids),
        tokens=tuple(tokens),
        post_span=post_span,
        ocr_span=ocr_span,
        cls_token_id=tokenizer.cls_token_id,
        sep_token_id=tokenizer.sep_token_id,
        max_len=max_len,
    )


def pad_batch(seqs: Sequence[TokenSequence], pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    length = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), length), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), length), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s.token_ids, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


@dataclass
class TextRepr:
    final: torch.Tensor
    intermediate: torch.Tensor


class TextBackbone(nn.Module):
    """Base for text encoders returning CLS vectors from the last and a middle layer."""

    name = "abstract"
    tokenizer: JointTokenizer
    hidden_size: int
    num_layers: int
    max_positions: int

    @property
    def intermediate_layer(self) -> int:
        return math.ceil(self.num_layers / 2)

    def forward(self, input_ids, attention_mask, output_attentions=False) -> dict:
        raise NotImplementedError


class StandinAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, pure_attention: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.pure_attention = pure_attention
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        if not pure_attention:
            self.norm1 = nn.LayerNorm(dim)
            self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))
            self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, key_mask):
        b, n, d = x.shape
        dh = d // self.heads

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        out = self.o((probs @ v).transpose(1, 2).reshape(b, n, d))
        if self.pure_attention:
            return out, probs
        x = self.norm1(x + out)
        return self.norm2(x + self.ffn(x)), probs


class StandinTextBackbone(TextBackbone):
    """Small seed-initialized transformer with the 768-d output contract of BERT/RoBERTa."""

    name = "standin"

    def __init__(
        self,
        vocab_size: int = 8192,
        hidden_size: int = TEXT_DIM,
        num_layers: int = 2,
        heads: int = 12,
        ffn_dim: int = 1024,
        max_positions: int = MAX_LEN,
        seed: int = 0,
        pure_attention: bool = False,
    ):
        super().__init__()
        self.tokenizer = StandinTokenizer(vocab_size)
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.max_positions = max_positions
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.tok_emb = nn.Embedding(vocab_size, hidden_size)
            self.pos_emb = nn.Embedding(max_positions, hidden_size)
            self.layers = nn.ModuleList(
                StandinAttentionLayer(hidden_size, heads, ffn_dim, pure_attention) for _ in range(num_layers)
            )
            nn.init.normal_(self.pos_emb.weight, std=0.02)

    @classmethod
    def identity_like(cls, vocab_size: int = 16, hidden_size: int = 4, seed: int = 0) -> StandinTextBackbone:
        """Single uniform-attention layer whose CLS output is the mean token embedding."""
        bb = cls(vocab_size, hidden_size, num_layers=1, heads=1, ffn_dim=1, seed=seed, pure_attention=True)
        layer = bb.layers[0]
        with torch.no_grad():
            bb.pos_emb.weight.zero_()
            for lin in (layer.q, layer.k):
                lin.weight.zero_()
                lin.bias.zero_()
            for lin in (layer.v, layer.o):
                lin.weight.copy_(torch.eye(hidden_size))
                lin.bias.zero_()
        return bb

    def forward(self, input_ids, attention_mask, output_attentions=False):
        pos = torch.arange(input_ids.shape[1], device=input_ids.device)
        x = self.tok_emb(input_ids) + self.pos_emb(pos)[None]
        hidden = [x]
        attentions = []
        for layer in self.layers:
            x, probs = layer(x, attention_mask)
            hidden.append(x)
            attentions.append(probs)
        out = {"final": hidden[-1][:, 0], "intermediate": hidden[self.intermediate_layer][:, 0]}
        if output_attentions:
            out["attentions"] = attentions
        return out


class HFTextBackbone(TextBackbone):
    """Pretrained transformer loaded through ``transformers``."""

    def __init__(self, name_or_path: str, model=None, tokenizer=None, cache_dir: str | None = None):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        cache_dir = cache_dir or os.environ.get("SEMFUSE_CACHE")
        self.name = name_or_path
        self.model = model or AutoModel.from_pretrained(
            name_or_path, cache_dir=cache_dir, attn_implementation="eager", add_pooling_layer=False
        )
        self.tokenizer = HFTokenizerAdapter(tokenizer or AutoTokenizer.from_pretrained(name_or_path, cache_dir=cache_dir))
        cfg = self.model.config
        self.hidden_size = cfg.hidden_size
        self.num_layers = cfg.num_hidden_layers
        self.max_positions = cfg.max_position_embeddings
        if getattr(cfg, "model_type", "") == "roberta":
            # RoBERTa reserves padding_idx + 1 positions
            self.max_positions -= cfg.pad_token_id + 1

    def forward(self, input_ids, attention_mask, output_attentions=False):
        res = self.model(
            input_ids=input_ids,
            attention_mask=attention_mask.long(),
            output_hidden_states=True,
            output_attentions=output_attentions,
        )
        out = {"final": res.hidden_states[-1][:, 0], "intermediate": res.hidden_states[self.intermediate_layer][:, 0]}
        if output_attentions:
            out["attentions"] = list(res.attentions)
        return out


def build_text_backbone(kind: str = "standin", checkpoint_dir: str | None = None, seed: int = 0) -> TextBackbone:
    if kind == "standin":
        return StandinTextBackbone(seed=seed)
    if kind in HF_CHECKPOINTS:
        return HFTextBackbone(checkpoint_dir or HF_CHECKPOINTS[kind])
    raise ValueError(f"unknown text backbone {kind!r}")


def check_vocab(ids: torch.Tensor, backbone: TextBackbone) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= backbone.tokenizer.vocab_size):
        raise ValueError(f"token id out of vocabulary range [0, {backbone.tokenizer.vocab_size})")
    if ids.shape[-1] > backbone.max_positions:
        raise ValueError(f"sequence longer than backbone limit {backbone.max_positions}")


def encode_text(seq: TokenSequence, backbone: TextBackbone) -> TextRepr:
    ids, mask = pad_batch([seq], backbone.tokenizer.pad_token_id)
    check_vocab(ids, backbone)
    out = backbone(ids, mask)
    return TextRepr(final=out["final"][0], intermediate=out["intermediate"][0])
