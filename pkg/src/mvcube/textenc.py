"""Toy text encoder: fixed-vocabulary tokenizer plus learned embeddings.

Prompts are lowercased, whitespace-split and mapped against a fixed 29-word
vocabulary. The encoder is a learned token table; the sentence-level class
vector is a learned linear projection of the mean over non-pad token
embeddings. A dedicated null prompt (all null tokens) provides the learned
unconditional embedding used for guidance dropout and classifier-free
guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

L_MAX = 48
D_TEXT = 64

# Fixed order; ids are list positions. Serialized into checkpoints.
VOCAB_TOKENS = [
    "null", "pad", "unk",
    "a", "cube", "with", "on", "the", "and",
    "front", "back", "left", "right", "side", "this", "body",
    "red", "green", "blue", "yellow", "white", "black", "orange", "purple", "gray",
    "circle", "square", "triangle", "cross",
]
NULL_ID, PAD_ID, UNK_ID = 0, 1, 2


class Vocabulary:
    """Ordered token list with null/pad/unk specials at ids 0..2."""

    def __init__(self, tokens=None):
        self.tokens = list(tokens if tokens is not None else VOCAB_TOKENS)
        assert self.tokens[:3] == ["null", "pad", "unk"]
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id_for(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)


_DEFAULT_VOCAB = Vocabulary()


def default_vocabulary() -> Vocabulary:
    return _DEFAULT_VOCAB


def tokenize(prompt: str, vocab: Vocabulary | None = None) -> list[int]:
    """Token ids of a prompt, padded / truncated to exactly L_MAX."""
    vocab = vocab or _DEFAULT_VOCAB
    ids = [vocab.id_for(w) for w in prompt.lower().split()][:L_MAX]
    return ids + [PAD_ID] * (L_MAX - len(ids))


NULL_TOKENS = [NULL_ID] * L_MAX


@dataclass
class TextEmbedding:
    E: torch.Tensor    # (L_MAX, D_TEXT)
    CLS: torch.Tensor  # (D_TEXT,)


@dataclass
class TextCondition:
    """Overall + view-specific embeddings feeding the injection module."""

    E_o: torch.Tensor
    E_v: torch.Tensor
    CLS_o: torch.Tensor
    CLS_v: torch.Tensor


class TextEncoder(nn.Module):
    def __init__(self, vocab: Vocabulary | None = None, d_text: int = D_TEXT):
        super().__init__()
        self.vocab = vocab or _DEFAULT_VOCAB
        self.table = nn.Embedding(len(self.vocab), d_text)
        self.cls_proj = nn.Linear(d_text, d_text)

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed one or more token sequences.

        ids: (..., L_MAX) int64. Returns E (..., L_MAX, D), CLS (..., D).
        CLS projects the mean over non-pad positions; an all-pad sequence
        falls back to the pad embedding so the function stays total.
        """
        e = self.table(ids)
        nonpad = (ids != PAD_ID).to(e.dtype).unsqueeze(-1)
        count = nonpad.sum(dim=-2)
        summed = (e * nonpad).sum(dim=-2)
        mean = torch.where(count > 0, summed / count.clamp(min=1.0), self.table.weight[PAD_ID])
        return e, self.cls_proj(mean)


def encode(tokens, enc: TextEncoder) -> TextEmbedding:
    """Deterministic embedding of a single token sequence."""
    ids = torch.as_tensor(tokens, dtype=torch.int64)
    if ids.shape != (L_MAX,):
        raise ValueError(f"expected a sequence of {L_MAX} token ids, got {tuple(ids.shape)}")
    if int(ids.max()) >= len(enc.vocab):
        raise ValueError("token id outside the vocabulary")
    e, cls = enc(ids)
    return TextEmbedding(E=e, CLS=cls)


def encode_pair(overall: str, view: str, enc: TextEncoder) -> TextCondition:
    o = encode(tokenize(overall, enc.vocab), enc)
    v = encode(tokenize(view, enc.vocab), enc)
    return TextCondition(E_o=o.E, E_v=v.E, CLS_o=o.CLS, CLS_v=v.CLS)


def null_condition(enc: TextEncoder) -> TextEmbedding:
    """The learned null embedding (unconditional branch / condition dropout)."""
    return encode(NULL_TOKENS, enc)
