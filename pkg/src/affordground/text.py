"""Whole-word vocabulary, tokenizer and a small trainable instruction encoder."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .fusion import AttentionParams, multi_head_cross_attn
from .nn import Module, param
from .tensor import Tensor

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
_STRIP = str.maketrans("", "", string.punctuation)


def split_words(text: str) -> list[str]:
    return text.lower().translate(_STRIP).split()


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.token_to_id: dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def dumps(self) -> str:
        return "".join(f"{t}\t{i}\n" for t, i in self.token_to_id.items())

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        pairs = [line.split("\t") for line in text.splitlines() if line.strip()]
        pairs.sort(key=lambda p: int(p[1]))
        vocab = cls()
        for tok, idx in pairs:
            if int(idx) in (PAD, UNK):
                continue
            vocab.token_to_id[tok] = int(idx)
        vocab.id_to_token = {i: t for t, i in vocab.token_to_id.items()}
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_text())


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted({w for text in corpus for w in split_words(text)})
    return Vocabulary(words)


def tokenize(text: str, vocab: Vocabulary, length: int) -> tuple[np.ndarray, list[str]]:
    """Lowercase, strip punctuation, split; map to ids, then pad/truncate to ``length``."""
    words = split_words(text)[:length]
    ids = np.full(length, PAD, dtype=np.int64)
    ids[: len(words)] = [vocab.lookup(w) for w in words]
    return ids, words + [PAD_TOKEN] * (length - len(words))


@dataclass
class InstructionRecord:
    raw: str
    structured: str
    affordance_id: int
    affordance_word: str
    part_word: str
    part_index: int

    _KEYS = ("raw", "structured", "affordance_id", "affordance_word", "part_word", "part_index")

    def to_line(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self._KEYS}, sort_keys=False)

    @classmethod
    def from_line(cls, line: str) -> "InstructionRecord":
        d = json.loads(line)
        return cls(**{k: d[k] for k in cls._KEYS})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TextFeatures:
    feats: Tensor           # C x L
    pad_mask: np.ndarray    # True at PAD positions
    token_ids: np.ndarray = field(repr=False, default=None)


class TextEncoder(Module):
    """Token + positional embedding followed by one residual self-attention layer."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, channels: int, max_len: int, heads: int):
        self.embed = param(rng, (vocab_size, channels), 1.0)
        self.pos = param(rng, (channels, max_len), 0.5)
        self.attn = AttentionParams(rng, channels, heads)
        self.max_len = max_len

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def __call__(self, token_ids) -> TextFeatures:
        ids = np.asarray(token_ids, dtype=np.int64)
        L = ids.shape[0]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds positional table {self.max_len}")
        if ids.max(initial=0) >= self.vocab_size or ids.min(initial=0) < 0:
            raise ValueError(f"token id out of range for vocabulary of size {self.vocab_size}")
        pad = ids == PAD
        x = T.transpose(T.take_rows(self.embed, ids))
        pos = self.pos if L == self.max_len else T.take_cols(self.pos, np.arange(L))
        x = T.add(x, pos)
        if pad.all():
            raise ValueError("cannot encode an all-PAD sequence")
        feats = T.add(x, multi_head_cross_attn(x, x, x, self.attn, key_mask=~pad))
        return TextFeatures(feats, pad, ids)


def encode_text(encoder: TextEncoder, record: InstructionRecord, vocab: Vocabulary, length: int,
                use_structured: bool = True) -> TextFeatures:
    text = record.structured if use_structured else record.raw
    ids, _ = tokenize(text, vocab, length)
    return encoder(ids)


def extract_part_embedding(features: TextFeatures, part_index: int) -> Tensor:
    """Column ``part_index`` of the token features, as a ``C x 1`` tensor."""
    if not 0 <= part_index < features.pad_mask.shape[0]:
        raise IndexError(f"part index {part_index} outside sequence")
    if features.pad_mask[part_index]:
        raise ValueError(f"part index {part_index} addresses a PAD position (corrupted record?)")
    return T.take_cols(features.feats, [part_index])
