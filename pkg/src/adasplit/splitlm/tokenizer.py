from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class CharTokenizer:
    """Character vocabulary with ids assigned in code-point order.

    The last id is reserved for characters never seen during ``fit``.
    """

    def __init__(self, chars=None):
        self.chars = sorted(set(chars)) if chars is not None else None

    def fit(self, text: str) -> "CharTokenizer":
        self.chars = sorted(set(text))
        return self

    @property
    def vocab(self) -> dict:
        return {c: i for i, c in enumerate(self.chars)}

    @property
    def unk_id(self) -> int:
        return len(self.chars)

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 1

    def encode(self, text: str) -> np.ndarray:
        vocab = self.vocab
        unk = self.unk_id
        return np.fromiter((vocab.get(c, unk) for c in text), dtype=np.int64, count=len(text))

    def decode(self, ids) -> str:
        return "".join(self.chars[i] if i < len(self.chars) else "�" for i in np.asarray(ids).tolist())

    def to_dict(self) -> dict:
        return {c: i for i, c in enumerate(self.chars)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "CharTokenizer":
        mapping = json.loads(Path(path).read_text())
        return cls.from_dict(mapping)

    @classmethod
    def from_dict(cls, mapping: dict) -> "CharTokenizer":
        tok = cls()
        tok.chars = [c for c, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
        return tok


def tokenize(text: str, tokenizer: CharTokenizer | None = None) -> np.ndarray:
    """Encode ``text``; builds a tokenizer from ``text`` itself when none is given."""
    if tokenizer is None:
        tokenizer = CharTokenizer().fit(text)
    return tokenizer.encode(text)


def detokenize(ids, tokenizer: CharTokenizer) -> str:
    return tokenizer.decode(ids)


def split_sequences(ids: np.ndarray, length: int, stride: int | None = None) -> np.ndarray:
    """Cut a token stream into rows of ``length`` tokens (drops the ragged tail)."""
    stride = stride or length
    starts = range(0, len(ids) - length + 1, stride)
    return np.stack([ids[s:s + length] for s in starts]) if len(ids) >= length else np.empty((0, length), np.int64)
