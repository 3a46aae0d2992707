"""Word-level tokenizer over the closed caption grammar."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

from .vocab import ACTIONS, ENTITY_CLASSES, GRAMMAR_WORDS, SPECIAL_TOKENS, UNK_ID

_PUNCT = (",", ".")


class Tokenizer:
    """Maps caption words to ids. Special tokens always occupy ids 0-5."""

    def __init__(self, words: Iterable[str] | None = None):
        if words is None:
            words = list(ENTITY_CLASSES) + list(ACTIONS) + list(GRAMMAR_WORDS)
        vocab = list(SPECIAL_TOKENS)
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab: list[str] = vocab
        self.word_to_id = {w: i for i, w in enumerate(vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    @staticmethod
    def split_words(text: str) -> list[str]:
        words = []
        for chunk in text.split():
            tail = []
            while chunk and chunk[-1] in _PUNCT:
                tail.append(chunk[-1])
                chunk = chunk[:-1]
            if chunk:
                words.append(chunk)
            words.extend(reversed(tail))
        return words

    def tokenize(self, text: str) -> list[int]:
        return [self.word_to_id.get(w, UNK_ID) for w in self.split_words(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        out = ""
        for i in ids:
            w = self.vocab[int(i)]
            if w in _PUNCT or not out:
                out += w
            else:
                out += " " + w
        return out

    def id(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: special tokens must occupy the first {len(SPECIAL_TOKENS)} lines")
        return cls(lines[len(SPECIAL_TOKENS):])
