"""Word-level prompt encoder for the toy model.

There is no contextual text encoder: a prompt is split on whitespace and each
word is looked up in a small embedding table.  The table is learned during
base training and frozen afterwards, playing the role of a frozen text
encoder.
"""
from __future__ import annotations

import numpy as np

from .tensor import ContractError

PAD = "<pad>"

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "white")
SHAPES = ("square", "circle", "triangle")

# prompt-regularization captions; "{}" is replaced with the bound word
TEMPLATES = (
    "a {}",
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a {} on a dark background",
    "a small {}",
    "a big {}",
    "a {} in the scene",
    "a rendering of a {}",
    "a drawing of a {}",
    "a {} near the edge",
    "a centered {}",
    "a single {}",
    "one {}",
    "a {} on a flat background",
    "a {} on a gradient background",
    "a toy {}",
    "a plain {}",
    "a sketch of a {}",
    "a bright {}",
    "the {}",
    "a {} object",
    "a {} shape",
    "a photo of the {}",
)

_FILLER = ("a", "an", "and", "of", "the", "photo", "picture", "image", "on", "dark",
           "background", "small", "big", "in", "scene", "rendering", "drawing", "near",
           "edge", "centered", "single", "one", "flat", "gradient", "toy", "plain",
           "sketch", "bright", "object", "shape")

VOCAB: tuple[str, ...] = (PAD,) + COLORS + SHAPES + _FILLER
assert len(VOCAB) <= 64 and len(set(VOCAB)) == len(VOCAB)


class VocabularyError(ContractError):
    pass


def tokenize(prompt) -> list[str]:
    if isinstance(prompt, str):
        return prompt.split()
    return list(prompt)


class TextEmbedder:
    """Maps prompts to ``(n, d)`` feature matrices.

    ``table`` has one row per vocabulary word; row 0 is the pad token, which
    also fills the whole sequence for the null (unconditional) prompt.
    """

    def __init__(self, table: np.ndarray, max_len: int, vocab=VOCAB):
        self.vocab = tuple(vocab)
        self.word_to_id = {w: i for i, w in enumerate(self.vocab)}
        self.table = table
        self.max_len = max_len
        self.pad_id = self.word_to_id[PAD]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def token_ids(self, prompt) -> list[int]:
        words = tokenize(prompt)
        if len(words) > self.max_len:
            raise VocabularyError(f"prompt has {len(words)} words; max is {self.max_len}")
        ids = []
        for w in words:
            if w not in self.word_to_id or w == PAD:
                raise VocabularyError(f"word {w!r} is not in the vocabulary")
            ids.append(self.word_to_id[w])
        return ids + [self.pad_id] * (self.max_len - len(ids))

    def positions(self, prompt) -> dict[str, list[int]]:
        """Index positions of each word in the encoded sequence."""
        out: dict[str, list[int]] = {}
        for i, w in enumerate(tokenize(prompt)):
            out.setdefault(w, []).append(i)
        return out

    def encode(self, prompt) -> np.ndarray:
        return self.table[self.token_ids(prompt)]

    def encode_batch(self, prompts) -> np.ndarray:
        return np.stack([self.encode(p) for p in prompts])

    def null(self) -> np.ndarray:
        return self.table[[self.pad_id] * self.max_len]
