"""Fixed caption vocabulary shared by dataset generation and the text encoder.

Token 0 is the null/padding token; captions name each primitive as a
"<color> <kind>" pair joined by "and", so they decode back to scene contents.
"""

from __future__ import annotations

KINDS = ("cube", "sphere", "cylinder")

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "cyan": (0.10, 0.75, 0.80),
    "magenta": (0.80, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.45, 0.15, 0.70),
    "teal": (0.10, 0.45, 0.45),
    "pink": (0.95, 0.60, 0.70),
}
COLORS = tuple(COLOR_RGB)

NULL_TOKEN = "<null>"
VOCAB = (NULL_TOKEN,) + KINDS + COLORS + ("and",)
NULL_ID = 0
VOCAB_SIZE = len(VOCAB)

# Longest caption: 3 primitives -> 3 * (color kind) + 2 "and" = 8 tokens.
MAX_TOKENS = 8

_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def encode_words(words) -> list[int]:
    try:
        return [_WORD_TO_ID[w] for w in words]
    except KeyError as exc:
        raise KeyError(f"word not in vocabulary: {exc.args[0]!r}") from None


def decode_ids(ids) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise IndexError(f"token id {i} outside vocabulary of size {VOCAB_SIZE}")
        out.append(VOCAB[i])
    return out


def caption_for(primitive_descr: list[tuple[str, str]]) -> list[int]:
    """Token ids for [(color, kind), ...] joined with "and"."""
    words: list[str] = []
    for idx, (color, kind) in enumerate(primitive_descr):
        if idx:
            words.append("and")
        words.extend((color, kind))
    return encode_words(words)
