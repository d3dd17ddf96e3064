"""Deterministic hashing word tokenizer.

The text tower is randomly initialized, so there is no learned vocabulary to
respect; all the encoder contract needs is a stable, injective-enough mapping
from words to ids below ``vocab_size``. Words are lowercased alphanumeric runs
hashed with blake2b into [3, vocab_size); ids 0/1/2 are PAD/BOS/EOS.
"""

from __future__ import annotations

import hashlib
import re

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
_NUM_SPECIAL = 3

_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    """Lowercased alphanumeric word list of ``text``."""
    return _WORD_RE.findall(text.lower())


def word_id(word: str, vocab_size: int) -> int:
    """Stable id of one word in [3, vocab_size)."""
    if vocab_size <= _NUM_SPECIAL:
        raise ValueError(f"vocab_size must be > {_NUM_SPECIAL}, got {vocab_size}")
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return _NUM_SPECIAL + int.from_bytes(digest, "little") % (vocab_size - _NUM_SPECIAL)


def encode(text: str, vocab_size: int, add_special: bool = True) -> list[int]:
    """Token ids of ``text``; empty text encodes to just [BOS, EOS]."""
    ids = [word_id(w, vocab_size) for w in words(text)]
    if add_special:
        return [BOS_ID, *ids, EOS_ID]
    return ids
