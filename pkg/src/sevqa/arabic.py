"""Deterministic Arabic text normalization and whitespace tokenization.

This module is the single source of truth for text cleanup in the toolkit:
the severity annotator, the synthetic corpus generator, the tokenizer, and
the scorer all funnel text through :func:`normalize`.

Rules, applied in order:

1. NFC-normalize so precomposed and decomposed inputs behave identically.
2. Strip diacritics: combining marks U+064B-U+065F and superscript alef
   U+0670, plus tatweel U+0640.
3. Fold common letter variants:
   alef variants [آأإٱ] -> ا, alef maqsura ى -> ي, ta marbuta ة -> ه,
   hamza-on-waw ؤ -> و, hamza-on-ya ئ -> ي.
4. Replace every punctuation codepoint (Unicode category P*, which covers
   the Arabic marks ، ؛ ؟) with a space, so adjacent words never fuse.
5. Collapse whitespace runs to single spaces and trim; NFC once more so
   the result stays in normal form even when step 2/4 exposed a stray
   combining mark next to a new base character.

All functions are total and pure: any Unicode string in, no exceptions,
no shared state. Latin letters and digits pass through unchanged.
"""

from __future__ import annotations

import re
import unicodedata

# Tashkeel and Quranic-style combining marks, superscript alef, tatweel.
_DIACRITICS_RE = re.compile(r"[ً-ٰٟـ]")

_LETTER_FOLD = str.maketrans(
    {
        "آ": "ا",  # alef madda
        "أ": "ا",  # alef hamza above
        "إ": "ا",  # alef hamza below
        "ٱ": "ا",  # alef wasla
        "ى": "ي",  # alef maqsura -> ya
        "ة": "ه",  # ta marbuta -> ha
        "ؤ": "و",  # hamza on waw -> waw
        "ئ": "ي",  # hamza on ya -> ya
    }
)


def strip_diacritics(text: str) -> str:
    """Remove U+064B-U+065F, U+0670 and tatweel U+0640; keep everything else."""
    return _DIACRITICS_RE.sub("", text)


def normalize_letters(text: str) -> str:
    """Apply the fixed Arabic letter-variant folding map."""
    return text.translate(_LETTER_FOLD)


def strip_punctuation(text: str) -> str:
    """Replace every punctuation codepoint (category P*) with a space."""
    return "".join(
        " " if unicodedata.category(ch).startswith("P") else ch for ch in text
    )


def normalize(text: str) -> str:
    """Full pipeline: NFC, strip marks, fold letters, de-punctuate, re-space.

    Idempotent by construction; the output satisfies the normalized-text
    invariants (no diacritics/tatweel, no punctuation, single spaces,
    trimmed, NFC).
    """
    text = unicodedata.normalize("NFC", text)
    text = strip_diacritics(text)
    text = normalize_letters(text)
    text = strip_punctuation(text)
    text = " ".join(text.split())
    return unicodedata.normalize("NFC", text)


def tokenize_whitespace(text: str) -> list[str]:
    """Split normalized text on single spaces; joining back is the identity."""
    if not text:
        return []
    return text.split(" ")
